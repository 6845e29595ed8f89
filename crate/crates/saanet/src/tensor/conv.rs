//! Spatial ops: grouped 2-d convolution and bilinear sampling.
//!
//! Both are composite primitives with hand-written adjoints; they are the
//! only ops that understand the `[C×H×W]` layout.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Grouped 2-d convolution.
    ///
    /// `self` is `[C_in×H×W]`, `weight` is `[C_out×(C_in/groups)×k_h×k_w]`,
    /// `bias` (optional) is `[C_out]`. `groups == C_in == C_out` realizes a
    /// depthwise convolution. Output extent along each spatial axis is
    /// `floor((ext + 2·padding − k)/stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
        tape: &Tape,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, c_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config("conv2d stride and kernel extents must be ≥ 1".into()));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_w != c_in / groups {
            return Err(Error::Config(format!(
                "conv2d groups {} incompatible with channels {}→{} (weight depth {})",
                groups, c_in, c_out, c_w
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d bias", &[c_out], b.shape()));
            }
        }
        let out_extent = |ext: usize, k: usize| -> Result<usize> {
            let padded = ext + 2 * padding;
            if padded < k {
                return Err(Error::Config(format!(
                    "conv2d kernel {} exceeds padded extent {}",
                    k, padded
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let oh = out_extent(h, kh)?;
        let ow = out_extent(w, kw)?;

        let ocg = c_out / groups; // output channels per group
        let mut data = vec![0.0; c_out * oh * ow];
        {
            let x = self.borrow_data();
            let wt = weight.borrow_data();
            for oc in 0..c_out {
                let g = oc / ocg;
                let base_ic = g * c_w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for icw in 0..c_w {
                            let ic = base_ic + icw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[(ic * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * c_w + icw) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            if let Some(b) = bias {
                let bd = b.borrow_data();
                for oc in 0..c_out {
                    let plane = &mut data[oc * oh * ow..(oc + 1) * oh * ow];
                    for v in plane {
                        *v += bd[oc];
                    }
                }
            }
        }
        let rg = tape.should_record(
            self.requires_grad()
                || weight.requires_grad()
                || bias.map(Tensor::requires_grad).unwrap_or(false),
        );
        let out = Tensor::result_of(vec![c_out, oh, ow], data, rg);
        if out.requires_grad() {
            let (x, wt, o) = (self.clone(), weight.clone(), out.clone());
            let b = bias.cloned();
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                if let Some(b) = &b {
                    if b.requires_grad() {
                        let mut db = vec![0.0; c_out];
                        for oc in 0..c_out {
                            db[oc] = g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
                        }
                        b.accumulate_grad(&db);
                    }
                }
                let xd = x.borrow_data();
                let wd = wt.borrow_data();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for oc in 0..c_out {
                    let grp = oc / ocg;
                    let base_ic = grp * c_w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(oc * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for icw in 0..c_w {
                                let ic = base_ic + icw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ic * h + iy as usize) * w + ix as usize;
                                        let wi = ((oc * c_w + icw) * kh + ky) * kw + kx;
                                        dx[xi] += go * wd[wi];
                                        dw[wi] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                drop(xd);
                drop(wd);
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if wt.requires_grad() {
                    wt.accumulate_grad(&dw);
                }
            });
        }
        Ok(out)
    }

    /// Samples `self` (`[C×H×W]`) at continuous pixel locations
    /// `locs` (`[P×2]`, ordered (x, y)), returning `[P×C]`.
    ///
    /// Each value is the bilinear blend of the four surrounding grid points;
    /// neighbors outside the grid contribute zero. Gradients flow to both the
    /// feature map and the locations, and the tape's sample counter advances
    /// by `P`.
    pub fn bilinear_sample_many(&self, locs: &Tensor, tape: &Tape) -> Result<Tensor> {
        let fs = self.shape();
        let ls = locs.shape();
        if fs.len() != 3 {
            return Err(Error::Contract(format!("bilinear source must be [C×H×W], got {:?}", fs)));
        }
        if ls.len() != 2 || ls[1] != 2 {
            return Err(Error::Contract(format!("locations must be [P×2], got {:?}", ls)));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let p = ls[0];
        tape.add_samples(p as u64);

        let mut data = vec![0.0; p * c];
        {
            let feat = self.borrow_data();
            let pts = locs.borrow_data();
            for pi in 0..p {
                let (x, y) = (pts[pi * 2], pts[pi * 2 + 1]);
                let corners = corner_weights(x, y);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &(cx, cy, wgt) in &corners {
                        if let Some(v) = grid_value(&feat, ch, cx, cy, h, w) {
                            acc += wgt * v;
                        }
                    }
                    data[pi * c + ch] = acc;
                }
            }
        }
        let rg = tape.should_record(self.requires_grad() || locs.requires_grad());
        let out = Tensor::result_of(vec![p, c], data, rg);
        if out.requires_grad() {
            let (feat, pts, o) = (self.clone(), locs.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                let fd = feat.borrow_data();
                let pd = pts.borrow_data();
                let mut dfeat = vec![0.0; fd.len()];
                let mut dlocs = vec![0.0; pd.len()];
                for pi in 0..p {
                    let (x, y) = (pd[pi * 2], pd[pi * 2 + 1]);
                    let x0 = x.floor();
                    let y0 = y.floor();
                    let (dx, dy) = (x - x0, y - y0);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    for ch in 0..c {
                        let go = g[pi * c + ch];
                        if go == 0.0 {
                            continue;
                        }
                        let v00 = grid_value(&fd, ch, x0, y0, h, w).unwrap_or(0.0);
                        let v10 = grid_value(&fd, ch, x0 + 1, y0, h, w).unwrap_or(0.0);
                        let v01 = grid_value(&fd, ch, x0, y0 + 1, h, w).unwrap_or(0.0);
                        let v11 = grid_value(&fd, ch, x0 + 1, y0 + 1, h, w).unwrap_or(0.0);
                        dlocs[pi * 2] += go * ((1.0 - dy) * (v10 - v00) + dy * (v11 - v01));
                        dlocs[pi * 2 + 1] += go * ((1.0 - dx) * (v01 - v00) + dx * (v11 - v10));
                        for (cx, cy, wgt) in [
                            (x0, y0, (1.0 - dx) * (1.0 - dy)),
                            (x0 + 1, y0, dx * (1.0 - dy)),
                            (x0, y0 + 1, (1.0 - dx) * dy),
                            (x0 + 1, y0 + 1, dx * dy),
                        ] {
                            if cx >= 0 && (cx as usize) < w && cy >= 0 && (cy as usize) < h {
                                dfeat[(ch * h + cy as usize) * w + cx as usize] += go * wgt;
                            }
                        }
                    }
                }
                drop(fd);
                drop(pd);
                if feat.requires_grad() {
                    feat.accumulate_grad(&dfeat);
                }
                if pts.requires_grad() {
                    pts.accumulate_grad(&dlocs);
                }
            });
        }
        Ok(out)
    }

    /// Single-point convenience wrapper: `loc` is `[2]` (x, y) in pixel
    /// space; returns `[C]`.
    pub fn bilinear_sample(&self, loc: &Tensor, tape: &Tape) -> Result<Tensor> {
        if loc.shape() != [2] {
            return Err(Error::Contract(format!("loc must be [2], got {:?}", loc.shape())));
        }
        let many = self.bilinear_sample_many(&loc.reshape(vec![1, 2], tape)?, tape)?;
        let c = self.shape()[0];
        many.reshape(vec![c], tape)
    }
}

fn corner_weights(x: f64, y: f64) -> [(isize, isize, f64); 4] {
    let x0f = x.floor();
    let y0f = y.floor();
    let (dx, dy) = (x - x0f, y - y0f);
    let (x0, y0) = (x0f as isize, y0f as isize);
    [
        (x0, y0, (1.0 - dx) * (1.0 - dy)),
        (x0 + 1, y0, dx * (1.0 - dy)),
        (x0, y0 + 1, (1.0 - dx) * dy),
        (x0 + 1, y0 + 1, dx * dy),
    ]
}

fn grid_value(data: &[f64], ch: usize, x: isize, y: isize, h: usize, w: usize) -> Option<f64> {
    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
        None
    } else {
        Some(data[(ch * h + y as usize) * w + x as usize])
    }
}
