//! Slow reference implementations used to cross-check the fast paths.
//!
//! Everything here is plain scalar loops over `f64` slices: no tensor ops, no
//! autodiff, no shared compute code. Where the fast path reorders algebra for
//! speed (e.g. projecting value maps before sampling), the reference keeps
//! the naive order, so agreement checks the algebra as well as the layout
//! bookkeeping.

use crate::attention::{DeformableAttention, GlobalAttention, ReferencePoints};
use crate::tensor::Tensor;

/// Numerically careful sum (Kahan compensation).
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Max-subtracted softmax of one row.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Bilinear read of all `c` channels of a `[c×h×w]` map at pixel coordinates
/// `(x, y)`; out-of-bounds corners contribute zero.
pub fn bilinear(map: &[f64], c: usize, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let x0 = x.floor();
    let y0 = y.floor();
    let (dx, dy) = (x - x0, y - y0);
    let corners = [
        (x0, y0, (1.0 - dx) * (1.0 - dy)),
        (x0 + 1.0, y0, dx * (1.0 - dy)),
        (x0, y0 + 1.0, (1.0 - dx) * dy),
        (x0 + 1.0, y0 + 1.0, dx * dy),
    ];
    let mut out = vec![0.0; c];
    for (cx, cy, weight) in corners {
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        let (xi, yi) = (cx as usize, cy as usize);
        for (ch, o) in out.iter_mut().enumerate() {
            *o += weight * map[(ch * h + yi) * w + xi];
        }
    }
    out
}

/// `y = x·W (+ b)` for one row, weight layout `[in×out]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; d_out];
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = kahan_sum((0..d_in).map(|i| x[i] * w[i * d_out + o]));
        if let Some(b) = b {
            *yo += b[o];
        }
    }
    y
}

fn weights_of(lin: &crate::nn::Linear) -> (Vec<f64>, Option<Vec<f64>>, usize, usize) {
    (
        lin.weight.to_vec(),
        lin.bias.as_ref().map(|b| b.to_vec()),
        lin.d_in(),
        lin.d_out(),
    )
}

/// Reference global attention: queries from `q_src` (`m` rows of width `d`),
/// keys/values from `kv_src` (`n` rows), using the module's own weights but
/// none of its code. Returns the `[m×d]` output row-major.
pub fn global_attention(attn: &GlobalAttention, q_src: &[f64], m: usize, kv_src: &[f64], n: usize) -> Vec<f64> {
    let (wq, bq, d, _) = weights_of(&attn.w_q);
    let (wk, bk, ..) = weights_of(&attn.w_k);
    let (wv, bv, ..) = weights_of(&attn.w_v);
    let (wo, bo, ..) = weights_of(&attn.w_o);
    let heads = attn.config().n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q: Vec<Vec<f64>> = (0..m)
        .map(|i| affine(&q_src[i * d..(i + 1) * d], &wq, bq.as_deref(), d, d))
        .collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| affine(&kv_src[i * d..(i + 1) * d], &wk, bk.as_deref(), d, d))
        .collect();
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| affine(&kv_src[i * d..(i + 1) * d], &wv, bv.as_deref(), d, d))
        .collect();

    let mut out = vec![0.0; m * d];
    for qi in 0..m {
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = (0..n)
                .map(|ki| {
                    scale * kahan_sum(cols.clone().map(|c| q[qi][c] * k[ki][c]))
                })
                .collect();
            let probs = softmax(&logits);
            for (j, c) in cols.enumerate() {
                concat[c] = kahan_sum((0..n).map(|ki| probs[ki] * v[ki][h * dh + j]));
            }
        }
        let row = affine(&concat, &wo, bo.as_deref(), d, d);
        out[qi * d..(qi + 1) * d].copy_from_slice(&row);
    }
    out
}

/// Reference deformable attention over `levels` (each a `[d×H_l×W_l]` map).
///
/// Sampling order is the naive one — bilinearly read the *raw* map at each
/// deformed point, then apply the head's value-projection block — whereas the
/// fast path projects whole maps before sampling. The two commute because the
/// projection is linear and bias-free.
pub fn deformable_attention(
    attn: &DeformableAttention,
    z: &[f64],
    n: usize,
    refs: &ReferencePoints,
    levels: &[Tensor],
) -> Vec<f64> {
    let cfg = attn.config();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let k_pts = cfg.k_points;
    let n_levels = levels.len();
    let (w_off, b_off, _, off_out) = weights_of(&attn.w_offset);
    let (w_log, b_log, _, log_out) = weights_of(&attn.w_logit);
    let (wv, _, ..) = weights_of(&attn.w_value);
    let (wo, bo, ..) = weights_of(&attn.w_out);
    let maps: Vec<(Vec<f64>, usize, usize)> = levels
        .iter()
        .map(|t| {
            let s = t.shape();
            (t.to_vec(), s[1], s[2])
        })
        .collect();

    let mut out = vec![0.0; n * d];
    for q in 0..n {
        let zq = &z[q * d..(q + 1) * d];
        let offsets = affine(zq, &w_off, b_off.as_deref(), d, off_out);
        let logits = affine(zq, &w_log, b_log.as_deref(), d, log_out);
        let (u, v) = refs.points()[q];
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            // Logit columns are [head][level][point]; softmax runs jointly
            // over every (level, point) pair of this head.
            let row = &logits[h * n_levels * k_pts..(h + 1) * n_levels * k_pts];
            let probs = softmax(row);
            for (l, (map, h_l, w_l)) in maps.iter().enumerate() {
                for kk in 0..k_pts {
                    // Offset columns are [level][head][point][x,y].
                    let col = (((l * heads) + h) * k_pts + kk) * 2;
                    let x = u * *w_l as f64 - 0.5 + offsets[col];
                    let y = v * *h_l as f64 - 0.5 + offsets[col + 1];
                    let sample = bilinear(map, d, *h_l, *w_l, x, y);
                    let value = affine(&sample, &wv, None, d, d);
                    let a = probs[l * k_pts + kk];
                    for j in 0..dh {
                        concat[h * dh + j] += a * value[h * dh + j];
                    }
                }
            }
        }
        let row = affine(&concat, &wo, bo.as_deref(), d, d);
        out[q * d..(q + 1) * d].copy_from_slice(&row);
    }
    out
}

/// Reference feature recalibration: token `i`'s head-`h` slice is scaled by
/// `recal[h][i] · n_total`, where `recal` rows each sum to one.
pub fn recalibrate(tokens: &[f64], n: usize, d: usize, heads: usize, recal: &[f64], n_total: f64) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for h in 0..heads {
            let s = recal[h * n + i] * n_total;
            for j in 0..dh {
                out[i * d + h * dh + j] = tokens[i * d + h * dh + j] * s;
            }
        }
    }
    out
}

/// Reference counting metrics over paired (predicted, true) counts: mean
/// absolute error, root mean squared error, and normalized absolute error
/// averaged over images with a positive true count (`None` when there are
/// none).
pub fn counting_metrics(pred: &[f64], truth: &[f64]) -> (f64, f64, Option<f64>) {
    assert_eq!(pred.len(), truth.len());
    assert!(!pred.is_empty());
    let m = pred.len() as f64;
    let mae = kahan_sum(pred.iter().zip(truth).map(|(p, t)| (p - t).abs())) / m;
    let mse = (kahan_sum(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t))) / m).sqrt();
    let positive: Vec<f64> = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t > 0.0)
        .map(|(p, t)| (p - t).abs() / t)
        .collect();
    let nae = if positive.is_empty() {
        None
    } else {
        Some(kahan_sum(positive.iter().cloned()) / positive.len() as f64)
    };
    (mae, mse, nae)
}

/// Reference grouped 2-D convolution with symmetric zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for oc in 0..c_out {
        let g = oc / cog;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..cig {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let iv = input[((g * cig + ic) * h + iy as usize) * w + ix as usize];
                            let wv = weight[((oc * cig + ic) * kh + ky) * kw + kx];
                            acc += iv * wv;
                        }
                    }
                }
                out[(oc * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    out
}

/// Reference layer normalization of `n` rows of width `d`.
pub fn layer_norm(rows: &[f64], n: usize, d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &rows[i * d..(i + 1) * d];
        let mean = kahan_sum(row.iter().cloned()) / d as f64;
        let var = kahan_sum(row.iter().map(|&x| (x - mean) * (x - mean))) / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}
