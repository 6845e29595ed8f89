//! Primitive differentiable operations.
//!
//! Every op computes its output eagerly and, when the tape is recording and
//! any input tracks gradients, pushes an adjoint closure. Closures capture
//! tensor handles (cheap `Rc` clones) and read values lazily at replay time;
//! values are never mutated between a forward pass and its backward pass.
//!
//! Broadcasting is limited to two deliberate cases: an operand whose shape is
//! a trailing suffix of the other's, and one-element (scalar) operands. All
//! other shape mixing is rejected.

use super::{axis_lanes, Tape, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Validates the broadcast relation and returns the cycle length of each
/// operand (its element count) together with the output shape.
fn broadcast_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok((sa.to_vec(), a.numel(), a.numel()));
    }
    let suffix = |big: &[usize], small: &[usize]| small.len() <= big.len() && big[big.len() - small.len()..] == *small;
    if b.numel() == 1 || suffix(sa, sb) {
        Ok((sa.to_vec(), a.numel(), b.numel()))
    } else if a.numel() == 1 || suffix(sb, sa) {
        Ok((sb.to_vec(), a.numel(), b.numel()))
    } else {
        Err(Error::shape(op, sa, sb))
    }
}

impl Tensor {
    fn binary_requires(&self, other: &Tensor, tape: &Tape) -> bool {
        tape.should_record(self.requires_grad() || other.requires_grad())
    }

    pub fn add(&self, other: &Tensor, tape: &Tape) -> Result<Tensor> {
        let (shape, ca, cb) = broadcast_pair("add", self, other)?;
        let numel: usize = shape.iter().product();
        let out = {
            let a = self.borrow_data();
            let b = other.borrow_data();
            let data = (0..numel).map(|i| a[i % ca] + b[i % cb]).collect();
            Tensor::result_of(shape, data, self.binary_requires(other, tape))
        };
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), other.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                if a.requires_grad() {
                    a.accumulate_grad(&fold_cycles(&g, a.numel()));
                }
                if b.requires_grad() {
                    b.accumulate_grad(&fold_cycles(&g, b.numel()));
                }
            });
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor, tape: &Tape) -> Result<Tensor> {
        let (shape, ca, cb) = broadcast_pair("sub", self, other)?;
        let numel: usize = shape.iter().product();
        let out = {
            let a = self.borrow_data();
            let b = other.borrow_data();
            let data = (0..numel).map(|i| a[i % ca] - b[i % cb]).collect();
            Tensor::result_of(shape, data, self.binary_requires(other, tape))
        };
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), other.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                if a.requires_grad() {
                    a.accumulate_grad(&fold_cycles(&g, a.numel()));
                }
                if b.requires_grad() {
                    let mut neg = fold_cycles(&g, b.numel());
                    neg.iter_mut().for_each(|v| *v = -*v);
                    b.accumulate_grad(&neg);
                }
            });
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Tensor, tape: &Tape) -> Result<Tensor> {
        let (shape, ca, cb) = broadcast_pair("mul", self, other)?;
        let numel: usize = shape.iter().product();
        let out = {
            let a = self.borrow_data();
            let b = other.borrow_data();
            let data = (0..numel).map(|i| a[i % ca] * b[i % cb]).collect();
            Tensor::result_of(shape, data, self.binary_requires(other, tape))
        };
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), other.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                let (da, db) = {
                    let ad = a.borrow_data();
                    let bd = b.borrow_data();
                    let mut da = vec![0.0; ca];
                    let mut db = vec![0.0; cb];
                    for (i, gi) in g.iter().enumerate() {
                        da[i % ca] += gi * bd[i % cb];
                        db[i % cb] += gi * ad[i % ca];
                    }
                    (da, db)
                };
                if a.requires_grad() {
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    pub fn scalar_mul(&self, c: f64, tape: &Tape) -> Result<Tensor> {
        let data = self.borrow_data().iter().map(|v| v * c).collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    pub fn scalar_add(&self, c: f64, tape: &Tape) -> Result<Tensor> {
        let data = self.borrow_data().iter().map(|v| v + c).collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    x.accumulate_grad(&g);
                }
            });
        }
        Ok(out)
    }

    pub fn neg(&self, tape: &Tape) -> Result<Tensor> {
        self.scalar_mul(-1.0, tape)
    }

    /// 2-D matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor, tape: &Tape) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let a = self.borrow_data();
            let b = other.borrow_data();
            for i in 0..m {
                for kk in 0..k {
                    let aik = a[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * n..(kk + 1) * n];
                    let orow = &mut data[i * n..(i + 1) * n];
                    for (oj, bj) in orow.iter_mut().zip(brow) {
                        *oj += aik * bj;
                    }
                }
            }
        }
        let out = Tensor::result_of(vec![m, n], data, self.binary_requires(other, tape));
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), other.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                if a.requires_grad() {
                    // da = g · bᵀ
                    let bd = b.borrow_data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[kk * n + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    drop(bd);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // db = aᵀ · g
                    let ad = a.borrow_data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = ad[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for (dj, gj) in drow.iter_mut().zip(grow) {
                                *dj += aik * gj;
                            }
                        }
                    }
                    drop(ad);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    pub fn transpose2d(&self, tape: &Tape) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("transpose2d expects rank 2, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.borrow_data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        let out = Tensor::result_of(vec![n, m], data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[j * m + i];
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>, tape: &Tape) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", self.shape(), &shape));
        }
        let out = Tensor::result_of(shape, self.to_vec(), tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    x.accumulate_grad(&g);
                }
            });
        }
        Ok(out)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize, tape: &Tape) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Contract(format!("concat axis {} out of range for rank {}", axis, rank)));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::shape("concat", first.shape(), p.shape()));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_lanes(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let src = p.borrow_data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let rg = tape.should_record(parts.iter().any(Tensor::requires_grad));
        let out = Tensor::result_of(shape, data, rg);
        if out.requires_grad() {
            let parts: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                let mut offset = 0;
                for p in &parts {
                    let len = p.shape()[axis];
                    if p.requires_grad() {
                        let mut dp = vec![0.0; p.numel()];
                        for o_i in 0..outer {
                            let src_base = (o_i * axis_total + offset) * inner;
                            let dst_base = o_i * len * inner;
                            dp[dst_base..dst_base + len * inner]
                                .copy_from_slice(&g[src_base..src_base + len * inner]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += len;
                }
            });
        }
        Ok(out)
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize, tape: &Tape) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow [{}, {}+{}] out of bounds for shape {:?}",
                axis, start, len, shape
            )));
        }
        let (outer, full, inner) = axis_lanes(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let src = self.borrow_data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        drop(src);
        let out = Tensor::result_of(out_shape, data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let mut dx = vec![0.0; x.numel()];
                    for o_i in 0..outer {
                        let dst_base = (o_i * full + start) * inner;
                        let src_base = o_i * len * inner;
                        dx[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g[src_base..src_base + len * inner]);
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    pub fn relu(&self, tape: &Tape) -> Result<Tensor> {
        let data = self.borrow_data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let xd = x.borrow_data();
                    let dx: Vec<f64> = g.iter().zip(xd.iter()).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Tanh-form GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self, tape: &Tape) -> Result<Tensor> {
        let data = self.borrow_data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let xd = x.borrow_data();
                    let dx: Vec<f64> = g.iter().zip(xd.iter()).map(|(gi, &xi)| gi * gelu_grad_scalar(xi)).collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&self, tape: &Tape) -> Result<Tensor> {
        let data = self
            .borrow_data()
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let xd = x.borrow_data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(gi, &xi)| gi / (1.0 + (-xi).exp()))
                        .collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    pub fn abs(&self, tape: &Tape) -> Result<Tensor> {
        let data = self.borrow_data().iter().map(|v| v.abs()).collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let xd = x.borrow_data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(gi, &xi)| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax_axis(&self, axis: usize, tape: &Tape) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = axis_lanes(shape, axis);
        let src = self.borrow_data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(src[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - m).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[idx(j)] /= z;
                }
            }
        }
        drop(src);
        let out = Tensor::result_of(shape.to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                let p = o.borrow_data();
                let mut dx = vec![0.0; p.len()];
                for o_i in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o_i * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[idx(j)] * p[idx(j)];
                        }
                        for j in 0..len {
                            dx[idx(j)] = p[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                drop(p);
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self, tape: &Tape) -> Result<Tensor> {
        let total: f64 = self.borrow_data().iter().sum();
        let out = Tensor::result_of(Vec::new(), vec![total], tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    x.accumulate_grad(&vec![g[0]; x.numel()]);
                }
            });
        }
        Ok(out)
    }

    pub fn mean_all(&self, tape: &Tape) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all(tape)?.scalar_mul(1.0 / n, tape)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize, tape: &Tape) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("sum axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = axis_lanes(shape, axis);
        let src = self.borrow_data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        drop(src);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::result_of(out_shape, data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let mut dx = vec![0.0; x.numel()];
                    for o_i in 0..outer {
                        for j in 0..len {
                            let base = (o_i * len + j) * inner;
                            for i in 0..inner {
                                dx[base + i] = g[o_i * inner + i];
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    pub fn mean_axis(&self, axis: usize, tape: &Tape) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Contract(format!("mean axis {} out of range for {:?}", axis, self.shape())))?;
        self.sum_axis(axis, tape)?.scalar_mul(1.0 / len as f64, tape)
    }

    /// Repeats each element of the last axis `k` times consecutively:
    /// `[..., n] -> [..., n·k]`.
    pub fn repeat_interleave_last(&self, k: usize, tape: &Tape) -> Result<Tensor> {
        if self.shape().is_empty() || k == 0 {
            return Err(Error::Contract("repeat_interleave_last needs rank ≥ 1 and k ≥ 1".into()));
        }
        let src = self.borrow_data();
        let mut data = Vec::with_capacity(src.len() * k);
        for &v in src.iter() {
            data.extend(std::iter::repeat(v).take(k));
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() *= k;
        let out = Tensor::result_of(shape, data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let dx: Vec<f64> = g.chunks(k).map(|c| c.iter().sum()).collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64, tape: &Tape) -> Result<Tensor> {
        let shape = self.shape();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on rank-0 tensor".into()))?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape("layer_norm", shape, gamma.shape()));
        }
        let rows = self.numel() / n;
        let src = self.borrow_data();
        let gm = gamma.borrow_data();
        let bt = beta.borrow_data();
        let mut data = vec![0.0; src.len()];
        let mut inv_sigma = vec![0.0; rows];
        let mut xhat = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for j in 0..n {
                let h = (row[j] - mu) * inv;
                xhat[r * n + j] = h;
                data[r * n + j] = gm[j] * h + bt[j];
            }
        }
        drop(src);
        drop(gm);
        drop(bt);
        let rg = tape.should_record(self.requires_grad() || gamma.requires_grad() || beta.requires_grad());
        let out = Tensor::result_of(shape.to_vec(), data, rg);
        if out.requires_grad() {
            let (x, gma, bta, o) = (self.clone(), gamma.clone(), beta.clone(), out.clone());
            tape.record(&out, move || {
                let g = match o.grad_clone() {
                    Some(g) => g,
                    None => return,
                };
                if bta.requires_grad() {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    bta.accumulate_grad(&db);
                }
                if gma.requires_grad() {
                    let mut dg = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    gma.accumulate_grad(&dg);
                }
                if x.requires_grad() {
                    let gm = gma.borrow_data();
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for j in 0..n {
                            let gg = g[r * n + j] * gm[j];
                            mean_gg += gg;
                            mean_ggx += gg * xhat[r * n + j];
                        }
                        mean_gg /= n as f64;
                        mean_ggx /= n as f64;
                        for j in 0..n {
                            let gg = g[r * n + j] * gm[j];
                            dx[r * n + j] = (gg - mean_gg - xhat[r * n + j] * mean_ggx) * inv_sigma[r];
                        }
                    }
                    drop(gm);
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Row lookup: gathers `indices` rows of a `[V×d]` table into `[n×d]`.
    pub fn embedding_lookup(table: &Tensor, indices: &[usize], tape: &Tape) -> Result<Tensor> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::Contract(format!("embedding table must be rank 2, got {:?}", shape)));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("embedding index {} out of range {}", bad, v)));
        }
        let src = table.borrow_data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let out = Tensor::result_of(vec![indices.len(), d], data, tape.should_record(table.requires_grad()));
        if out.requires_grad() {
            let (t, o) = (table.clone(), out.clone());
            let indices = indices.to_vec();
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let mut dt = vec![0.0; t.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                    t.accumulate_grad(&dt);
                }
            });
        }
        Ok(out)
    }

    /// Inverted dropout. Identity when the tape is not recording or the rate
    /// is zero; a recording tape needs an attached RNG for rate > 0.
    pub fn dropout(&self, rate: f64, tape: &Tape) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", rate)));
        }
        if rate == 0.0 || !tape.is_recording() {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| {
                tape.next_uniform()
                    .map(|u| if u < keep { 1.0 / keep } else { 0.0 })
                    .ok_or(())
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Contract("dropout with rate > 0 requires a tape RNG".into()))?;
        let data = self
            .borrow_data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::result_of(self.shape().to_vec(), data, tape.should_record(self.requires_grad()));
        if out.requires_grad() {
            let (x, o) = (self.clone(), out.clone());
            tape.record(&out, move || {
                if let Some(g) = o.grad_clone() {
                    let dx: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }
}

/// Sums a gradient over broadcast cycles back down to an operand of
/// `cycle` elements.
fn fold_cycles(g: &[f64], cycle: usize) -> Vec<f64> {
    if g.len() == cycle {
        return g.to_vec();
    }
    let mut folded = vec![0.0; cycle];
    for (i, gi) in g.iter().enumerate() {
        folded[i % cycle] += gi;
    }
    folded
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::inference();
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]);
        let out = eye.matmul(&b, &tape).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let tape = Tape::inference();
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let b = t(vec![2, 1], vec![3.0, 4.0]);
        let out = a.matmul(&b, &tape).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let tape = Tape::inference();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        let err = a.matmul(&b, &tape).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::inference();
        let out = t(vec![2], vec![0.0, 0.0]).softmax_axis(0, &tape).unwrap();
        assert_eq!(out.to_vec(), vec![0.5, 0.5]);

        let big = t(vec![3], vec![1000.0, 1000.0, 1000.0]).softmax_axis(0, &tape).unwrap();
        for v in big.to_vec() {
            assert!(v.is_finite());
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_computation() {
        let tape = Tape::inference();
        let out = t(vec![3], vec![1.0, 2.0, 3.0]).softmax_axis(0, &tape).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, x) in out.to_vec().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - x.exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let tape = Tape::inference();
        let x = t(vec![2, 3], vec![0.1, -4.0, 2.2, 7.0, 7.0, -1.0]);
        let p = x.softmax_axis(1, &tape).unwrap();
        let d = p.to_vec();
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn broadcast_add_bias_row() {
        let tape = Tape::inference();
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(vec![3], vec![10.0, 20.0, 30.0]);
        let out = x.add(&b, &tape).unwrap();
        assert_eq!(out.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let tape = Tape::inference();
        let x = t(vec![2, 3], vec![0.0; 6]);
        let y = t(vec![2], vec![0.0; 2]);
        assert!(x.add(&y, &tape).is_err());
    }

    #[test]
    fn broadcast_grad_folds_to_bias() {
        let tape = Tape::new();
        let x = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![3], vec![0.0; 3]).requiring_grad();
        let y = x.add(&b, &tape).unwrap().sum_all(&tape).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn reshape_transpose_round_trip() {
        let tape = Tape::inference();
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rt = x
            .reshape(vec![3, 2], &tape)
            .unwrap()
            .reshape(vec![2, 3], &tape)
            .unwrap();
        assert_eq!(rt.to_vec(), x.to_vec());
        let tt = x.transpose2d(&tape).unwrap().transpose2d(&tape).unwrap();
        assert_eq!(tt.to_vec(), x.to_vec());
        assert_eq!(tt.shape(), x.shape());
    }

    #[test]
    fn concat_narrow_round_trip() {
        let tape = Tape::inference();
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 1], vec![5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b], 1, &tape).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.narrow(1, 0, 2, &tape).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn sum_axis_middle() {
        let tape = Tape::inference();
        let x = t(vec![2, 2, 2], (1..=8).map(f64::from).collect());
        let s = x.sum_axis(1, &tape).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.to_vec(), vec![4.0, 6.0, 12.0, 14.0]);
    }

    #[test]
    fn repeat_interleave_groups() {
        let tape = Tape::new();
        let x = t(vec![3], vec![1.0, 2.0, 3.0]).requiring_grad();
        let r = x.repeat_interleave_last(2, &tape).unwrap();
        assert_eq!(r.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let weights = t(vec![6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = r.mul(&weights, &tape).unwrap().sum_all(&tape).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 7.0, 11.0]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::inference();
        let x = t(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 3.0, 10.0]);
        let gamma = Tensor::ones(vec![4]);
        let beta = Tensor::zeros(vec![4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5, &tape).unwrap();
        let d = y.to_vec();
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let tape = Tape::new();
        let table = t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requiring_grad();
        let rows = Tensor::embedding_lookup(&table, &[2, 0, 2], &tape).unwrap();
        assert_eq!(rows.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let y = rows.sum_all(&tape).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let tape = Tape::inference();
        let y = Tensor::scalar(0.0).softplus(&tape).unwrap();
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_closed_form() {
        let tape = Tape::inference();
        let xs = vec![-2.0, -0.5, 0.0, 0.3, 1.0, 2.5];
        let y = t(vec![6], xs.clone()).gelu(&tape).unwrap();
        for (got, x) in y.to_vec().iter().zip(&xs) {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let want = 0.5 * x * (1.0 + u.tanh());
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(y.get(2), 0.0);
    }

    #[test]
    fn dropout_identity_in_inference() {
        let tape = Tape::inference();
        let x = t(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.dropout(0.5, &tape).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_requires_rng_when_active() {
        let tape = Tape::new();
        let x = t(vec![4], vec![1.0; 4]);
        assert!(x.dropout(0.5, &tape).is_err());
    }

    #[test]
    fn dropout_preserves_expectation_scale() {
        use rand::SeedableRng;
        let tape = Tape::new().with_rng(rand_chacha::ChaCha8Rng::seed_from_u64(11));
        let x = t(vec![10_000], vec![1.0; 10_000]);
        let y = x.dropout(0.25, &tape).unwrap();
        let mean: f64 = y.to_vec().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "inverted dropout mean {mean}");
    }
}
