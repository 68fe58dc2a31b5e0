use std::rc::Rc;

use rand::Rng;

use super::kernels::{mm, mm_nt, mm_tn};
use super::{strides, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index sentinel for [`Graph::gather`]: the output element is zero.
pub const GATHER_ZERO: usize = usize::MAX;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())))
    }
}

/// Checks that `b` broadcasts against `a` as a trailing suffix and returns
/// the suffix length in elements.
fn suffix_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (ra, rb) = (a.rank(), b.rank());
    if rb > ra || a.shape()[ra - rb..] != *b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} is not a trailing suffix of {:?}", b.shape(), a.shape()),
        ));
    }
    Ok(b.numel())
}

/// Linear interpolation taps for resizing a 1-D axis of length `input` to
/// `output` with half-pixel centres (align-corners = false). Each output
/// position reads `(lo, hi, frac)` meaning `(1-frac)·x[lo] + frac·x[hi]`.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
        );
        Ok(self.record("add", out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let out = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect(),
        );
        Ok(self.record("sub", out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        same_shape("mul", &av, &bv)?;
        let out = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
        );
        Ok(self.record("mul", out, &[a, b], move |g, need| {
            let prod = |other: &Tensor| {
                Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect(),
                )
            };
            vec![need[0].then(|| prod(&bv)), need[1].then(|| prod(&av))]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record("scale", out, &[a], move |g, _| vec![Some(g.map(|x| x * factor))])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let inner = suffix_len("add_bcast", av, bv)?;
        let bd = bv.data();
        let data = av
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let bshape = bv.shape().to_vec();
        Ok(self.record("add_bcast", out, &[a, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; inner];
                for row in g.data().chunks(inner) {
                    for (s, x) in acc.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                Tensor::from_parts(bshape.clone(), acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// `a ⊗ b` where `b`'s shape is a trailing suffix of `a`'s (per-channel scale).
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let inner = suffix_len("mul_bcast", &av, &bv)?;
        let data = av
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(x, y)| x * y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.record("mul_bcast", out, &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let data = g
                    .data()
                    .chunks(inner)
                    .flat_map(|row| row.iter().zip(bv.data()).map(|(x, y)| x * y))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            });
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; inner];
                for (grow, arow) in g.data().chunks(inner).zip(av.data().chunks(inner)) {
                    for ((s, x), y) in acc.iter_mut().zip(grow).zip(arow) {
                        *s += x * y;
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), acc)
            });
            vec![ga, gb]
        }))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value_rc(a), self.value_rc(s));
        if sv.numel() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar operand has shape {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let out = av.map(|x| x * k);
        Ok(self.record("mul_scalar", out, &[a, s], move |g, need| {
            let ga = need[0].then(|| g.map(|x| x * k));
            let gs = need[1].then(|| {
                let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                Tensor::from_parts(sv.shape().to_vec(), vec![dot])
            });
            vec![ga, gs]
        }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, &[a], move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Batched matrix product. `b` either has the same leading batch axes
    /// as `a` or is a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let (ra, rb) = (av.rank(), bv.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::dim(
                "matmul",
                format!("operands must be at least 2-D, got {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
        let (kb, n) = (bv.shape()[rb - 2], bv.shape()[rb - 1]);
        let batch_a = &av.shape()[..ra - 2];
        let batch_b = &bv.shape()[..rb - 2];
        if k != kb || !(batch_b.is_empty() || batch_a == batch_b) {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let shared = batch_b.is_empty();
        let batches: usize = batch_a.iter().product();
        let mut c = vec![0.0; batches * m * n];
        if shared {
            mm(av.data(), bv.data(), &mut c, batches * m, k, n);
        } else {
            for bi in 0..batches {
                mm(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &bv.data()[bi * k * n..(bi + 1) * k * n],
                    &mut c[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = Tensor::from_parts(out_shape, c);
        Ok(self.record("matmul", out, &[a, b], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut da = vec![0.0; av.numel()];
                if shared {
                    mm_nt(gd, bv.data(), &mut da, batches * m, n, k);
                } else {
                    for bi in 0..batches {
                        mm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                Tensor::from_parts(av.shape().to_vec(), da)
            });
            let gb = need[1].then(|| {
                let mut db = vec![0.0; bv.numel()];
                if shared {
                    mm_tn(av.data(), gd, &mut db, k, batches * m, n);
                } else {
                    for bi in 0..batches {
                        mm_tn(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), db)
            });
            vec![ga, gb]
        }))
    }

    /// `x · w + b` over the last axis, with `w` laid out `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = av.reshaped(shape.to_vec())?;
        let in_shape = av.shape().to_vec();
        Ok(self.record("reshape", out, &[a], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// Every layout op (permute, pad, roll, window partition) lowers to this.
    pub fn gather(&mut self, a: Var, out_shape: Vec<usize>, index: Rc<Vec<usize>>, op: &'static str) -> Var {
        let av = self.value(a);
        debug_assert_eq!(out_shape.iter().product::<usize>(), index.len());
        let src = av.data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let in_shape = av.shape().to_vec();
        let n_in = av.numel();
        let out = Tensor::from_parts(out_shape, data);
        self.record(op, out, &[a], move |g, _| {
            let mut da = vec![0.0; n_in];
            for (&i, &gi) in index.iter().zip(g.data()) {
                if i != GATHER_ZERO {
                    da[i] += gi;
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), da))]
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let index = strided_index(&out_shape, &src_strides, 0);
        Ok(self.gather(a, out_shape, Rc::new(index), "permute"))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let in_strides = strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let index = strided_index(&out_shape, &in_strides, start * in_strides[axis]);
        Ok(self.gather(a, out_shape, Rc::new(index), "narrow"))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} does not fit {base:?} along axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let in_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.record("concat", out, parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                if need[i] {
                    let mut d = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let row = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[row..row + w * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(in_shapes[i].clone(), d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }))
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    /// Keys at −∞ receive exactly zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().expect("softmax on rank-0 tensor");
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let y = Rc::new(Tensor::from_parts(av.shape().to_vec(), data));
        let y_saved = Rc::clone(&y);
        self.record("softmax", (*y).clone(), &[a], move |g, _| {
            let mut dx = vec![0.0; g.numel()];
            for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.data().chunks(n)).zip(y_saved.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = yi * (gi - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        })
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value_rc(x), self.value_rc(gamma), self.value_rc(beta));
        let c = *xv.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!("affine shapes {:?}/{:?} vs channels {c}", gv.shape(), bv.shape()),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.record("layer_norm", out, &[x, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                let mut dh = vec![0.0; c];
                for r in 0..rows {
                    let grow = &gd[r * c..(r + 1) * c];
                    let hrow = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dh[j] = grow[j] * gv.data()[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                Tensor::from_parts(xv.shape().to_vec(), dx)
            });
            let ggamma = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        acc[j] += grow[j] * hrow[j];
                    }
                }
                Tensor::from_parts(vec![c], acc)
            });
            let gbeta = need[2].then(|| {
                let mut acc = vec![0.0; c];
                for grow in gd.chunks(c) {
                    for j in 0..c {
                        acc[j] += grow[j];
                    }
                }
                Tensor::from_parts(vec![c], acc)
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Gaussian error linear unit, exact erf form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let out = xv.map(|v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)));
        self.record("gelu", out, &[x], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(gi, &v)| {
                    let cdf = 0.5 * (1.0 + erf(v * INV_SQRT_2));
                    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                    gi * (cdf + v * pdf)
                })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x`
    /// itself and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.record("dropout", out, &[x], move |g, _| {
            let data = g.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }))
    }

    /// Per-channel k×k convolution (cross-correlation) with zero padding
    /// `(k-1)/2`, so spatial size is preserved.
    /// Shapes: x `[B,C,H,W]`, w `[C,1,k,k]`, bias `[C]`.
    pub fn conv2d_depthwise(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        let bv = self.value(bias);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::dim(
                "conv2d_depthwise",
                format!("expected 4-D input and filter, got {:?} and {:?}", xv.shape(), wv.shape()),
            ));
        }
        let [b, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let k = wv.shape()[2];
        if k % 2 == 0 || wv.shape()[3] != k {
            return Err(Error::Config(format!("depthwise kernel must be square and odd, got {:?}", wv.shape())));
        }
        if wv.shape()[0] != c || wv.shape()[1] != 1 || bv.shape() != [c] {
            return Err(Error::dim(
                "conv2d_depthwise",
                format!("input {:?}, filter {:?}, bias {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let pad = (k / 2) as isize;
        let (hi, wi) = (h as isize, wd as isize);
        let plane = h * wd;
        // Visits every (output pixel, tap) pair that lands inside the input.
        let taps = move |mut f: Box<dyn FnMut(usize, usize, usize) + '_>| {
            for bc in 0..b * c {
                let ch = bc % c;
                for i in 0..hi {
                    for j in 0..wi {
                        let o = bc * plane + (i * wi + j) as usize;
                        for u in 0..k as isize {
                            let y = i + u - pad;
                            if y < 0 || y >= hi {
                                continue;
                            }
                            for v in 0..k as isize {
                                let xx = j + v - pad;
                                if xx < 0 || xx >= wi {
                                    continue;
                                }
                                let src = bc * plane + (y * wi + xx) as usize;
                                let widx = ch * k * k + (u * k as isize + v) as usize;
                                f(o, src, widx);
                            }
                        }
                    }
                }
            }
        };
        let mut out = vec![0.0; xv.numel()];
        for (bc, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|o| *o = bv.data()[bc % c]);
        }
        {
            let (xd, wdat) = (xv.data(), wv.data());
            taps(Box::new(|o, src, widx| out[o] += wdat[widx] * xd[src]));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.record("conv2d_depthwise", out, &[x, w, bias], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dx = vec![0.0; xv.numel()];
                let wdat = wv.data();
                taps(Box::new(|o, src, widx| dx[src] += gd[o] * wdat[widx]));
                Tensor::from_parts(xv.shape().to_vec(), dx)
            });
            let gw = need[1].then(|| {
                let mut dw = vec![0.0; wv.numel()];
                let xd = xv.data();
                taps(Box::new(|o, src, widx| dw[widx] += gd[o] * xd[src]));
                Tensor::from_parts(wv.shape().to_vec(), dw)
            });
            let gb = need[2].then(|| {
                let mut db = vec![0.0; c];
                for (bc, chunk) in gd.chunks(plane).enumerate() {
                    db[bc % c] += chunk.iter().sum::<f64>();
                }
                Tensor::from_parts(vec![c], db)
            });
            vec![gx, gw, gb]
        }))
    }

    /// 1×1 convolution: a per-pixel linear map across channels.
    /// Shapes: x `[B,Cin,H,W]`, w `[Cout,Cin,1,1]`, bias `[Cout]`.
    pub fn conv2d_pointwise(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        let bv = self.value(bias);
        if xv.rank() != 4 || wv.rank() != 4 || wv.shape()[2..] != [1, 1] {
            return Err(Error::dim(
                "conv2d_pointwise",
                format!("expected [B,C,H,W] input and [O,C,1,1] filter, got {:?} and {:?}", xv.shape(), wv.shape()),
            ));
        }
        let [b, cin, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let cout = wv.shape()[0];
        if wv.shape()[1] != cin || bv.shape() != [cout] {
            return Err(Error::dim(
                "conv2d_pointwise",
                format!("input {:?}, filter {:?}, bias {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let hw = h * wd;
        let mut out = vec![0.0; b * cout * hw];
        for bi in 0..b {
            let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            for (o, row) in ob.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bv.data()[o]);
            }
            mm(wv.data(), &xv.data()[bi * cin * hw..(bi + 1) * cin * hw], ob, cout, cin, hw);
        }
        let out = Tensor::from_parts(vec![b, cout, h, wd], out);
        Ok(self.record("conv2d_pointwise", out, &[x, w, bias], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut dx = vec![0.0; xv.numel()];
                for bi in 0..b {
                    mm_tn(
                        wv.data(),
                        &gd[bi * cout * hw..(bi + 1) * cout * hw],
                        &mut dx[bi * cin * hw..(bi + 1) * cin * hw],
                        cin,
                        cout,
                        hw,
                    );
                }
                Tensor::from_parts(xv.shape().to_vec(), dx)
            });
            let gw = need[1].then(|| {
                let mut dw = vec![0.0; wv.numel()];
                for bi in 0..b {
                    mm_nt(
                        &gd[bi * cout * hw..(bi + 1) * cout * hw],
                        &xv.data()[bi * cin * hw..(bi + 1) * cin * hw],
                        &mut dw,
                        cout,
                        hw,
                        cin,
                    );
                }
                Tensor::from_parts(wv.shape().to_vec(), dw)
            });
            let gb = need[2].then(|| {
                let mut db = vec![0.0; cout];
                for (i, row) in gd.chunks(hw).enumerate() {
                    db[i % cout] += row.iter().sum::<f64>();
                }
                Tensor::from_parts(vec![cout], db)
            });
            vec![gx, gw, gb]
        }))
    }

    /// Bilinear resize of `[B,C,H,W]` to `[B,C,size.0,size.1]`, half-pixel
    /// centres (align-corners = false).
    pub fn resize_bilinear(&mut self, x: Var, size: (usize, usize)) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || size.0 == 0 || size.1 == 0 {
            return Err(Error::dim(
                "resize_bilinear",
                format!("input {:?} to size {size:?}", xv.shape()),
            ));
        }
        let [b, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (oh, ow) = size;
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let ry = bilinear_weights(h, oh);
        let rx = bilinear_weights(w, ow);
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        let xd = xv.data();
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (i, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (j, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                    let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                    out[p * oh * ow + i * ow + j] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
        let in_shape = xv.shape().to_vec();
        let out = Tensor::from_parts(vec![b, c, oh, ow], out);
        Ok(self.record("resize_bilinear", out, &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (i, &(y0, y1, fy)) in ry.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in rx.iter().enumerate() {
                        let gij = gd[p * oh * ow + i * ow + j];
                        dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gij;
                        dst[y0 * w + x1] += (1.0 - fy) * fx * gij;
                        dst[y1 * w + x0] += fy * (1.0 - fx) * gij;
                        dst[y1 * w + x1] += fy * fx * gij;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }

    /// Mean pixel-wise cross-entropy of `[B,K,H,W]` logits against class ids
    /// laid out `[B,H,W]`. Pixels equal to `ignore_index` are skipped; if every
    /// pixel is ignored the loss is 0 with a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u32], ignore_index: u32) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 4 {
            return Err(Error::dim("cross_entropy", format!("logits must be [B,K,H,W], got {:?}", lv.shape())));
        }
        let [b, k, h, w] = [lv.shape()[0], lv.shape()[1], lv.shape()[2], lv.shape()[3]];
        let hw = h * w;
        if target.len() != b * hw {
            return Err(Error::dim(
                "cross_entropy",
                format!("target has {} pixels, logits {:?}", target.len(), lv.shape()),
            ));
        }
        let ld = lv.data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for bi in 0..b {
            for px in 0..hw {
                let t = target[bi * hw + px];
                if t == ignore_index {
                    continue;
                }
                if t as usize >= k {
                    return Err(Error::Data(format!(
                        "class id {t} at pixel (batch {bi}, row {}, col {}) outside [0, {k})",
                        px / w,
                        px % w
                    )));
                }
                let at = |c: usize| bi * k * hw + c * hw + px;
                let max = (0..k).map(|c| ld[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (ld[at(c)] - max).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (ld[at(c)] - max).exp() / z;
                }
                total += z.ln() + max - ld[at(t as usize)];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let target = target.to_vec();
        let shape = lv.shape().to_vec();
        Ok(self.record("cross_entropy", Tensor::scalar(loss), &[logits], move |g, _| {
            let mut d = vec![0.0; probs.len()];
            if count > 0 {
                let scale = g.data()[0] / count as f64;
                for bi in 0..b {
                    for px in 0..hw {
                        let t = target[bi * hw + px];
                        if t == ignore_index {
                            continue;
                        }
                        for c in 0..k {
                            let idx = bi * k * hw + c * hw + px;
                            let onehot = if c == t as usize { 1.0 } else { 0.0 };
                            d[idx] = scale * (probs[idx] - onehot);
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }
}

/// Flat source indices for walking `out_shape` with the given source strides.
fn strided_index(out_shape: &[usize], src_strides: &[usize], base: usize) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut off = base;
    for _ in 0..n {
        index.push(off);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            off += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}
