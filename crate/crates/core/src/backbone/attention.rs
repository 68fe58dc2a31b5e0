use std::rc::Rc;

use super::window::relative_position_index;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::tensor::{Tensor, Var};

pub struct AttentionOutput {
    /// `[B', N, C]`, same shape as the input windows.
    pub out: Var,
    /// Post-softmax weights `[B', heads, N, N]`.
    pub weights: Var,
}

/// Multi-head self-attention inside each window.
///
/// `x` is `[B·nW, N, C]` with `N = ws²`. A learned relative-position bias is
/// added to the logits; `mask` (`[nW, N, N]`, 0 / −∞) restricts attention
/// after a cyclic shift. Parameters live under `prefix`: `qkv`, `proj` and
/// `relative_position_bias_table`.
pub fn window_attention(
    fw: &mut Forward<'_>,
    prefix: &str,
    x: Var,
    num_heads: usize,
    ws: usize,
    mask: Option<&Tensor>,
    dropout_p: f64,
) -> Result<AttentionOutput> {
    let [bw, n, c] = match *fw.graph.shape(x) {
        [a, b, c] => [a, b, c],
        ref s => return Err(Error::dim("window_attention", format!("expected [B',N,C], got {s:?}"))),
    };
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::Config(format!("{num_heads} heads do not divide {c} channels")));
    }
    if n != ws * ws {
        return Err(Error::dim("window_attention", format!("{n} tokens per window, expected {}", ws * ws)));
    }
    let hd = c / num_heads;
    let g = &mut fw.graph;

    let qkv = {
        let w = fw.binding.var(&format!("{prefix}.qkv.weight"))?;
        let b = fw.binding.var(&format!("{prefix}.qkv.bias"))?;
        g.linear(x, w, Some(b))?
    };
    let qkv = g.reshape(qkv, &[bw, n, 3, num_heads, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B', heads, N, hd]
    let split = |g: &mut crate::tensor::Graph, i: usize| -> Result<Var> {
        let t = g.narrow(qkv, 0, i, 1)?;
        g.reshape(t, &[bw, num_heads, n, hd])
    };
    let q = split(g, 0)?;
    let k = split(g, 1)?;
    let v = split(g, 2)?;

    let q = g.scale(q, (hd as f64).powf(-0.5));
    let kt = g.permute(k, &[0, 1, 3, 2])?;
    let mut logits = g.matmul(q, kt)?; // [B', heads, N, N]

    let table = fw.binding.var(&format!("{prefix}.relative_position_bias_table"))?;
    let table_shape = g.shape(table).to_vec();
    if table_shape != [(2 * ws - 1) * (2 * ws - 1), num_heads] {
        return Err(Error::dim(
            "window_attention",
            format!("bias table {table_shape:?} for window {ws} and {num_heads} heads"),
        ));
    }
    let rpi = relative_position_index(ws);
    let mut index = Vec::with_capacity(num_heads * n * n);
    for h in 0..num_heads {
        index.extend(rpi.iter().map(|&r| r * num_heads + h));
    }
    let bias = g.gather(table, vec![num_heads, n, n], Rc::new(index), "relative_position_bias");
    logits = g.add_bcast(logits, bias)?;

    if let Some(mask) = mask {
        let n_win = mask.shape()[0];
        if mask.shape() != [n_win, n, n] || bw % n_win != 0 {
            return Err(Error::dim(
                "window_attention",
                format!("mask {:?} for {bw} windows of {n} tokens", mask.shape()),
            ));
        }
        // Broadcast the per-window mask over heads, then over images.
        let mut data = Vec::with_capacity(n_win * num_heads * n * n);
        for win in mask.data().chunks(n * n) {
            for _ in 0..num_heads {
                data.extend_from_slice(win);
            }
        }
        let m = g.constant(Tensor::from_parts(vec![n_win, num_heads, n, n], data));
        let l5 = g.reshape(logits, &[bw / n_win, n_win, num_heads, n, n])?;
        let l5 = g.add_bcast(l5, m)?;
        logits = g.reshape(l5, &[bw, num_heads, n, n])?;
    }

    let weights = g.softmax(logits);
    let ctx = g.matmul(weights, v)?; // [B', heads, N, hd]
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[bw, n, c])?;
    let out = fw.linear(&format!("{prefix}.proj"), ctx, true)?;
    let out = fw.dropout(out, dropout_p)?;
    Ok(AttentionOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Component, ParamStore};
    use crate::seeded_rng;
    use rand::Rng;

    fn random(rng: &mut crate::SeededRng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn store(c: usize, heads: usize, ws: usize, seed: u64, zero_qk: bool) -> ParamStore {
        let mut rng = seeded_rng(seed);
        let mut qkv_w = random(&mut rng, &[c, 3 * c]);
        let mut qkv_b = random(&mut rng, &[3 * c]);
        if zero_qk {
            for r in 0..c {
                qkv_w.data_mut()[r * 3 * c..r * 3 * c + 2 * c].fill(0.0);
            }
            qkv_b.data_mut()[..2 * c].fill(0.0);
        }
        let span = 2 * ws - 1;
        let table = if zero_qk { Tensor::zeros([span * span, heads]) } else { random(&mut rng, &[span * span, heads]) };
        let mut s = ParamStore::new();
        let bb = Component::Backbone;
        s.insert("a.qkv.weight", qkv_w, bb, false).unwrap();
        s.insert("a.qkv.bias", qkv_b, bb, false).unwrap();
        s.insert("a.relative_position_bias_table", table, bb, false).unwrap();
        s.insert("a.proj.weight", random(&mut rng, &[c, c]), bb, false).unwrap();
        s.insert("a.proj.bias", random(&mut rng, &[c]), bb, false).unwrap();
        s
    }

    /// Dense per-window attention with explicit loops.
    fn oracle(s: &ParamStore, x: &Tensor, heads: usize, ws: usize) -> Vec<f64> {
        let [bw, n, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let hd = c / heads;
        let t = |name: &str| s.tensor(name).unwrap().clone();
        let (qw, qb, table, pw, pb) =
            (t("a.qkv.weight"), t("a.qkv.bias"), t("a.relative_position_bias_table"), t("a.proj.weight"), t("a.proj.bias"));
        let span = 2 * ws - 1;
        let mut out = vec![0.0; bw * n * c];
        for w in 0..bw {
            let row = |i: usize| &x.data()[(w * n + i) * c..(w * n + i + 1) * c];
            let proj = |i: usize, o: usize| qb.data()[o] + (0..c).map(|k| row(i)[k] * qw.at(&[k, o])).sum::<f64>();
            let mut ctx = vec![0.0; n * c];
            for h in 0..heads {
                for i in 0..n {
                    let (yi, xi) = ((i / ws) as isize, (i % ws) as isize);
                    let logits: Vec<f64> = (0..n)
                        .map(|j| {
                            let (yj, xj) = ((j / ws) as isize, (j % ws) as isize);
                            let rel = ((yi - yj + ws as isize - 1) as usize) * span + (xi - xj + ws as isize - 1) as usize;
                            let dot: f64 = (0..hd).map(|d| proj(i, h * hd + d) * proj(j, c + h * hd + d)).sum();
                            dot / (hd as f64).sqrt() + table.at(&[rel, h])
                        })
                        .collect();
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..hd {
                        ctx[i * c + h * hd + d] = (0..n).map(|j| e[j] / z * proj(j, 2 * c + h * hd + d)).sum();
                    }
                }
            }
            for i in 0..n {
                for o in 0..c {
                    out[(w * n + i) * c + o] = pb.data()[o] + (0..c).map(|k| ctx[i * c + k] * pw.at(&[k, o])).sum::<f64>();
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_oracle() {
        let (c, heads, ws) = (8, 2, 3);
        let s = store(c, heads, ws, 1, false);
        let x = random(&mut seeded_rng(2), &[3, ws * ws, c]);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let xv = fw.graph.constant(x.clone());
        let a = window_attention(&mut fw, "a", xv, heads, ws, None, 0.0).unwrap();
        let want = oracle(&s, &x, heads, ws);
        let got = fw.graph.value(a.out).data();
        assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-10));
        for row in fw.graph.value(a.weights).data().chunks(ws * ws) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_window_returns_projected_values() {
        let c = 4;
        let s = store(c, 2, 1, 3, false);
        let x = random(&mut seeded_rng(4), &[5, 1, c]);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let xv = fw.graph.constant(x.clone());
        let a = window_attention(&mut fw, "a", xv, 2, 1, None, 0.0).unwrap();
        assert!(fw.graph.value(a.weights).data().iter().all(|&w| w == 1.0));
        let (qw, qb) = (s.tensor("a.qkv.weight").unwrap(), s.tensor("a.qkv.bias").unwrap());
        let (pw, pb) = (s.tensor("a.proj.weight").unwrap(), s.tensor("a.proj.bias").unwrap());
        for w in 0..5 {
            let v: Vec<f64> = (0..c)
                .map(|o| qb.data()[2 * c + o] + (0..c).map(|k| x.at(&[w, 0, k]) * qw.at(&[k, 2 * c + o])).sum::<f64>())
                .collect();
            for o in 0..c {
                let want = pb.data()[o] + (0..c).map(|k| v[k] * pw.at(&[k, o])).sum::<f64>();
                assert!((fw.graph.value(a.out).at(&[w, 0, o]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_spread_evenly_over_unmasked_keys() {
        let (c, ws) = (4, 2);
        let s = store(c, 1, ws, 5, true);
        let x = random(&mut seeded_rng(6), &[2, 4, c]);
        let mut mask = Tensor::zeros([2, 4, 4]);
        // Second window: key 3 hidden from everyone.
        for q in 0..4 {
            mask.data_mut()[16 + q * 4 + 3] = f64::NEG_INFINITY;
        }
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let xv = fw.graph.constant(x);
        let a = window_attention(&mut fw, "a", xv, 1, ws, Some(&mask), 0.0).unwrap();
        let w = fw.graph.value(a.weights).data();
        assert!(w[..16].iter().all(|&p| (p - 0.25).abs() < 1e-15));
        for row in w[16..].chunks(4) {
            assert!(row[..3].iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
            assert!(row[3] < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let s = store(6, 4, 2, 7, false);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let xv = fw.graph.constant(Tensor::zeros([1, 4, 6]));
        assert!(matches!(window_attention(&mut fw, "a", xv, 4, 2, None, 0.0), Err(Error::Config(_))));
    }
}
