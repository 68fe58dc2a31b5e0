//! Token layout transforms for windowed attention.
//!
//! Tokens are stored channel-last, `[B, H, W, C]`, row-major over `(H, W)`.
//! Every transform here is an index map lowered onto [`Graph::gather`], so
//! it is exact and differentiable.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, GATHER_ZERO};

fn dims4(g: &Graph, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::dim(op, format!("expected [B,H,W,C], got {s:?}"))),
    }
}

/// Zero-pads `[B,H,W,C]` at the bottom/right to `[B,hp,wp,C]`.
pub fn pad_hw(g: &mut Graph, x: Var, hp: usize, wp: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x, "pad_hw")?;
    if hp < h || wp < w {
        return Err(Error::Contract(format!("cannot pad {h}x{w} down to {hp}x{wp}")));
    }
    if (hp, wp) == (h, w) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(b * hp * wp * c);
    for bi in 0..b {
        for y in 0..hp {
            for xx in 0..wp {
                for ch in 0..c {
                    index.push(if y < h && xx < w { ((bi * h + y) * w + xx) * c + ch } else { GATHER_ZERO });
                }
            }
        }
    }
    Ok(g.gather(x, vec![b, hp, wp, c], Rc::new(index), "pad"))
}

/// Keeps the top-left `h×w` region of `[B,H',W',C]`.
pub fn crop_hw(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let [b, hp, wp, c] = dims4(g, x, "crop_hw")?;
    if h > hp || w > wp {
        return Err(Error::Contract(format!("cannot crop {hp}x{wp} to {h}x{w}")));
    }
    if (hp, wp) == (h, w) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    index.push(((bi * hp + y) * wp + xx) * c + ch);
                }
            }
        }
    }
    Ok(g.gather(x, vec![b, h, w, c], Rc::new(index), "crop"))
}

/// Cyclic shift: `out[y][x] = in[(y + dy) mod H][(x + dx) mod W]`.
/// A positive offset moves content up/left.
pub fn roll_hw(g: &mut Graph, x: Var, dy: isize, dx: isize) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x, "roll_hw")?;
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let sx = (xx as isize + dx).rem_euclid(w as isize) as usize;
                for ch in 0..c {
                    index.push(((bi * h + sy) * w + sx) * c + ch);
                }
            }
        }
    }
    Ok(g.gather(x, vec![b, h, w, c], Rc::new(index), "roll"))
}

/// Source index (into `[B,H,W,C]`) for each element of the windowed layout
/// `[B·nW, ws·ws, C]`. Windows are ordered row-major per image.
fn partition_index(b: usize, h: usize, w: usize, c: usize, ws: usize) -> Vec<usize> {
    let (nh, nw) = (h / ws, w / ws);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let (y, x) = (wy * ws + iy, wx * ws + ix);
                        for ch in 0..c {
                            index.push(((bi * h + y) * w + x) * c + ch);
                        }
                    }
                }
            }
        }
    }
    index
}

/// `[B,H,W,C]` → `[B·nW, ws·ws, C]`. `H` and `W` must be multiples of `ws`.
pub fn window_partition(g: &mut Graph, x: Var, ws: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x, "window_partition")?;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::Contract(format!(
            "window size {ws} does not tile {h}x{w}; pad before partitioning"
        )));
    }
    let index = partition_index(b, h, w, c, ws);
    let n_win = b * (h / ws) * (w / ws);
    Ok(g.gather(x, vec![n_win, ws * ws, c], Rc::new(index), "window_partition"))
}

/// Inverse of [`window_partition`] for an image grid of `batch × h × w`.
pub fn window_reverse(g: &mut Graph, windows: Var, ws: usize, batch: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(windows).to_vec();
    let c = *s.last().unwrap_or(&0);
    let valid = s.len() == 3
        && ws > 0
        && h.is_multiple_of(ws)
        && w.is_multiple_of(ws)
        && s[1] == ws * ws
        && s[0] == batch * (h / ws) * (w / ws);
    if !valid {
        return Err(Error::Contract(format!(
            "windows {s:?} do not reassemble into {batch}x{h}x{w} with window {ws}"
        )));
    }
    let forward = partition_index(batch, h, w, c, ws);
    let mut index = vec![0; forward.len()];
    for (windowed, &src) in forward.iter().enumerate() {
        index[src] = windowed;
    }
    Ok(g.gather(windows, vec![batch, h, w, c], Rc::new(index), "window_reverse"))
}

/// Region id of every position of an `h×w` map for the shifted-window mask:
/// three bands per axis, `[0, n-ws)`, `[n-ws, n-shift)`, `[n-shift, n)`.
pub fn shift_region_ids(h: usize, w: usize, ws: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    (0..h)
        .flat_map(|y| (0..w).map(move |x| band(y, h) * 3 + band(x, w)))
        .collect()
}

/// Additive attention mask `[nW, N, N]` for a cyclically shifted `h×w` map:
/// 0 where query and key come from the same pre-shift region, −∞ otherwise.
pub fn shifted_window_mask(h: usize, w: usize, ws: usize, shift: usize) -> Tensor {
    let ids = shift_region_ids(h, w, ws, shift);
    let (nh, nw, n) = (h / ws, w / ws, ws * ws);
    let mut data = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let win: Vec<usize> = (0..n)
                .map(|i| ids[(wy * ws + i / ws) * w + wx * ws + i % ws])
                .collect();
            for &qi in &win {
                for &ki in &win {
                    data.push(if qi == ki { 0.0 } else { f64::NEG_INFINITY });
                }
            }
        }
    }
    Tensor::from_parts(vec![nh * nw, n, n], data)
}

/// Index into the `(2ws-1)²` relative-position table for every (query, key)
/// pair of a window, row-major `[N, N]`.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let n = ws * ws;
    let span = 2 * ws - 1;
    let mut index = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = (q / ws, q % ws);
        for k in 0..n {
            let (ky, kx) = (k / ws, k % ws);
            let dy = qy + ws - 1 - ky;
            let dx = qx + ws - 1 - kx;
            index.push(dy * span + dx);
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_window_is_content_preserving() {
        let mut g = Graph::new();
        let t = random(&[1, 4, 4, 3], 1);
        let x = g.constant(t.clone());
        let win = window_partition(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(win), [1, 16, 3]);
        assert_eq!(g.value(win).data(), t.data());
    }

    #[test]
    fn four_windows_in_row_major_order() {
        // 4×4 map holding its own flat index; windows of 2.
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 4, 4, 1], |i| i as f64));
        let win = window_partition(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(win), [4, 4, 1]);
        let want = [
            0.0, 1.0, 4.0, 5.0, // top-left
            2.0, 3.0, 6.0, 7.0, // top-right
            8.0, 9.0, 12.0, 13.0, // bottom-left
            10.0, 11.0, 14.0, 15.0, // bottom-right
        ];
        assert_eq!(g.value(win).data(), want);
    }

    #[test]
    fn partition_rejects_untiled_maps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 5, 4, 1]));
        assert!(matches!(window_partition(&mut g, x, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn round_trip_2x14x14x8_is_bit_identical() {
        let mut g = Graph::new();
        let t = random(&[2, 14, 14, 8], 9);
        let x = g.constant(t.clone());
        let win = window_partition(&mut g, x, 7).unwrap();
        let back = window_reverse(&mut g, win, 7, 2, 14, 14).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn roll_inverts() {
        let mut g = Graph::new();
        let t = random(&[1, 6, 5, 2], 4);
        let x = g.constant(t.clone());
        let r = roll_hw(&mut g, x, -2, 3).unwrap();
        let back = roll_hw(&mut g, r, 2, -3).unwrap();
        assert_eq!(g.value(back), &t);
        // out[0][0] = in[(0-2) mod 6][3]
        assert_eq!(g.value(r).at(&[0, 0, 0, 1]), t.at(&[0, 4, 3, 1]));
    }

    #[test]
    fn relative_index_centre_for_diagonal() {
        let ws = 3;
        let idx = relative_position_index(ws);
        let centre = (ws - 1) * (2 * ws - 1) + (ws - 1);
        for q in 0..ws * ws {
            assert_eq!(idx[q * ws * ws + q], centre);
        }
        assert!(idx.iter().all(|&i| i < (2 * ws - 1) * (2 * ws - 1)));
    }

    #[test]
    fn mask_matches_wraparound_oracle() {
        // Independent oracle: after rolling by `s`, a token at shifted row y
        // came from across the seam iff y + s >= h (same for columns). Two
        // tokens may attend iff they agree on wrap status along both axes.
        for &(h, w, ws, s) in &[(8, 8, 4, 2), (12, 8, 4, 2), (14, 14, 7, 3)] {
            let mask = shifted_window_mask(h, w, ws, s);
            let n = ws * ws;
            for win in 0..(h / ws) * (w / ws) {
                let (wy, wx) = (win / (w / ws), win % (w / ws));
                let wrapped = |i: usize| {
                    let (y, x) = (wy * ws + i / ws, wx * ws + i % ws);
                    (y + s >= h, x + s >= w)
                };
                for q in 0..n {
                    for k in 0..n {
                        let allowed = wrapped(q) == wrapped(k);
                        let m = mask.at(&[win, q, k]);
                        assert_eq!(allowed, m == 0.0, "h={h} w={w} win={win} q={q} k={k}");
                        assert_eq!(!allowed, m == f64::NEG_INFINITY);
                    }
                }
            }
            // Top-left window never straddles a seam.
            assert!((0..n * n).all(|i| mask.data()[i] == 0.0));
        }
    }

    proptest! {
        #[test]
        fn partition_reverse_identity(b in 1usize..3, nh in 1usize..4, nw in 1usize..4, ws in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (nh * ws, nw * ws);
            let mut g = Graph::new();
            let t = random(&[b, h, w, c], seed);
            let x = g.constant(t.clone());
            let win = window_partition(&mut g, x, ws).unwrap();
            let back = window_reverse(&mut g, win, ws, b, h, w).unwrap();
            prop_assert_eq!(g.value(back), &t);
        }

        #[test]
        fn pad_then_crop_identity(h in 1usize..7, w in 1usize..7, ph in 0usize..3, pw in 0usize..3, seed in 0u64..1000) {
            let mut g = Graph::new();
            let t = random(&[1, h, w, 2], seed);
            let x = g.constant(t.clone());
            let p = pad_hw(&mut g, x, h + ph, w + pw).unwrap();
            let c = crop_hw(&mut g, p, h, w).unwrap();
            prop_assert_eq!(g.value(c), &t);
        }
    }
}
