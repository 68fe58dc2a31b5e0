use super::attention::window_attention;
use super::window::{crop_hw, pad_hw, roll_hw, shifted_window_mask, window_partition, window_reverse};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::tensor::Var;

/// Activations of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockState {
    /// Block input `z^{l-1}`, `[B, L, C]`.
    pub z_prev: Var,
    /// After the attention residual.
    pub z_hat: Var,
    /// Block output `z^l`.
    pub z_out: Var,
    pub spatial: (usize, usize),
}

/// Static shape of a block's attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockGeometry {
    pub num_heads: usize,
    pub window: usize,
    /// Cyclic shift in tokens; 0 for plain windows.
    pub shift: usize,
    pub dropout: f64,
}

impl BlockGeometry {
    /// Geometry of the `index`-th block of a stage running on an `h×w` map.
    /// Odd blocks shift by half a window unless the padded map is a single
    /// window, where a shift would only wrap padding around.
    pub fn for_block(index: usize, num_heads: usize, window: usize, dropout: f64, (h, w): (usize, usize)) -> Self {
        let (hp, wp) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
        let single = hp == window && wp == window;
        BlockGeometry {
            num_heads,
            window,
            shift: if index % 2 == 1 && !single { window / 2 } else { 0 },
            dropout,
        }
    }
}

fn tokens_dims(fw: &Forward<'_>, x: Var, (h, w): (usize, usize)) -> Result<(usize, usize)> {
    match *fw.graph.shape(x) {
        [b, l, c] if l == h * w => Ok((b, c)),
        ref s => Err(Error::Contract(format!("tokens {s:?} do not match a {h}x{w} map"))),
    }
}

/// `ẑ = (S)W-MSA(LN(z)) + z`.
pub fn attention_residual(
    fw: &mut Forward<'_>,
    prefix: &str,
    z_prev: Var,
    spatial: (usize, usize),
    geom: &BlockGeometry,
) -> Result<Var> {
    let (h, w) = spatial;
    let (b, c) = tokens_dims(fw, z_prev, spatial)?;
    let ws = geom.window;
    let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let s = geom.shift as isize;

    let x = fw.layer_norm(&format!("{prefix}.norm1"), z_prev)?;
    let g = &mut fw.graph;
    let x = g.reshape(x, &[b, h, w, c])?;
    let mut x = pad_hw(g, x, hp, wp)?;
    if s > 0 {
        x = roll_hw(g, x, s, s)?;
    }
    let windows = window_partition(g, x, ws)?;
    let mask = (s > 0).then(|| shifted_window_mask(hp, wp, ws, geom.shift));
    let attn = window_attention(fw, &format!("{prefix}.attn"), windows, geom.num_heads, ws, mask.as_ref(), geom.dropout)?;
    let g = &mut fw.graph;
    let mut x = window_reverse(g, attn.out, ws, b, hp, wp)?;
    if s > 0 {
        x = roll_hw(g, x, -s, -s)?;
    }
    let x = crop_hw(g, x, h, w)?;
    let x = g.reshape(x, &[b, h * w, c])?;
    g.add(z_prev, x)
}

/// `MLP(LN(ẑ)) + ẑ` with MLP = linear → GeLU → dropout → linear → dropout.
pub fn mlp_residual(fw: &mut Forward<'_>, prefix: &str, z_hat: Var, dropout: f64) -> Result<Var> {
    let x = fw.layer_norm(&format!("{prefix}.norm2"), z_hat)?;
    let x = fw.linear(&format!("{prefix}.mlp.fc1"), x, true)?;
    let x = fw.graph.gelu(x);
    let x = fw.dropout(x, dropout)?;
    let x = fw.linear(&format!("{prefix}.mlp.fc2"), x, true)?;
    let x = fw.dropout(x, dropout)?;
    fw.graph.add(z_hat, x)
}

/// The unmodified Swin block.
pub fn swin_block_vanilla(
    fw: &mut Forward<'_>,
    prefix: &str,
    z_prev: Var,
    spatial: (usize, usize),
    geom: &BlockGeometry,
) -> Result<BlockState> {
    let z_hat = attention_residual(fw, prefix, z_prev, spatial, geom)?;
    let z_out = mlp_residual(fw, prefix, z_hat, geom.dropout)?;
    Ok(BlockState {
        z_prev,
        z_hat,
        z_out,
        spatial,
    })
}
