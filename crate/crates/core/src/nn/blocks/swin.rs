//! Shifted-window attention: window partition/merge, cyclic shifts, the
//! shifted-window mask, relative position bias, and the stage driver with
//! patch merging.

use super::super::init::{Init, ParamBuilder};
use super::super::layers::{LayerNorm, Linear, Mlp};
use super::super::tensor::{Elem, NnError, NnResult, Tensor};
use super::attention::MultiHeadAttention;

/// (B, H, W, C) -> (B·nH·nW, window², C); exact inverse of [`window_merge`].
pub fn window_partition<E: Elem>(x: &Tensor<E>, window: usize) -> NnResult<Tensor<E>> {
    let (b, h, w, c) = match x.shape() {
        [b, h, w, c] => (*b, *h, *w, *c),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "window_partition expects (B,H,W,C), got {other:?}"
            )))
        }
    };
    if h % window != 0 || w % window != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "spatial dims {h}x{w} not divisible by window {window}"
        )));
    }
    x.reshape(&[b, h / window, window, w / window, window, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * (h / window) * (w / window), window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_merge<E: Elem>(
    windows: &Tensor<E>,
    window: usize,
    h: usize,
    w: usize,
) -> NnResult<Tensor<E>> {
    let (bn, n, c) = match windows.shape() {
        [bn, n, c] => (*bn, *n, *c),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "window_merge expects (B·nW, win², C), got {other:?}"
            )))
        }
    };
    if n != window * window {
        return Err(NnError::ShapeMismatch(format!(
            "window_merge token count {n} != window² {}",
            window * window
        )));
    }
    let per_image = (h / window) * (w / window);
    let b = bn / per_image;
    windows
        .reshape(&[b, h / window, w / window, window, window, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Cyclic shift rolling content up-left by `shift`; inverse is
/// [`cyclic_unshift`].
pub fn cyclic_shift<E: Elem>(x: &Tensor<E>, shift: usize) -> NnResult<Tensor<E>> {
    x.roll(1, -(shift as i64))?.roll(2, -(shift as i64))
}

pub fn cyclic_unshift<E: Elem>(x: &Tensor<E>, shift: usize) -> NnResult<Tensor<E>> {
    x.roll(1, shift as i64)?.roll(2, shift as i64)
}

/// Additive attention mask for shifted windows: tokens from different
/// pre-shift regions must not attend to each other. Shape (nW, win², win²)
/// with 0 for allowed pairs and a large negative value otherwise.
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    // The slice layout is expressed in post-shift coordinates: wrapped-in
    // content occupies the last `shift` rows/cols, the seam sits at
    // `len - window`.
    let mut region = vec![0i32; h * w];
    let bounds = |len: usize| [0..len - window, len - window..len - shift, len - shift..len];
    let mut id = 0;
    for hs in bounds(h) {
        for ws in bounds(w) {
            for y in hs.clone() {
                for x in ws.clone() {
                    region[y * w + x] = id;
                }
            }
            id += 1;
        }
    }
    let (nh, nw) = (h / window, w / window);
    let n = window * window;
    let mut mask = vec![0.0f64; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let win_idx = wy * nw + wx;
            let mut ids = Vec::with_capacity(n);
            for iy in 0..window {
                for ix in 0..window {
                    ids.push(region[(wy * window + iy) * w + wx * window + ix]);
                }
            }
            for a in 0..n {
                for b in 0..n {
                    if ids[a] != ids[b] {
                        mask[(win_idx * n + a) * n + b] = -1e9;
                    }
                }
            }
        }
    }
    mask
}

/// Relative position bias table indexed by pairwise window offsets.
pub struct RelativePositionBias<E: Elem> {
    pub table: Tensor<E>, // ((2w-1)², heads)
    index: Vec<usize>,    // win² · win²
    window: usize,
    heads: usize,
}

impl<E: Elem> RelativePositionBias<E> {
    pub fn new(b: &mut ParamBuilder<E>, window: usize, heads: usize) -> Self {
        let span = 2 * window - 1;
        let table = b.param(&[span * span, heads], Init::TruncNormal(0.02));
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for a in 0..n {
            let (ay, ax) = (a / window, a % window);
            for bb in 0..n {
                let (by, bx) = (bb / window, bb % window);
                let dy = ay as i64 - by as i64 + (window as i64 - 1);
                let dx = ax as i64 - bx as i64 + (window as i64 - 1);
                index.push((dy * span as i64 + dx) as usize);
            }
        }
        RelativePositionBias {
            table,
            index,
            window,
            heads,
        }
    }

    /// Bias tensor shaped (heads, win², win²) for broadcast into scores.
    pub fn bias(&self) -> NnResult<Tensor<E>> {
        let n = self.window * self.window;
        self.table
            .gather_rows(&self.index)? // (n², heads)
            .reshape(&[n, n, self.heads])?
            .permute(&[2, 0, 1])
    }
}

/// One windowed-attention transformer block, optionally with cyclic shift.
pub struct SwinBlock<E: Elem> {
    norm1: LayerNorm<E>,
    attn: MultiHeadAttention<E>,
    rel_pos: RelativePositionBias<E>,
    norm2: LayerNorm<E>,
    mlp: Mlp<E>,
    window: usize,
    shift: usize,
}

impl<E: Elem> SwinBlock<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_hidden: usize,
    ) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(b, dim),
            attn: MultiHeadAttention::new(b, dim, heads),
            rel_pos: RelativePositionBias::new(b, window, heads),
            norm2: LayerNorm::new(b, dim),
            mlp: Mlp::new(b, dim, mlp_hidden),
            window,
            shift,
        }
    }

    /// Attention score entries per token equal window², independent of the
    /// feature-map size: the linear-complexity property of windowing.
    pub fn scores_per_token(&self) -> usize {
        self.window * self.window
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (b, h, w, c) = match x.shape() {
            [b, h, w, c] => (*b, *h, *w, *c),
            other => {
                return Err(NnError::ShapeMismatch(format!(
                    "swin block expects (B,H,W,C), got {other:?}"
                )))
            }
        };
        let win = self.window;
        let n = win * win;
        let shortcut = x.clone();
        let mut t = self.norm1.forward(x)?;
        if self.shift > 0 {
            t = cyclic_shift(&t, self.shift)?;
        }
        let windows = window_partition(&t, win)?; // (B·nW, n, C)
        let n_windows = (h / win) * (w / win);

        // Combine relative position bias with the shift mask, expanded to the
        // windowed batch: (B·nW, heads, n, n).
        let bias = self.rel_pos.bias()?; // (heads, n, n)
        let extra = if self.shift > 0 {
            let mask = shifted_window_mask(h, w, win, self.shift);
            let mask_e: Vec<E> = mask.iter().map(|&v| E::from_f64(v)).collect();
            let mask_t = Tensor::constant(&[n_windows, 1, n, n], mask_e);
            // Tile over images: (B·nW, 1, n, n)
            let tiled = Tensor::concat(&vec![mask_t; b], 0)?;
            tiled.add(&bias)?
        } else {
            Tensor::zeros(&[1, 1, n, n]).add(&bias)?
        };
        let attn_out = self.attn.forward(&windows, Some(&extra))?;

        let mut merged = window_merge(&attn_out, win, h, w)?;
        if self.shift > 0 {
            merged = cyclic_unshift(&merged, self.shift)?;
        }
        let x = shortcut.add(&merged)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        x.add(&y.reshape(&[b, h, w, c])?)
    }
}

/// Concatenates 2x2 neighborhoods and projects 4C -> 2C.
pub struct PatchMerging<E: Elem> {
    norm: LayerNorm<E>,
    reduce: Linear<E>,
}

impl<E: Elem> PatchMerging<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(b, 4 * dim),
            reduce: Linear::new(b, 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (b, h, w, c) = match x.shape() {
            [b, h, w, c] => (*b, *h, *w, *c),
            other => {
                return Err(NnError::ShapeMismatch(format!(
                    "patch merging expects (B,H,W,C), got {other:?}"
                )))
            }
        };
        let grouped = x
            .reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, h / 2, w / 2, 4 * c])?;
        self.reduce.forward(&self.norm.forward(&grouped)?)
    }
}

/// A stack of alternating regular/shifted window blocks with optional
/// patch-merging downsample at the end.
pub struct SwinStage<E: Elem> {
    pub blocks: Vec<SwinBlock<E>>,
    pub downsample: Option<PatchMerging<E>>,
}

impl<E: Elem> SwinStage<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        downsample: bool,
    ) -> Self {
        SwinStage {
            blocks: (0..depth)
                .map(|i| {
                    let shift = if i % 2 == 1 { window / 2 } else { 0 };
                    SwinBlock::new(b, dim, heads, window, shift, dim * mlp_ratio)
                })
                .collect(),
            downsample: downsample.then(|| PatchMerging::new(b, dim)),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let mut t = x.clone();
        for block in &self.blocks {
            t = block.forward(&t)?;
        }
        match &self.downsample {
            Some(merge) => merge.forward(&t),
            None => Ok(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spatial(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = crate::seed::rng(seed, &["swin-fixture"]);
        let data: Vec<f64> = (0..b * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::constant(&[b, h, w, c], data)
    }

    #[test]
    fn partition_merge_round_trip() {
        let x = spatial(2, 8, 8, 3, 1);
        let windows = window_partition(&x, 4).unwrap();
        assert_eq!(windows.shape(), &[2 * 4, 16, 3]);
        let back = window_merge(&windows, 4, 8, 8).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn shift_unshift_round_trip() {
        let x = spatial(1, 8, 8, 2, 2);
        let back = cyclic_unshift(&cyclic_shift(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn mask_matches_reference_4x4_window2_shift1() {
        let mask = shifted_window_mask(4, 4, 2, 1);
        let blocked: Vec<bool> = mask.iter().map(|&v| v != 0.0).collect();
        #[rustfmt::skip]
        let expect = [
            // top-left window: one region
            false, false, false, false,
            false, false, false, false,
            false, false, false, false,
            false, false, false, false,
            // top-right: columns alternate regions
            false, true, false, true,
            true, false, true, false,
            false, true, false, true,
            true, false, true, false,
            // bottom-left: rows alternate regions
            false, false, true, true,
            false, false, true, true,
            true, true, false, false,
            true, true, false, false,
            // bottom-right: all four corners distinct
            false, true, true, true,
            true, false, true, true,
            true, true, false, true,
            true, true, true, false,
        ];
        assert_eq!(blocked, expect);
    }

    #[test]
    fn stage_shapes_and_downsample() {
        let mut b = ParamBuilder::<f64>::new(3, &["swin-stage"]);
        let stage = SwinStage::new(&mut b, 8, 2, 2, 4, 2, true);
        let x = spatial(1, 8, 8, 8, 3);
        let y = stage.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 16]);
        assert_eq!(stage.blocks[0].scores_per_token(), 16);
        assert_eq!(stage.blocks[1].shift, 2);
    }
}
