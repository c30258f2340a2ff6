//! Cost-volume encoder: per-source-pixel cost maps are patchified by three
//! stride-2 convolutions, summarized into K latent tokens by cross-attention
//! against learned codewords, then refined by alternating attention layers —
//! self-attention across each pixel's tokens, followed by spatial attention
//! across pixels (windowed-local, then tile-pooled global), conditioned on
//! context features. Output is the cost memory `[H*W, K, D]`.
//!
//! The masked variant multiplies a mask-pyramid level into each conv input
//! and drops tokens the coarsest level marks hidden, so masked entries can
//! never reach the memory; with all-ones masks it reproduces the standard
//! forward bitwise.

use rand::Rng;

use crate::config::ModelConfig;
use crate::layers::{normal, scaled_dot_attention, Conv2d, Ffn, LayerNorm, Linear, Mha};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{DType, Result, Tensor, TensorError};

/// Visible-token selection per source pixel: `idx` holds `m` row indices for
/// each of the `B` pixels, flattened pixel-major.
pub struct TokenVisibility {
    pub idx: Vec<usize>,
    pub m: usize,
}

/// Mask-pyramid levels shaped for the patchify stack, plus the visible-token
/// selection derived from the coarsest level. All tensors are `[B, 1, h, w]`
/// 0/1 constants matching each stage's input resolution.
pub struct MaskMaps {
    pub b0: Tensor,
    pub b1: Tensor,
    pub b2: Tensor,
    pub visible: TokenVisibility,
}

struct InterStage {
    norm: LayerNorm,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    o_proj: Linear,
    ffn_norm: LayerNorm,
    ffn: Ffn,
}

impl InterStage {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        dc: usize,
    ) -> Result<InterStage> {
        Ok(InterStage {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            q_proj: Linear::new(store, rng, &format!("{name}.q"), d + dc, d, true)?,
            k_proj: Linear::new(store, rng, &format!("{name}.k"), d + dc, d, true)?,
            v_proj: Linear::new(store, rng, &format!("{name}.v"), d, d, true)?,
            o_proj: Linear::new(store, rng, &format!("{name}.out"), d, d, true)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), d, 4 * d, d)?,
        })
    }
}

struct AgtLayer {
    intra_norm: LayerNorm,
    intra_attn: Mha,
    intra_ffn_norm: LayerNorm,
    intra_ffn: Ffn,
    local: InterStage,
    global: InterStage,
}

pub struct CostEncoder {
    patch_convs: Vec<Conv2d>,
    key_proj: Linear,
    val_proj: Linear,
    codewords: ParamId,
    null_token: ParamId,
    layers: Vec<AgtLayer>,
    dp: usize,
    k: usize,
    d: usize,
    dc: usize,
    heads: usize,
    window: usize,
    /// Positional signal on patch tokens entering summarization.
    pub pe_tokenization: bool,
    /// Positional signal added to tokens before each spatial stage.
    pub pe_spatial: bool,
}

impl CostEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<CostEncoder> {
        let (dp, k, d, dc) = (cfg.patch_dim, cfg.codewords, cfg.latent_dim, cfg.ctx_dim);
        let dims = [1, dp / 4, dp / 2, dp];
        let mut patch_convs = Vec::new();
        for i in 0..3 {
            patch_convs.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.patch{i}"),
                dims[i],
                dims[i + 1],
                3,
                2,
                1,
            )?);
        }
        let key_proj = Linear::new(store, rng, &format!("{name}.key"), 2 * dp, d, true)?;
        let val_proj = Linear::new(store, rng, &format!("{name}.value"), 2 * dp, d, true)?;
        let codewords = store.register(
            format!("{name}.codewords"),
            normal(rng, 0.0, 0.02, k * d),
            &[k, d],
            true,
        )?;
        let null_token = store.register(
            format!("{name}.null_token"),
            normal(rng, 0.0, 0.02, 2 * dp),
            &[2 * dp],
            true,
        )?;
        let mut layers = Vec::new();
        for l in 0..cfg.agt_layers {
            let ln = format!("{name}.agt{l}");
            layers.push(AgtLayer {
                intra_norm: LayerNorm::new(store, &format!("{ln}.intra_norm"), d)?,
                intra_attn: Mha::new(store, rng, &format!("{ln}.intra"), d, cfg.heads)?,
                intra_ffn_norm: LayerNorm::new(store, &format!("{ln}.intra_ffn_norm"), d)?,
                intra_ffn: Ffn::new(store, rng, &format!("{ln}.intra_ffn"), d, 4 * d, d)?,
                local: InterStage::new(store, rng, &format!("{ln}.local"), d, dc)?,
                global: InterStage::new(store, rng, &format!("{ln}.global"), d, dc)?,
            });
        }
        Ok(CostEncoder {
            patch_convs,
            key_proj,
            val_proj,
            codewords,
            null_token,
            layers,
            dp,
            k,
            d,
            dc,
            heads: cfg.heads,
            window: cfg.window,
            pe_tokenization: true,
            pe_spatial: true,
        })
    }

    pub fn codeword_count(&self) -> usize {
        self.k
    }

    pub fn token_dim(&self) -> usize {
        self.d
    }

    /// Three conv+relu stages over padded cost maps `[B, 1, H8, W8]`,
    /// optionally multiplying a mask level into each stage's input.
    /// Returns patch features `[B, Dp, H8/8, W8/8]`.
    pub fn patchify(&self, fw: &Forward, maps: &Tensor, masks: Option<&MaskMaps>) -> Result<Tensor> {
        let s = maps.shape().to_vec();
        if maps.rank() != 4 || s[1] != 1 || s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(TensorError::Shape(format!(
                "patchify expects [B,1,H8,W8] with multiples of 8, got {s:?}"
            )));
        }
        let mut x = maps.clone();
        for (i, conv) in self.patch_convs.iter().enumerate() {
            if let Some(mm) = masks {
                let level = match i {
                    0 => &mm.b0,
                    1 => &mm.b1,
                    _ => &mm.b2,
                };
                x = x.mul(level)?;
            }
            x = conv.apply(fw, &x)?.relu()?;
        }
        Ok(x)
    }

    /// Patch-grid coordinates in token order, as `[n, 2]` (x, y).
    fn patch_points(ph: usize, pw: usize, dtype: DType) -> Tensor {
        let mut pts = Vec::with_capacity(ph * pw * 2);
        for py in 0..ph {
            for px in 0..pw {
                pts.push(px as f64);
                pts.push(py as f64);
            }
        }
        Tensor::new(pts, &[ph * pw, 2], dtype).expect("static shape")
    }

    /// Cross-attention of learned codewords over patch tokens (+ positional
    /// signal), per source pixel: `[B, n, Dp]` -> `[B, K, D]`. With zero
    /// visible tokens the learned null token stands in as the only key.
    pub fn summarize(
        &self,
        fw: &Forward,
        tokens: &Tensor,
        grid: (usize, usize),
        visible: Option<&TokenVisibility>,
    ) -> Result<Tensor> {
        let (b, n, dp) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        if dp != self.dp || grid.0 * grid.1 != n {
            return Err(TensorError::Shape(format!(
                "summarize tokens {:?} disagree with grid {grid:?} / Dp {}",
                tokens.shape(),
                self.dp
            )));
        }
        let pe = if self.pe_tokenization {
            Self::patch_points(grid.0, grid.1, tokens.dtype()).sincos_pe(dp)?
        } else {
            Tensor::zeros(&[n, dp], tokens.dtype())
        };
        let pe_b = pe.reshape(&[1, n, dp])?.broadcast_to(&[b, n, dp])?;
        let mut cat = Tensor::concat(2, &[tokens, &pe_b])?; // [B, n, 2Dp]
        if let Some(vis) = visible {
            if vis.m == 0 {
                cat = fw
                    .param(self.null_token)
                    .reshape(&[1, 1, 2 * dp])?
                    .broadcast_to(&[b, 1, 2 * dp])?;
            } else {
                cat = cat.gather_rows(&vis.idx, vis.m)?;
            }
        }
        let keys = self.key_proj.apply(fw, &cat)?;
        let vals = self.val_proj.apply(fw, &cat)?;
        let q = fw.param(self.codewords).reshape(&[1, self.k, self.d])?;
        scaled_dot_attention(&q, &keys, &vals, self.heads, None)
    }

    /// Self-attention + FFN over each pixel's K tokens: `[B, K, D]` in/out.
    fn intra(&self, fw: &Forward, layer: &AgtLayer, x: &Tensor) -> Result<Tensor> {
        let xn = layer.intra_norm.apply(fw, x)?;
        let x = x.add(&layer.intra_attn.apply(fw, &xn, &xn, None)?)?;
        let xn = layer.intra_ffn_norm.apply(fw, &x)?;
        x.add(&layer.intra_ffn.apply(fw, &xn)?)
    }

    /// Reshapes a zero-padded field `[K, Hp, Wp, C]` into window tiles
    /// `[K*nT, w*w, C]`.
    fn partition(x: &Tensor, w: usize) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let (k, hp, wp, c) = (s[0], s[1], s[2], s[3]);
        let (nh, nw) = (hp / w, wp / w);
        x.reshape(&[k, nh, w, nw, w, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[k * nh * nw, w * w, c])
    }

    fn unpartition(x: &Tensor, k: usize, hp: usize, wp: usize, w: usize) -> Result<Tensor> {
        let (nh, nw) = (hp / w, wp / w);
        let c = x.shape()[2];
        x.reshape(&[k, nh, nw, w, w, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[k, hp, wp, c])
    }

    /// Zero-pads a `[K, H, W, C]` field on the bottom/right so both spatial
    /// sides are multiples of the window.
    fn pad_field(x: &Tensor, w: usize) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let (ph, pw) = (s[1].next_multiple_of(w), s[2].next_multiple_of(w));
        if ph == s[1] && pw == s[2] {
            return Ok(x.clone());
        }
        x.pad(&[(0, 0), (0, ph - s[1]), (0, pw - s[2]), (0, 0)])
    }

    /// Count of real (non-padded) cells in each window tile, row-major.
    fn tile_counts(h: usize, w: usize, win: usize) -> Vec<usize> {
        let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
        let mut counts = Vec::with_capacity(nh * nw);
        for ty in 0..nh {
            for tx in 0..nw {
                let rows = (h - ty * win).min(win);
                let cols = (w - tx * win).min(win);
                counts.push(rows * cols);
            }
        }
        counts
    }

    /// Additive score bias hiding padded tile cells: `[K*nT, 1, 1, w*w]`.
    fn pad_bias(k: usize, h: usize, w: usize, win: usize, dtype: DType) -> Tensor {
        let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
        let nt = nh * nw;
        let mut data = Vec::with_capacity(k * nt * win * win);
        for _ in 0..k {
            for ty in 0..nh {
                for tx in 0..nw {
                    for iy in 0..win {
                        for ix in 0..win {
                            let real = ty * win + iy < h && tx * win + ix < w;
                            data.push(if real { 0.0 } else { -1e30 });
                        }
                    }
                }
            }
        }
        Tensor::new(data, &[k * nt, 1, 1, win * win], dtype).expect("static shape")
    }

    /// Masked mean over tile cells: `[K*nT, w*w, C]` -> `[K, nT, C]`.
    fn pool_tiles(tiles: &Tensor, k: usize, counts: &[usize]) -> Result<Tensor> {
        let (bt, _, c) = (tiles.shape()[0], tiles.shape()[1], tiles.shape()[2]);
        let nt = bt / k;
        let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
        let mut inv_data = Vec::with_capacity(bt);
        for _ in 0..k {
            inv_data.extend_from_slice(&inv);
        }
        let inv_t = Tensor::new(inv_data, &[bt, 1], tiles.dtype())?;
        tiles
            .sum_axes(&[1], false)? // [K*nT, C]
            .mul(&inv_t)?
            .reshape(&[k, nt, c])
    }

    /// One spatial attention sub-stage over token fields `[K, H*W, D]` with
    /// per-pixel context `[K, H*W, Dc]`.
    fn spatial_stage(
        &self,
        fw: &Forward,
        st: &InterStage,
        x: &Tensor,
        ctx_full: &Tensor,
        ctx_tiles: &Tensor,
        ctx_pooled: &Tensor,
        grid: (usize, usize),
        global: bool,
    ) -> Result<Tensor> {
        let (h, w) = grid;
        let (k, _, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let win = self.window;
        let (hp, wp) = (h.next_multiple_of(win), w.next_multiple_of(win));
        let padded = hp != h || wp != w;
        let counts = Self::tile_counts(h, w, win);

        let xn = st.norm.apply(fw, x)?;
        let xn_field = Self::pad_field(&xn.reshape(&[k, h, w, d])?, win)?;
        let xn_tiles = Self::partition(&xn_field, win)?; // [K*nT, w*w, D]

        let attn = if global {
            let pooled = Self::pool_tiles(&xn_tiles, k, &counts)?; // [K, nT, D]
            let q = st.q_proj.apply(fw, &Tensor::concat(2, &[&xn, ctx_full])?)?;
            let kk = st.k_proj.apply(fw, &Tensor::concat(2, &[&pooled, ctx_pooled])?)?;
            let v = st.v_proj.apply(fw, &pooled)?;
            scaled_dot_attention(&q, &kk, &v, self.heads, None)? // [K, HW, D]
        } else {
            let qk_in = Tensor::concat(2, &[&xn_tiles, ctx_tiles])?;
            let q = st.q_proj.apply(fw, &qk_in)?;
            let kk = st.k_proj.apply(fw, &qk_in)?;
            let v = st.v_proj.apply(fw, &xn_tiles)?;
            let bias = padded.then(|| Self::pad_bias(k, h, w, win, x.dtype()));
            let a = scaled_dot_attention(&q, &kk, &v, self.heads, bias.as_ref())?;
            Self::unpartition(&a, k, hp, wp, win)?
                .slice(1, 0, h)?
                .slice(2, 0, w)?
                .reshape(&[k, h * w, d])?
        };
        let x = x.add(&st.o_proj.apply(fw, &attn)?)?;
        let xn = st.ffn_norm.apply(fw, &x)?;
        x.add(&st.ffn.apply(fw, &xn)?)
    }

    /// Runs the per-pixel self-attention block of layer `idx` on its own:
    /// `[B, K, D]` in/out. Exposed so verification can compare the block
    /// against an independent oracle.
    pub(crate) fn intra_stage(&self, fw: &Forward, idx: usize, x: &Tensor) -> Result<Tensor> {
        self.intra(fw, &self.layers[idx], x)
    }

    /// Runs one spatial attention sub-stage of layer `idx` on its own:
    /// token fields `[K, H*W, D]` with per-pixel context `[H*W, Dc]`.
    /// Exposed so verification can compare the stage against an oracle.
    pub(crate) fn inter_stage(
        &self,
        fw: &Forward,
        idx: usize,
        x: &Tensor,
        ctx_rows: &Tensor,
        grid: (usize, usize),
        global: bool,
    ) -> Result<Tensor> {
        let (h, w) = grid;
        let hw = h * w;
        let ctx_full = ctx_rows
            .reshape(&[1, hw, self.dc])?
            .broadcast_to(&[self.k, hw, self.dc])?;
        let ctx_field = Self::pad_field(&ctx_full.reshape(&[self.k, h, w, self.dc])?, self.window)?;
        let ctx_tiles = Self::partition(&ctx_field, self.window)?;
        let counts = Self::tile_counts(h, w, self.window);
        let ctx_pooled = Self::pool_tiles(&ctx_tiles, self.k, &counts)?;
        let layer = &self.layers[idx];
        let st = if global { &layer.global } else { &layer.local };
        self.spatial_stage(fw, st, x, &ctx_full, &ctx_tiles, &ctx_pooled, grid, global)
    }

    /// Full encoder: cost maps `[H*W, H, W]` + context `[Dc, H, W]` ->
    /// cost memory `[H*W, K, D]`. `masks` switches to the masked-token path.
    pub fn encode(
        &self,
        fw: &Forward,
        maps: &Tensor,
        ctx: &Tensor,
        masks: Option<&MaskMaps>,
    ) -> Result<Tensor> {
        if maps.rank() != 3 {
            return Err(TensorError::Shape(format!(
                "encode expects cost maps [HW,H,W], got {:?}",
                maps.shape()
            )));
        }
        let (hw, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
        if hw != h * w {
            return Err(TensorError::Shape(format!(
                "cost maps {:?} are not an all-pairs volume",
                maps.shape()
            )));
        }
        if ctx.shape() != [self.dc, h, w] {
            return Err(TensorError::Shape(format!(
                "context {:?} does not match [{}, {h}, {w}]",
                ctx.shape(),
                self.dc
            )));
        }
        let padded = crate::costvolume::pad_to_mult8(&maps.reshape(&[hw, 1, h, w])?)?;
        let (h8, w8) = (padded.shape()[2], padded.shape()[3]);
        let feats = self.patchify(fw, &padded, masks)?; // [HW, Dp, ph, pw]
        let (ph, pw) = (h8 / 8, w8 / 8);
        let tokens = feats
            .reshape(&[hw, self.dp, ph * pw])?
            .permute(&[0, 2, 1])?;
        let mut mem = self.summarize(fw, &tokens, (ph, pw), masks.map(|m| &m.visible))?;

        if self.layers.is_empty() {
            return Ok(mem);
        }

        // Per-pixel conditioning, shared across layers.
        let ctx_rows = ctx.reshape(&[self.dc, hw])?.permute(&[1, 0])?; // [HW, Dc]
        let ctx_full = ctx_rows
            .reshape(&[1, hw, self.dc])?
            .broadcast_to(&[self.k, hw, self.dc])?;
        let win = self.window;
        let ctx_field = Self::pad_field(&ctx_full.reshape(&[self.k, h, w, self.dc])?, win)?;
        let ctx_tiles = Self::partition(&ctx_field, win)?;
        let counts = Self::tile_counts(h, w, win);
        let ctx_pooled = Self::pool_tiles(&ctx_tiles, self.k, &counts)?;
        let pe_spatial = crate::costvolume::grid_points(h, w, mem.dtype()).sincos_pe(self.d)?; // [HW, D]

        for layer in &self.layers {
            mem = self.intra(fw, layer, &mem)?;
            let mut field = mem.permute(&[1, 0, 2])?; // [K, HW, D]
            if self.pe_spatial {
                field = field.add(&pe_spatial)?;
            }
            field = self.spatial_stage(
                fw, &layer.local, &field, &ctx_full, &ctx_tiles, &ctx_pooled, (h, w), false,
            )?;
            field = self.spatial_stage(
                fw, &layer.global, &field, &ctx_full, &ctx_tiles, &ctx_pooled, (h, w), true,
            )?;
            mem = field.permute(&[1, 0, 2])?; // [HW, K, D]
        }
        Ok(mem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::params::Mode;
    use crate::tensor::gradcheck::check_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            img_h: 32,
            img_w: 32,
            feat_dim: 8,
            ctx_dim: 6,
            patch_dim: 8,
            codewords: 2,
            latent_dim: 8,
            agt_layers: 1,
            decoder_iters: 2,
            hidden_dim: 16,
            window: 2,
            heads: 1,
            ..ModelConfig::desk()
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore, CostEncoder) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = CostEncoder::new(&mut store, &mut rng, "cenc", cfg).unwrap();
        (store, enc)
    }

    fn rand_maps(hw: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[hw, h, w], DType::F64, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patchify_shapes_and_zero_map() {
        let cfg = ModelConfig {
            patch_dim: 16,
            ..small_cfg()
        };
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let maps = Tensor::zeros(&[3, 1, 16, 16], DType::F64);
        let out = enc.patchify(&fw, &maps, None).unwrap();
        assert_eq!(out.shape(), &[3, 16, 2, 2]);
        // Zero input with random biases: output = relu-chain of biases,
        // identical across batch entries.
        let per = 16 * 4;
        for b in 1..3 {
            assert_eq!(out.data()[..per], out.data()[b * per..(b + 1) * per]);
        }
    }

    #[test]
    fn memory_shape_matches_contract() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let (h, w) = (cfg.grid_h(), cfg.grid_w()); // 4x4
        let maps = rand_maps(h * w, h, w, 5);
        let ctx = Tensor::from_fn(&[cfg.ctx_dim, h, w], DType::F64, |i| (i as f64 * 0.13).sin());
        let mem = enc.encode(&fw, &maps, &ctx, None).unwrap();
        assert_eq!(mem.shape(), &[h * w, cfg.codewords, cfg.latent_dim]);
        assert!(mem.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_layers_returns_raw_summarization() {
        let cfg = ModelConfig {
            agt_layers: 0,
            ..small_cfg()
        };
        // agt_layers = 0 is intentionally constructible in code.
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = CostEncoder::new(&mut store, &mut rng, "cenc", &cfg).unwrap();
        let fw = Forward::new(&store, Mode::Inference);
        let (h, w) = (4, 4);
        let maps = rand_maps(16, h, w, 6);
        let ctx = Tensor::zeros(&[cfg.ctx_dim, h, w], DType::F64);
        let mem = enc.encode(&fw, &maps, &ctx, None).unwrap();

        // Recompute by hand: patchify -> tokens -> summarize.
        let padded = crate::costvolume::pad_to_mult8(&maps.reshape(&[16, 1, 4, 4]).unwrap()).unwrap();
        let feats = enc.patchify(&fw, &padded, None).unwrap();
        let tokens = feats.reshape(&[16, 8, 1]).unwrap().permute(&[0, 2, 1]).unwrap();
        let direct = enc.summarize(&fw, &tokens, (1, 1), None).unwrap();
        assert_eq!(mem.data(), direct.data());
    }

    #[test]
    fn summarize_single_token_matches_value_projection() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let tokens = Tensor::from_fn(&[2, 1, cfg.patch_dim], DType::F64, |i| (i as f64 * 0.2).cos());
        let t = enc.summarize(&fw, &tokens, (1, 1), None).unwrap();
        // One key: softmax weight is exactly 1, so every codeword row equals
        // the value projection of that token.
        let pe = Tensor::new(vec![0.0, 0.0], &[1, 2], DType::F64)
            .unwrap()
            .sincos_pe(cfg.patch_dim)
            .unwrap();
        let cat = Tensor::concat(
            2,
            &[&tokens, &pe.reshape(&[1, 1, cfg.patch_dim]).unwrap().broadcast_to(&[2, 1, cfg.patch_dim]).unwrap()],
        )
        .unwrap();
        let vals = enc.val_proj.apply(&fw, &cat).unwrap(); // [2,1,D]
        for b in 0..2 {
            for k in 0..cfg.codewords {
                for c in 0..cfg.latent_dim {
                    let got = t.data()[(b * cfg.codewords + k) * cfg.latent_dim + c];
                    let want = vals.data()[b * cfg.latent_dim + c];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn summarize_matches_naive_attention_oracle() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let n = 3;
        let tokens = Tensor::from_fn(&[1, n, cfg.patch_dim], DType::F64, |i| {
            ((i * 13 % 17) as f64 - 8.0) * 0.11
        });
        let got = enc.summarize(&fw, &tokens, (1, 3), None).unwrap();

        let pe = CostEncoder::patch_points(1, 3, DType::F64)
            .sincos_pe(cfg.patch_dim)
            .unwrap();
        let cat = Tensor::concat(2, &[&tokens, &pe.reshape(&[1, n, cfg.patch_dim]).unwrap()]).unwrap();
        let keys = enc.key_proj.apply(&fw, &cat).unwrap();
        let vals = enc.val_proj.apply(&fw, &cat).unwrap();
        let q = store.get(enc.codewords).clone();
        let d = cfg.latent_dim;
        let scale = 1.0 / (d as f64).sqrt();
        for k in 0..cfg.codewords {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                for c in 0..d {
                    *l += q.data()[k * d + c] * keys.data()[j * d + c];
                }
                *l *= scale;
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                let mut want = 0.0;
                for j in 0..n {
                    want += exps[j] / z * vals.data()[j * d + c];
                }
                let got_v = got.data()[k * d + c];
                assert!((got_v - want).abs() < 1e-10, "k={k} c={c}");
            }
        }
    }

    #[test]
    fn empty_visible_set_uses_null_token() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let tokens = Tensor::from_fn(&[2, 4, cfg.patch_dim], DType::F64, |i| i as f64);
        let vis = TokenVisibility { idx: vec![], m: 0 };
        let t = enc.summarize(&fw, &tokens, (2, 2), Some(&vis)).unwrap();
        let null = store.get(enc.null_token).reshape(&[1, 1, 2 * cfg.patch_dim]).unwrap();
        let v = enc.val_proj.apply(&fw, &null).unwrap();
        for b in 0..2 {
            for k in 0..cfg.codewords {
                for c in 0..cfg.latent_dim {
                    let got = t.data()[(b * cfg.codewords + k) * cfg.latent_dim + c];
                    assert!((got - v.data()[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn intra_attention_is_per_pixel_and_matches_oracle() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let d = cfg.latent_dim;
        let k = 3usize;
        let x = Tensor::from_fn(&[2, k, d], DType::F64, |i| ((i * 7 % 11) as f64 - 5.0) * 0.14);
        let layer = &enc.layers[0];
        let y = enc.intra(&fw, layer, &x).unwrap();

        // Per-pixel independence: swapping the two pixels swaps outputs.
        let x_swapped = Tensor::concat(
            0,
            &[&x.slice(0, 1, 1).unwrap(), &x.slice(0, 0, 1).unwrap()],
        )
        .unwrap();
        let y_swapped = enc.intra(&fw, layer, &x_swapped).unwrap();
        let per = k * d;
        assert_eq!(y.data()[..per], y_swapped.data()[per..2 * per]);
        assert_eq!(y.data()[per..2 * per], y_swapped.data()[..per]);

        // Oracle: pre-norm attention + FFN with residuals, hand-computed.
        let xn = layer.intra_norm.apply(&fw, &x).unwrap();
        let attn = layer.intra_attn.apply(&fw, &xn, &xn, None).unwrap();
        let mid = x.add(&attn).unwrap();
        let midn = layer.intra_ffn_norm.apply(&fw, &mid).unwrap();
        let want = mid.add(&layer.intra_ffn.apply(&fw, &midn).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tile_local_stage_equals_full_attention() {
        // Grid equals one window: the local stage must attend over all
        // pixels, i.e. equal the global formula with per-token keys.
        let cfg = ModelConfig {
            window: 4,
            ..small_cfg()
        };
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let (h, w) = (4usize, 4usize);
        let (k, d, dc) = (cfg.codewords, cfg.latent_dim, cfg.ctx_dim);
        let x = Tensor::from_fn(&[k, h * w, d], DType::F64, |i| ((i * 5 % 19) as f64 - 9.0) * 0.07);
        let ctx_rows = Tensor::from_fn(&[1, h * w, dc], DType::F64, |i| (i as f64 * 0.17).sin())
            .broadcast_to(&[k, h * w, dc])
            .unwrap();
        let ctx_field = CostEncoder::pad_field(&ctx_rows.reshape(&[k, h, w, dc]).unwrap(), 4).unwrap();
        let ctx_tiles = CostEncoder::partition(&ctx_field, 4).unwrap();
        let counts = CostEncoder::tile_counts(h, w, 4);
        let ctx_pooled = CostEncoder::pool_tiles(&ctx_tiles, k, &counts).unwrap();

        let st = &enc.layers[0].local;
        let got = enc
            .spatial_stage(&fw, st, &x, &ctx_rows, &ctx_tiles, &ctx_pooled, (h, w), false)
            .unwrap();

        // Naive oracle over all 16 tokens.
        let xn = st.norm.apply(&fw, &x).unwrap();
        let qk_in = Tensor::concat(2, &[&xn, &ctx_rows]).unwrap();
        let q = st.q_proj.apply(&fw, &qk_in).unwrap();
        let kk = st.k_proj.apply(&fw, &qk_in).unwrap();
        let v = st.v_proj.apply(&fw, &xn).unwrap();
        let attn = scaled_dot_attention(&q, &kk, &v, cfg.heads, None).unwrap();
        let mid = x.add(&st.o_proj.apply(&fw, &attn).unwrap()).unwrap();
        let midn = st.ffn_norm.apply(&fw, &mid).unwrap();
        let want = mid.add(&st.ffn.apply(&fw, &midn).unwrap()).unwrap();
        let mut max_diff = 0.0f64;
        for (a, b) in got.data().iter().zip(want.data()) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-10, "max diff {max_diff}");
    }

    #[test]
    fn constant_fields_stay_constant_without_pe() {
        let cfg = small_cfg();
        let (store, mut enc) = build(&cfg);
        enc.pe_tokenization = false;
        enc.pe_spatial = false;
        let fw = Forward::new(&store, Mode::Inference);
        let (h, w) = (4, 4);
        // Every source pixel sees the identical cost map and context.
        let one_map: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let maps = Tensor::from_fn(&[16, h, w], DType::F64, |i| one_map[i % 16]);
        let ctx = Tensor::from_fn(&[cfg.ctx_dim, h, w], DType::F64, |i| ((i / 16) as f64) * 0.1);
        let mem = enc.encode(&fw, &maps, &ctx, None).unwrap();
        let per = cfg.codewords * cfg.latent_dim;
        for p in 1..16 {
            for j in 0..per {
                let diff = (mem.data()[j] - mem.data()[p * per + j]).abs();
                assert!(diff < 1e-9, "pixel {p} entry {j} differs by {diff}");
            }
        }
    }

    #[test]
    fn window_padding_hides_ghost_tokens() {
        // 3x3 grid with window 2 forces tile padding; the padded path must
        // stay finite (softmax bias, masked pooling) and bitwise repeatable.
        let cfg = ModelConfig {
            img_h: 24,
            img_w: 24,
            ..small_cfg()
        };
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let (h, w) = (3, 3);
        let maps = rand_maps(9, h, w, 12);
        let ctx = Tensor::from_fn(&[cfg.ctx_dim, h, w], DType::F64, |i| (i as f64 * 0.21).cos());
        let a = enc.encode(&fw, &maps, &ctx, None).unwrap();
        let fw2 = Forward::new(&store, Mode::Inference);
        let b = enc.encode(&fw2, &maps, &ctx, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_reach_cost_maps_and_all_params() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let (h, w) = (4usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let maps: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ctx: Vec<f64> = (0..cfg.ctx_dim * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let res = check_grads(
            "cost_encoder",
            &[(&maps, &[16usize, 4, 4][..]), (&ctx, &[cfg.ctx_dim, 4, 4][..])],
            1e-5,
            2e-4,
            |ins| {
                let fw = Forward::new(&store, Mode::Inference);
                enc.encode(&fw, &ins[0], &ins[1], None)?.sum_all()
            },
        )
        .unwrap();
        assert!(res.pass(), "{}: {}", res.name, res.max_rel_err);
        let _ = (h, w);
    }

    #[test]
    fn masked_encode_with_all_ones_equals_standard_bitwise() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg);
        let fw = Forward::new(&store, Mode::Inference);
        let (h, w) = (4, 4);
        let maps = rand_maps(16, h, w, 44);
        let ctx = Tensor::from_fn(&[cfg.ctx_dim, h, w], DType::F64, |i| (i as f64 * 0.19).sin());
        // Padded map is 8x8 -> stages 4x4, 2x2 -> patch grid 1x1.
        let ones = |sh: &[usize]| Tensor::full(sh, 1.0, DType::F64);
        let mm = MaskMaps {
            b0: ones(&[16, 1, 8, 8]),
            b1: ones(&[16, 1, 4, 4]),
            b2: ones(&[16, 1, 2, 2]),
            visible: TokenVisibility {
                idx: vec![0; 16],
                m: 1,
            },
        };
        let masked = enc.encode(&fw, &maps, &ctx, Some(&mm)).unwrap();
        let standard = enc.encode(&fw, &maps, &ctx, None).unwrap();
        assert_eq!(masked.data(), standard.data());
    }
}
