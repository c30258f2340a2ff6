//! Recurrent flow decoder. Each iteration crops a 9x9 cost patch at the
//! current correspondence estimate, embeds it (with a positional term) into a
//! query, cross-attends into the per-pixel cost memory (keys/values optionally
//! computed once and reused), feeds the result through a ConvGRU, and emits a
//! residually-updated flow field upsampled to full resolution by a learned
//! convex combination of each pixel's 3x3 coarse neighborhood.

use rand::Rng;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::config::ModelConfig;
use crate::costvolume::{crop_cost_patches, grid_points};
use crate::layers::{scaled_dot_attention, Conv2d, Ffn, Linear};
use crate::params::{Forward, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

pub const QUERY_RADIUS: usize = 9;
const QUERY_LEN: usize = QUERY_RADIUS * QUERY_RADIUS;
const FLOW_ENC_DIM: usize = 32;
const HEAD_HIDDEN: usize = 128;
const UP_FACTOR: usize = 8;

/// Cross-attention keys/values computed once per forward pass. The hash
/// records which memory tensor they came from; debug builds verify it.
pub struct KvCache {
    keys: Tensor,
    vals: Tensor,
    memory_hash: u64,
}

fn content_hash(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    t.shape().hash(&mut h);
    h.finish()
}

pub struct FlowDecoder {
    q_inner: Linear,
    q_outer: Ffn,
    k_proj: Linear,
    v_proj: Linear,
    flow_enc1: Conv2d,
    flow_enc2: Conv2d,
    ctx_hidden: Conv2d,
    ctx_input: Conv2d,
    gate_z: Conv2d,
    gate_r: Conv2d,
    gate_h: Conv2d,
    head1: Conv2d,
    head2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    d: usize,
    dc: usize,
    heads: usize,
    iters: usize,
    kv_cache: bool,
}

impl FlowDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<FlowDecoder> {
        let (d, dh, dc) = (cfg.latent_dim, cfg.hidden_dim, cfg.ctx_dim);
        let half = dc / 2;
        let gru_in = d + QUERY_LEN + FLOW_ENC_DIM + half;
        let conv = |store: &mut ParamStore, rng: &mut _, n: String, ci, co, k, pad| {
            Conv2d::new(store, rng, &n, ci, co, k, 1, pad)
        };
        Ok(FlowDecoder {
            q_inner: Linear::new(store, rng, &format!("{name}.query.embed"), QUERY_LEN, d, true)?,
            q_outer: Ffn::new(store, rng, &format!("{name}.query.ffn"), d, d, d)?,
            k_proj: Linear::new(store, rng, &format!("{name}.attn.key"), d, d, true)?,
            v_proj: Linear::new(store, rng, &format!("{name}.attn.value"), d, d, true)?,
            flow_enc1: conv(store, rng, format!("{name}.flow_enc1"), 2, FLOW_ENC_DIM, 3, 1)?,
            flow_enc2: conv(
                store,
                rng,
                format!("{name}.flow_enc2"),
                FLOW_ENC_DIM,
                FLOW_ENC_DIM,
                3,
                1,
            )?,
            ctx_hidden: conv(store, rng, format!("{name}.ctx_hidden"), half, dh, 1, 0)?,
            ctx_input: conv(store, rng, format!("{name}.ctx_input"), half, half, 1, 0)?,
            gate_z: conv(store, rng, format!("{name}.gate_z"), dh + gru_in, dh, 3, 1)?,
            gate_r: conv(store, rng, format!("{name}.gate_r"), dh + gru_in, dh, 3, 1)?,
            gate_h: conv(store, rng, format!("{name}.gate_h"), dh + gru_in, dh, 3, 1)?,
            head1: conv(store, rng, format!("{name}.head1"), dh, HEAD_HIDDEN, 3, 1)?,
            head2: conv(store, rng, format!("{name}.head2"), HEAD_HIDDEN, 2, 3, 1)?,
            up1: conv(store, rng, format!("{name}.up1"), dh, HEAD_HIDDEN, 3, 1)?,
            up2: conv(
                store,
                rng,
                format!("{name}.up2"),
                HEAD_HIDDEN,
                UP_FACTOR * UP_FACTOR * 9,
                1,
                0,
            )?,
            d,
            dc,
            heads: cfg.heads,
            iters: cfg.decoder_iters,
            kv_cache: cfg.kv_cache,
        })
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    pub fn set_kv_cache(&mut self, on: bool) {
        self.kv_cache = on;
    }

    /// Builds per-pixel queries at the given correspondence estimates.
    ///
    /// `maps: [HW, H, W]` cost maps, `centers: [HW, 2]` (x, y) positions.
    /// Returns the query embedding `[HW, 1, D]` and the raw 81-value cost
    /// patches `[HW, 81]`.
    pub fn build_query(
        &self,
        fw: &Forward,
        maps: &Tensor,
        centers: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let hw = maps.shape()[0];
        let q_raw = crop_cost_patches(maps, centers, QUERY_RADIUS)?; // [HW, 81]
        let pe = centers.sincos_pe(self.d)?; // [HW, D]
        let embedded = self.q_inner.apply(fw, &q_raw)?.add(&pe)?;
        let q = self.q_outer.apply(fw, &embedded)?;
        Ok((q.reshape(&[hw, 1, self.d])?, q_raw))
    }

    /// Projects cost memory `[HW, K, D]` into reusable keys/values.
    pub fn build_kv(&self, fw: &Forward, memory: &Tensor) -> Result<KvCache> {
        Ok(KvCache {
            keys: self.k_proj.apply(fw, memory)?,
            vals: self.v_proj.apply(fw, memory)?,
            memory_hash: content_hash(memory),
        })
    }

    /// Single-query cross-attention into each pixel's K memory tokens:
    /// query `[HW, 1, D]` + memory `[HW, K, D]` -> feature `[HW, D]`.
    /// Passing a cache skips the key/value projections; the result is
    /// bitwise identical either way.
    pub fn decode_feature(
        &self,
        fw: &Forward,
        query: &Tensor,
        memory: &Tensor,
        cache: Option<&KvCache>,
    ) -> Result<Tensor> {
        let fresh;
        let kv = match cache {
            Some(c) => {
                debug_assert_eq!(
                    c.memory_hash,
                    content_hash(memory),
                    "KV cache built from different cost memory"
                );
                c
            }
            None => {
                fresh = self.build_kv(fw, memory)?;
                &fresh
            }
        };
        let (hw, d) = (query.shape()[0], self.d);
        scaled_dot_attention(query, &kv.keys, &kv.vals, self.heads, None)?.reshape(&[hw, d])
    }

    /// One ConvGRU step: hidden `[1, Dh, H, W]`, input `[1, Cin, H, W]`.
    pub fn gru(&self, fw: &Forward, hidden: &Tensor, input: &Tensor) -> Result<Tensor> {
        let hx = Tensor::concat(1, &[hidden, input])?;
        let z = self.gate_z.apply(fw, &hx)?.sigmoid()?;
        let r = self.gate_r.apply(fw, &hx)?.sigmoid()?;
        let rh = r.mul(hidden)?;
        let cand = self
            .gate_h
            .apply(fw, &Tensor::concat(1, &[&rh, input])?)?
            .tanh()?;
        // h <- (1 - z) * h + z * cand
        let keep = z.scale(-1.0)?.add_scalar(1.0)?;
        keep.mul(hidden)?.add(&z.mul(&cand)?)
    }

    /// Residual flow from the hidden state: `[1, Dh, H, W]` -> `[2, H, W]`.
    fn flow_head(&self, fw: &Forward, hidden: &Tensor) -> Result<Tensor> {
        let s = hidden.shape().to_vec();
        self.head2
            .apply(fw, &self.head1.apply(fw, hidden)?.relu()?)?
            .reshape(&[2, s[2], s[3]])
    }

    /// Learned convex upsampling: coarse flow `[2, H, W]` plus hidden state
    /// -> full-resolution flow `[2, 8H, 8W]` (values scaled by 8).
    pub fn upsample(&self, fw: &Forward, flow: &Tensor, hidden: &Tensor) -> Result<Tensor> {
        let (h, w) = (flow.shape()[1], flow.shape()[2]);
        let s2 = UP_FACTOR * UP_FACTOR;
        let logits = self.up2.apply(fw, &self.up1.apply(fw, hidden)?.relu()?)?;
        let weights = logits
            .reshape(&[s2, 9, h, w])?
            .permute(&[0, 2, 3, 1])?
            .softmax_lastdim()?
            .permute(&[0, 3, 1, 2])? // [64, 9, H, W]
            .reshape(&[1, s2, 9, h, w])?;
        let neighborhood = flow
            .neighbors_3x3_clamped()? // [2, 9, H, W]
            .reshape(&[2, 1, 9, h, w])?;
        weights
            .mul(&neighborhood)?
            .sum_axes(&[2], false)? // [2, 64, H, W]
            .scale(UP_FACTOR as f64)?
            .reshape(&[2, UP_FACTOR, UP_FACTOR, h, w])?
            .permute(&[0, 3, 1, 4, 2])? // [2, H, 8, W, 8]
            .reshape(&[2, UP_FACTOR * h, UP_FACTOR * w])
    }

    /// Full recurrent decode. `maps: [HW, H, W]` cost maps, `memory:
    /// [HW, K, D]`, `ctx: [Dc, H, W]`. Returns every iteration's
    /// full-resolution flow field `[2, 8H, 8W]`, in order.
    pub fn run(
        &self,
        fw: &Forward,
        maps: &Tensor,
        memory: &Tensor,
        ctx: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let (hw, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
        if ctx.shape() != [self.dc, h, w] {
            return Err(TensorError::Shape(format!(
                "decoder context {:?} does not match [{}, {h}, {w}]",
                ctx.shape(),
                self.dc
            )));
        }
        if memory.shape()[0] != hw || memory.shape()[2] != self.d {
            return Err(TensorError::Shape(format!(
                "cost memory {:?} does not match HW={hw}, D={}",
                memory.shape(),
                self.d
            )));
        }
        let half = self.dc / 2;
        let ctx4 = ctx.reshape(&[1, self.dc, h, w])?;
        let mut hidden = self
            .ctx_hidden
            .apply(fw, &ctx4.slice(1, 0, half)?)?
            .tanh()?;
        let ctx_in = self
            .ctx_input
            .apply(fw, &ctx4.slice(1, half, half)?)?
            .relu()?;

        let grid = grid_points(h, w, maps.dtype());
        let cache = if self.kv_cache {
            Some(self.build_kv(fw, memory)?)
        } else {
            None
        };
        let mut flow = Tensor::zeros(&[2, h, w], maps.dtype());
        let mut outputs = Vec::with_capacity(self.iters);
        for _ in 0..self.iters {
            let centers = grid.add(&flow.reshape(&[2, hw])?.permute(&[1, 0])?)?;
            let (q_emb, q_raw) = self.build_query(fw, maps, &centers)?;
            let c = self.decode_feature(fw, &q_emb, memory, cache.as_ref())?;
            let c_spatial = c.permute(&[1, 0])?.reshape(&[1, self.d, h, w])?;
            let q_spatial = q_raw
                .reshape(&[h, w, QUERY_LEN])?
                .permute(&[2, 0, 1])?
                .reshape(&[1, QUERY_LEN, h, w])?;
            let fenc = self.flow_enc2.apply(
                fw,
                &self
                    .flow_enc1
                    .apply(fw, &flow.reshape(&[1, 2, h, w])?)?
                    .relu()?,
            )?;
            let input = Tensor::concat(1, &[&c_spatial, &q_spatial, &fenc, &ctx_in])?;
            hidden = self.gru(fw, &hidden, &input)?;
            flow = flow.add(&self.flow_head(fw, &hidden)?)?;
            outputs.push(self.upsample(fw, &flow, &hidden)?);
        }
        Ok(outputs)
    }
}
