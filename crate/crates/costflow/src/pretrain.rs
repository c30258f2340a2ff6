//! Masked cost-volume pretraining: block-shared mask pyramids, pretext
//! sampling (crop a 9x9 query and a 15x15 target around a random location
//! of each pixel's raw cost map), and the reconstruction loss.

use rand::Rng;
use thiserror::Error;

use crate::config::NormalizeSide;
use crate::costencoder::{MaskMaps, TokenVisibility};
use crate::costvolume::crop_cost_patches;
use crate::decoder::FlowDecoder;
use crate::model::PretextHead;
use crate::params::Forward;
use crate::tensor::{DType, Result as TensorResult, Tensor};

pub const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask grid {0}x{1} is degenerate")]
    DegenerateGrid(usize, usize),
    #[error("mask ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("block range [{lo}, {hi}] invalid for a {h}x{w} grid")]
    BadRange {
        lo: usize,
        hi: usize,
        h: usize,
        w: usize,
    },
}

/// Mask assignment for every source pixel of one cost volume. Pixels map to
/// blocks; each block owns one coarsest-level (token-grid) 0/1 mask with an
/// exact count of zeros, from which the finer pyramid levels are upsampled.
pub struct MaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub token_h: usize,
    pub token_w: usize,
    pub block_of: Vec<usize>,
    pub block_masks: Vec<Vec<f64>>,
}

/// Band lengths covering `len`, drawn uniformly from `[lo, hi]`; a short
/// remainder becomes a smaller edge band.
fn bands(len: usize, lo: usize, hi: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rem = len;
    while rem > 0 {
        let size = rng.gen_range(lo..=hi).min(rem);
        out.push(size);
        rem -= size;
    }
    out
}

/// One coarsest-level mask: exactly `zeros` masked cells (value 0) at
/// uniformly random positions among `n`.
fn exact_count_mask(n: usize, zeros: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..zeros {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut mask = vec![1.0; n];
    for &i in &idx[..zeros] {
        mask[i] = 0.0;
    }
    mask
}

fn token_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(8), w.div_ceil(8))
}

fn validate(h: usize, w: usize, ratio: f64) -> std::result::Result<(), MaskError> {
    if h < 1 || w < 1 {
        return Err(MaskError::DegenerateGrid(h, w));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MaskError::BadRatio(ratio));
    }
    Ok(())
}

/// Partitions the `h x w` source grid into rectangular blocks (side lengths
/// uniform in `range` grid cells) and samples one shared token-level mask
/// per block.
pub fn generate_block_masks(
    h: usize,
    w: usize,
    ratio: f64,
    range: (usize, usize),
    rng: &mut impl Rng,
) -> std::result::Result<MaskSet, MaskError> {
    validate(h, w, ratio)?;
    let (lo, hi) = range;
    if lo < 1 || hi < lo || hi > h.max(w) {
        return Err(MaskError::BadRange { lo, hi, h, w });
    }
    let row_bands = bands(h, lo, hi, rng);
    let col_bands = bands(w, lo, hi, rng);
    let ncols = col_bands.len();

    let mut row_of = Vec::with_capacity(h);
    for (bi, &len) in row_bands.iter().enumerate() {
        row_of.extend(std::iter::repeat(bi).take(len));
    }
    let mut col_of = Vec::with_capacity(w);
    for (bi, &len) in col_bands.iter().enumerate() {
        col_of.extend(std::iter::repeat(bi).take(len));
    }
    let block_of: Vec<usize> = (0..h * w)
        .map(|i| row_of[i / w] * ncols + col_of[i % w])
        .collect();

    let (th, tw) = token_dims(h, w);
    let n = th * tw;
    let zeros = (ratio * n as f64).floor() as usize;
    let block_masks: Vec<Vec<f64>> = (0..row_bands.len() * ncols)
        .map(|_| exact_count_mask(n, zeros, rng))
        .collect();
    Ok(MaskSet {
        grid_h: h,
        grid_w: w,
        token_h: th,
        token_w: tw,
        block_of,
        block_masks,
    })
}

/// Independent per-pixel masks (no sharing): the random-masking baseline.
pub fn generate_random_masks(
    h: usize,
    w: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> std::result::Result<MaskSet, MaskError> {
    validate(h, w, ratio)?;
    let (th, tw) = token_dims(h, w);
    let n = th * tw;
    let zeros = (ratio * n as f64).floor() as usize;
    Ok(MaskSet {
        grid_h: h,
        grid_w: w,
        token_h: th,
        token_w: tw,
        block_of: (0..h * w).collect(),
        block_masks: (0..h * w).map(|_| exact_count_mask(n, zeros, rng)).collect(),
    })
}

/// Nearest-neighbor 2x upsampling of a single-channel mask.
fn upsample2(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 4 * h * w];
    for y in 0..2 * h {
        for x in 0..2 * w {
            out[y * 2 * w + x] = mask[(y / 2) * w + x / 2];
        }
    }
    out
}

impl MaskSet {
    /// Fraction of masked (zero) cells in each block's coarsest mask.
    pub fn masked_fraction(&self) -> f64 {
        let n = (self.token_h * self.token_w) as f64;
        let zeros: f64 = self.block_masks[0].iter().filter(|&&v| v == 0.0).count() as f64;
        zeros / n
    }

    /// Expands the per-block masks into the per-pixel pyramid levels the
    /// tokenizer consumes, plus the shared visible-token selection.
    pub fn to_maps(&self, dtype: DType) -> MaskMaps {
        let b = self.grid_h * self.grid_w;
        let (th, tw) = (self.token_h, self.token_w);
        let nblocks = self.block_masks.len();
        let mut lvl2 = Vec::with_capacity(nblocks);
        let mut lvl1 = Vec::with_capacity(nblocks);
        let mut lvl0 = Vec::with_capacity(nblocks);
        for m3 in &self.block_masks {
            let m2 = upsample2(m3, th, tw);
            let m1 = upsample2(&m2, 2 * th, 2 * tw);
            let m0 = upsample2(&m1, 4 * th, 4 * tw);
            lvl2.push(m2);
            lvl1.push(m1);
            lvl0.push(m0);
        }
        let stack = |levels: &[Vec<f64>], side_h: usize, side_w: usize| {
            let mut data = Vec::with_capacity(b * side_h * side_w);
            for &blk in &self.block_of {
                data.extend_from_slice(&levels[blk]);
            }
            Tensor::new(data, &[b, 1, side_h, side_w], dtype).expect("sized by construction")
        };
        let m = th * tw - (self.block_masks[0].iter().filter(|&&v| v == 0.0).count());
        let mut idx = Vec::with_capacity(b * m);
        for &blk in &self.block_of {
            idx.extend(
                self.block_masks[blk]
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, _)| i),
            );
        }
        MaskMaps {
            b0: stack(&lvl0, 8 * th, 8 * tw),
            b1: stack(&lvl1, 4 * th, 4 * tw),
            b2: stack(&lvl2, 2 * th, 2 * tw),
            visible: TokenVisibility { idx, m },
        }
    }
}

/// Per-pixel pretext targets: a random continuous location and the raw
/// 15x15 crop around it (labels — detached by construction).
pub struct PretextBatch {
    pub centers: Tensor,
    pub targets: Tensor,
}

pub fn sample_pretext(maps: &Tensor, rng: &mut impl Rng) -> TensorResult<PretextBatch> {
    let (hw, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut centers = Vec::with_capacity(2 * hw);
    for _ in 0..hw {
        centers.push(rng.gen::<f64>() * (w - 1) as f64);
        centers.push(rng.gen::<f64>() * (h - 1) as f64);
    }
    let centers = Tensor::new(centers, &[hw, 2], maps.dtype())?;
    let targets = crop_cost_patches(&maps.detach(), &centers, 15)?.detach();
    Ok(PretextBatch { centers, targets })
}

/// Row-wise standardization on plain values: (x - mean) / (std + eps).
pub fn standardize_rows_const(q: &Tensor) -> Tensor {
    let (b, n) = (q.shape()[0], q.shape()[1]);
    let d = q.data();
    let mut out = vec![0.0; b * n];
    for r in 0..b {
        let row = &d[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let denom = var.sqrt() + STANDARDIZE_EPS;
        for (i, &v) in row.iter().enumerate() {
            out[r * n + i] = (v - mean) / denom;
        }
    }
    let mut t = Tensor::new(out, &[b, n], q.dtype()).expect("same shape");
    if q.dtype() == DType::F32 {
        t = t.to_dtype(DType::F32);
    }
    t
}

/// Differentiable row-wise standardization (used when the config asks to
/// normalize the prediction instead of the target).
pub fn standardize_rows(q: &Tensor) -> TensorResult<Tensor> {
    let mean = q.mean_axes(&[1], true)?;
    let centered = q.sub(&mean)?;
    let var = centered.mul(&centered)?.mean_axes(&[1], true)?;
    let denom = var.sqrt()?.add_scalar(STANDARDIZE_EPS)?;
    centered.div(&denom)
}

/// Queries the cost memory at the sampled locations and decodes patch
/// predictions, reusing the decoder's query/attention parameters.
pub fn pretext_predict(
    fw: &Forward,
    decoder: &FlowDecoder,
    head: &PretextHead,
    maps: &Tensor,
    memory: &Tensor,
    centers: &Tensor,
) -> TensorResult<Tensor> {
    let (q_emb, _) = decoder.build_query(fw, maps, centers)?;
    let c = decoder.decode_feature(fw, &q_emb, memory, None)?;
    head.apply(fw, &c)
}

/// Mean squared error between prediction and target, with the configured
/// side standardized.
pub fn pretext_loss(
    pred: &Tensor,
    targets_raw: &Tensor,
    side: NormalizeSide,
) -> TensorResult<Tensor> {
    let diff = match side {
        NormalizeSide::Target => standardize_rows_const(targets_raw).sub(pred)?,
        NormalizeSide::Prediction => targets_raw.detach().sub(&standardize_rows(pred)?)?,
    };
    diff.mul(&diff)?.mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::FlowModel;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::gradcheck::check_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pyramid_levels_are_exact_nearest_upsamplings() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        // 24x24 source grid -> 3x3 token grid.
        let set = generate_block_masks(24, 24, 0.5, (3, 6), &mut rng).unwrap();
        let maps = set.to_maps(DType::F64);
        let b = 24 * 24;
        let (th, tw) = (set.token_h, set.token_w);
        let check_level = |fine: &Tensor, coarse_of: &dyn Fn(usize, usize, usize) -> f64,
                           fh: usize, fw_: usize| {
            let d = fine.data();
            for pix in 0..b {
                for y in 0..fh {
                    for x in 0..fw_ {
                        assert_eq!(d[(pix * fh + y) * fw_ + x], coarse_of(pix, y, x));
                    }
                }
            }
        };
        let b3 = |pix: usize, y: usize, x: usize| set.block_masks[set.block_of[pix]][y * tw + x];
        let b2d = maps.b2.data().to_vec();
        check_level(&maps.b2, &|p, y, x| b3(p, y / 2, x / 2), 2 * th, 2 * tw);
        check_level(
            &maps.b1,
            &|p, y, x| b2d[(p * 2 * th + y / 2) * 2 * tw + x / 2],
            4 * th,
            4 * tw,
        );
        let b1d = maps.b1.data().to_vec();
        check_level(
            &maps.b0,
            &|p, y, x| b1d[(p * 4 * th + y / 2) * 4 * tw + x / 2],
            8 * th,
            8 * tw,
        );
    }

    #[test]
    fn exact_zero_count_at_ratio_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        // 32x32 grid -> 4x4 token masks; ratio 0.5 -> exactly 8 zeros each.
        let set = generate_block_masks(32, 32, 0.5, (4, 8), &mut rng).unwrap();
        assert_eq!((set.token_h, set.token_w), (4, 4));
        for m in &set.block_masks {
            assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), 8);
        }
        assert_eq!(set.masked_fraction(), 0.5);
    }

    #[test]
    fn same_block_shares_bitwise_different_blocks_vary() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let set = generate_block_masks(24, 24, 0.5, (3, 6), &mut rng).unwrap();
        let maps = set.to_maps(DType::F64);
        let d = maps.b0.data();
        let cell = 8 * set.token_h * 8 * set.token_w;
        // Two pixels of the same block: identical level-0 rows.
        let (mut a, mut b) = (None, None);
        for p in 1..set.block_of.len() {
            if set.block_of[p] == set.block_of[0] {
                a = Some(p);
            } else {
                b = Some(p);
            }
        }
        let same = a.unwrap();
        assert_eq!(d[..cell], d[same * cell..(same + 1) * cell]);

        // Pixels in different blocks: some seed must produce differing masks.
        let other = b.unwrap();
        let mut differing = false;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_block_masks(24, 24, 0.5, (3, 6), &mut rng).unwrap();
            if s.block_masks[s.block_of[0]] != s.block_masks[s.block_of[other]] {
                differing = true;
                break;
            }
        }
        assert!(differing);
    }

    #[test]
    fn band_partition_covers_grid_within_range() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w, lo, hi) = (13, 9, 2, 5);
            let set = generate_block_masks(h, w, 0.4, (lo, hi), &mut rng).unwrap();
            assert_eq!(set.block_of.len(), h * w);
            let nblocks = set.block_masks.len();
            assert!(set.block_of.iter().all(|&b| b < nblocks));
            // Blocks are contiguous rectangles: the set of rows (columns)
            // touched by a block id is an interval; widths never exceed hi.
            for blk in 0..nblocks {
                let rows: Vec<usize> = (0..h)
                    .filter(|&y| (0..w).any(|x| set.block_of[y * w + x] == blk))
                    .collect();
                let cols: Vec<usize> = (0..w)
                    .filter(|&x| (0..h).any(|y| set.block_of[y * w + x] == blk))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                assert_eq!(rows.last().unwrap() - rows[0] + 1, rows.len());
                assert_eq!(cols.last().unwrap() - cols[0] + 1, cols.len());
                assert!(rows.len() <= hi && cols.len() <= hi);
            }
        }
    }

    #[test]
    fn invalid_arguments_are_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        assert!(matches!(
            generate_block_masks(0, 8, 0.5, (2, 3), &mut rng),
            Err(MaskError::DegenerateGrid(0, 8))
        ));
        assert!(matches!(
            generate_block_masks(8, 8, 1.0, (2, 3), &mut rng),
            Err(MaskError::BadRatio(_))
        ));
        assert!(matches!(
            generate_block_masks(8, 8, 0.5, (3, 2), &mut rng),
            Err(MaskError::BadRange { .. })
        ));
        assert!(matches!(
            generate_block_masks(8, 8, 0.5, (2, 9), &mut rng),
            Err(MaskError::BadRange { .. })
        ));
    }

    #[test]
    fn random_strategy_gives_per_pixel_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let set = generate_random_masks(16, 16, 0.5, &mut rng).unwrap();
        assert_eq!(set.block_masks.len(), 256);
        assert_eq!(set.block_of, (0..256).collect::<Vec<_>>());
        let distinct = set
            .block_masks
            .iter()
            .filter(|m| **m != set.block_masks[0])
            .count();
        assert!(distinct > 200, "only {distinct} distinct masks");
    }

    #[test]
    fn constant_map_standardizes_to_zero() {
        let q = Tensor::full(&[3, 225], 5.0, DType::F64);
        let z = standardize_rows_const(&q);
        assert!(z.data().iter().all(|&v| v == 0.0));
        // The differentiable path computes the mean as sum * (1/n), so a
        // constant row standardizes to ~0 up to rounding, not exactly.
        let zd = standardize_rows(&q).unwrap();
        let worst = zd.data().iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-7, "worst |z| = {worst:e}");
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let q = Tensor::from_fn(&[10, 225], DType::F64, |_| rng.gen_range(-4.0..4.0));
        for z in [standardize_rows_const(&q), standardize_rows(&q).unwrap()] {
            let d = z.data();
            for r in 0..10 {
                let row = &d[r * 225..(r + 1) * 225];
                let mean = row.iter().sum::<f64>() / 225.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 225.0;
                assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
            }
        }
    }

    #[test]
    fn integer_center_crop_equals_subarray() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let maps = Tensor::from_fn(&[1, 21, 21], DType::F64, |_| rng.gen_range(-1.0..1.0));
        let centers = Tensor::new(vec![10.0, 10.0], &[1, 2], DType::F64).unwrap();
        let q = crop_cost_patches(&maps, &centers, 15).unwrap();
        let d = maps.data();
        for dy in 0..15 {
            for dx in 0..15 {
                let want = d[(10 - 7 + dy) * 21 + (10 - 7 + dx)];
                assert_eq!(q.data()[dy * 15 + dx], want);
            }
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            img_h: 24,
            img_w: 24,
            feat_dim: 8,
            ctx_dim: 6,
            patch_dim: 8,
            codewords: 2,
            latent_dim: 8,
            agt_layers: 1,
            decoder_iters: 2,
            hidden_dim: 12,
            window: 2,
            heads: 1,
            ..ModelConfig::desk()
        }
    }

    fn encoded_pair(
        cfg: &ModelConfig,
        dtype: DType,
    ) -> (ParamStore, FlowModel, crate::model::EncodedPair) {
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let model = FlowModel::new(&mut store, &mut rng, cfg, true).unwrap();
        let s = crate::synth::synth_pair(
            cfg.img_h,
            cfg.img_w,
            &mut rng,
            crate::synth::MotionKind::Constant(1.0, 0.5),
            0.0,
            dtype,
        );
        let enc = {
            let fw = Forward::new(&store, Mode::Inference);
            let e = model.encode_pair(&fw, &s.image1, &s.image2).unwrap();
            crate::model::EncodedPair {
                maps: e.maps.detach(),
                ctx: e.ctx.detach(),
            }
        };
        (store, model, enc)
    }

    #[test]
    fn zero_head_loss_is_target_variance() {
        let cfg = tiny_cfg();
        let (mut store, model, enc) = encoded_pair(&cfg, DType::F64);
        for prefix in ["pretext.head.fc1", "pretext.head.fc2", "pretext.head.fc3"] {
            for suffix in [".weight", ".bias"] {
                let id = store.find(&format!("{prefix}{suffix}")).unwrap();
                let shape = store.get(id).shape().to_vec();
                store
                    .set_value(id, Tensor::zeros(&shape, DType::F64))
                    .unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let batch = sample_pretext(&enc.maps, &mut rng).unwrap();
        let fw = Forward::new(&store, Mode::Inference);
        let memory = model.cost_memory(&fw, &enc, None).unwrap();
        let pred = pretext_predict(
            &fw,
            &model.decoder,
            model.pretext_head.as_ref().unwrap(),
            &enc.maps,
            &memory,
            &batch.centers,
        )
        .unwrap();
        assert_eq!(pred.shape(), &[3 * 3, 225]);
        assert!(pred.data().iter().all(|&v| v == 0.0));
        let loss = pretext_loss(&pred, &batch.targets, NormalizeSide::Target)
            .unwrap()
            .item()
            .unwrap();
        // Standardized targets have unit variance, so the zero predictor's
        // MSE sits near 1 (border crops lower it slightly).
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let t = Tensor::from_fn(&[4, 225], DType::F64, |_| rng.gen_range(-1.0..1.0));
        let pred = standardize_rows_const(&t);
        let loss = pretext_loss(&pred, &t, NormalizeSide::Target).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn gradient_reaches_codewords_through_head_and_attention() {
        let cfg = tiny_cfg();
        let (store, model, enc) = encoded_pair(&cfg, DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let batch = sample_pretext(&enc.maps, &mut rng).unwrap();
        let masks = generate_block_masks(3, 3, 0.5, (1, 2), &mut rng)
            .unwrap()
            .to_maps(DType::F64);

        let code_id = store.find("cost.codewords").unwrap();
        let base = store.get(code_id).data().to_vec();
        let res = check_grads(
            "pretext_wrt_codewords",
            &[(&base, &store.get(code_id).shape().to_vec()[..])],
            1e-4,
            2e-4,
            |ins| {
                let fw = Forward::new(&store, Mode::Inference);
                fw.bind_override(code_id, ins[0].clone());
                let memory = model.cost_memory(&fw, &enc, Some(&masks))?;
                let pred = pretext_predict(
                    &fw,
                    &model.decoder,
                    model.pretext_head.as_ref().unwrap(),
                    &enc.maps,
                    &memory,
                    &batch.centers,
                )?;
                pretext_loss(&pred, &batch.targets, NormalizeSide::Target)
            },
        )
        .unwrap();
        assert!(res.pass(), "{}: {}", res.name, res.max_rel_err);
    }

    #[test]
    fn masked_entries_cannot_leak_into_predictions() {
        // 72x72 images -> 9x9 cost maps -> 2x2 token masks with 2 zeros.
        let cfg = ModelConfig {
            img_h: 72,
            img_w: 72,
            ..tiny_cfg()
        };
        let (store, model, enc) = encoded_pair(&cfg, DType::F64);
        let (gh, gw) = (9usize, 9usize);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let set = generate_block_masks(gh, gw, 0.5, (2, 4), &mut rng).unwrap();
        let masks = set.to_maps(DType::F64);
        let batch = sample_pretext(&enc.maps, &mut rng).unwrap();

        // The pretext query legitimately crops raw cost values, so the
        // perturbation targets only the tokenizer's input; queries and
        // targets stay fixed.
        let run = |encoder_maps: &Tensor| {
            let fw = Forward::new(&store, Mode::Inference);
            let enc2 = crate::model::EncodedPair {
                maps: encoder_maps.clone(),
                ctx: enc.ctx.clone(),
            };
            let memory = model.cost_memory(&fw, &enc2, Some(&masks)).unwrap();
            let pred = pretext_predict(
                &fw,
                &model.decoder,
                model.pretext_head.as_ref().unwrap(),
                &enc.maps,
                &memory,
                &batch.centers,
            )
            .unwrap();
            (memory.data().to_vec(), pred.data().to_vec())
        };
        let (mem_a, pred_a) = run(&enc.maps);

        // Perturb, for several source pixels, a cost entry whose position is
        // masked at the finest pyramid level and lies inside the unpadded map.
        let b0 = masks.b0.data();
        let w8 = 8 * set.token_w;
        let cell = 8 * set.token_h * w8;
        let mut perturbed = enc.maps.data().to_vec();
        let mut hits = 0;
        for pix in [0usize, 40, 80] {
            if let Some(at) = (0..cell)
                .find(|i| b0[pix * cell + i] == 0.0 && i / w8 < gh && i % w8 < gw)
            {
                perturbed[(pix * gh + at / w8) * gw + at % w8] += 1000.0;
                hits += 1;
            }
        }
        assert!(hits > 0, "no maskable in-bounds cell found");
        let maps2 = Tensor::new(perturbed, &[gh * gw, gh, gw], DType::F64).unwrap();
        let (mem_b, pred_b) = run(&maps2);
        assert_eq!(mem_a, mem_b, "masked perturbation leaked into memory");
        assert_eq!(pred_a, pred_b, "masked perturbation leaked into predictions");
    }
}
