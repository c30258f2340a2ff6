//! Gaussian tile inference: run the model on four training-sized corner
//! crops of an oversized pair and blend the per-tile flows with a shared
//! Gaussian weight map over normalized center distance.

use crate::model::FlowModel;
use crate::params::{Forward, Mode, ParamStore};
use crate::tensor::{DType, Tensor, TensorError};
use thiserror::Error;

pub const TILE_SIGMA: f64 = 0.05;
/// 2σ² for σ = 0.05, written as a literal: the rounding of 2.0·σ·σ lands one
/// ulp high and would shift the corner weight off exp(-100) exactly.
const TWO_SIGMA_SQ: f64 = 0.005;
/// Weights are computed in 64-bit and floored here so extreme tile sizes
/// can never produce a zero blend denominator.
pub const WEIGHT_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("tile configuration: {0}")]
    Config(String),
    #[error("pixel ({y}, {x}) is covered by no tile")]
    Uncovered { y: usize, x: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, TileError>;

/// The four corner-aligned training-sized tiles of a test frame.
#[derive(Debug, Clone)]
pub struct TileLayout {
    pub train: (usize, usize),
    pub test: (usize, usize),
    pub origins: [(usize, usize); 4],
}

impl TileLayout {
    pub fn new(train: (usize, usize), test: (usize, usize)) -> Result<TileLayout> {
        let ((ht, wt), (hte, wte)) = (train, test);
        if ht > hte || wt > wte {
            return Err(TileError::Config(format!(
                "test frame {hte}x{wte} smaller than train size {ht}x{wt}"
            )));
        }
        if hte > 2 * ht || wte > 2 * wt {
            return Err(TileError::Config(format!(
                "four {ht}x{wt} corner tiles cannot cover a {hte}x{wte} frame"
            )));
        }
        Ok(TileLayout {
            train,
            test,
            origins: [
                (0, 0),
                (0, wte - wt),
                (hte - ht, 0),
                (hte - ht, wte - wt),
            ],
        })
    }

    /// All four origins coincide (test size equals train size).
    pub fn is_degenerate(&self) -> bool {
        self.origins.iter().all(|&o| o == (0, 0))
    }
}

/// Per-pixel blending weight: g(d) = exp(-d^2 / (2 sigma^2)) with sigma 0.05
/// over d = ||(u/Ht - 0.5, v/Wt - 0.5)||, u indexing rows. The center pixel
/// of an even-sized tile gets weight exactly 1; corners get exp(-100).
pub fn gaussian_weight_map(ht: usize, wt: usize) -> Tensor {
    assert!(ht >= 1 && wt >= 1);
    Tensor::from_fn(&[ht, wt], DType::F64, |i| {
        let (u, v) = (i / wt, i % wt);
        let du = u as f64 / ht as f64 - 0.5;
        let dv = v as f64 / wt as f64 - 0.5;
        (-(du * du + dv * dv) / TWO_SIGMA_SQ).exp().max(WEIGHT_FLOOR)
    })
}

/// Weighted per-pixel average of the four tile flows over the test frame.
/// Coinciding origins short-circuit to the first tile's flow, bitwise.
pub fn blend_flows(tile_flows: &[Tensor; 4], layout: &TileLayout, weights: &Tensor) -> Result<Tensor> {
    let (ht, wt) = layout.train;
    let (hte, wte) = layout.test;
    for f in tile_flows {
        if f.shape() != [2, ht, wt] {
            return Err(TileError::Config(format!(
                "tile flow {:?} does not match train size [2, {ht}, {wt}]",
                f.shape()
            )));
        }
    }
    if weights.shape() != [ht, wt] {
        return Err(TileError::Config(format!(
            "weight map {:?} does not match train size",
            weights.shape()
        )));
    }
    if layout.is_degenerate() {
        return Ok(tile_flows[0].clone());
    }
    let w = weights.data();
    let mut out = vec![0.0f64; 2 * hte * wte];
    for y in 0..hte {
        for x in 0..wte {
            let mut acc = [0.0f64; 2];
            let mut wsum = 0.0f64;
            for (i, &(oy, ox)) in layout.origins.iter().enumerate() {
                if y < oy || x < ox || y >= oy + ht || x >= ox + wt {
                    continue;
                }
                let (ly, lx) = (y - oy, x - ox);
                let wi = w[ly * wt + lx];
                let fd = tile_flows[i].data();
                acc[0] += wi * fd[ly * wt + lx];
                acc[1] += wi * fd[ht * wt + ly * wt + lx];
                wsum += wi;
            }
            if wsum == 0.0 {
                return Err(TileError::Uncovered { y, x });
            }
            out[y * wte + x] = acc[0] / wsum;
            out[hte * wte + y * wte + x] = acc[1] / wsum;
        }
    }
    Ok(Tensor::new(out, &[2, hte, wte], tile_flows[0].dtype())?)
}

fn crop(img: &Tensor, oy: usize, ox: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(img.slice(1, oy, h)?.slice(2, ox, w)?)
}

/// Full tile inference: final-iterate flow per training-sized corner crop,
/// blended over the test frame. Equal sizes collapse to direct inference.
pub fn tile_infer(
    store: &ParamStore,
    model: &FlowModel,
    img1: &Tensor,
    img2: &Tensor,
    train: (usize, usize),
) -> Result<Tensor> {
    let s = img1.shape().to_vec();
    if img2.shape() != s.as_slice() || s.len() != 3 {
        return Err(TileError::Config(format!(
            "image pair shapes {:?} / {:?} must match",
            img1.shape(),
            img2.shape()
        )));
    }
    let test = (s[1], s[2]);
    for (name, d) in [("train", train.0), ("train", train.1), ("test", test.0), ("test", test.1)] {
        if d % 8 != 0 || d == 0 {
            return Err(TileError::Config(format!(
                "{name} dimension {d} must be a positive multiple of 8"
            )));
        }
    }
    let layout = TileLayout::new(train, test)?;
    let run = |i1: &Tensor, i2: &Tensor| -> Result<Tensor> {
        let fw = Forward::new(store, Mode::Inference);
        let flows = model.forward_flows(&fw, i1, i2)?;
        Ok(flows.into_iter().next_back().expect("decoder emits >= 1 iterate"))
    };
    if layout.is_degenerate() {
        return run(img1, img2);
    }
    let (ht, wt) = train;
    let mut tile_flows = Vec::with_capacity(4);
    for &(oy, ox) in &layout.origins {
        let c1 = crop(img1, oy, ox, ht, wt)?;
        let c2 = crop(img2, oy, ox, ht, wt)?;
        tile_flows.push(run(&c1, &c2)?);
    }
    let tiles: [Tensor; 4] = tile_flows.try_into().expect("four origins");
    blend_flows(&tiles, &layout, &gaussian_weight_map(ht, wt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::metrics::aepe;
    use crate::synth::{synth_pair, valid_mask, MotionKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_map_center_one_corner_exp_minus_100() {
        let w = gaussian_weight_map(96, 96);
        let d = w.data();
        assert_eq!(d[48 * 96 + 48], 1.0, "center pixel weight must be exactly 1");
        assert_eq!(d[0], (-100.0f64).exp(), "corner weight must be exp(-100)");
        assert!(d.iter().all(|&v| v > 0.0));
        let max = d.iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn weight_map_reflects_for_even_dims() {
        let (ht, wt) = (16, 24);
        let w = gaussian_weight_map(ht, wt);
        let d = w.data();
        for u in 1..ht {
            for v in 1..wt {
                let a = d[u * wt + v];
                let ru = d[(ht - u) * wt + v];
                let rv = d[u * wt + (wt - v)];
                assert!((a - ru).abs() < 1e-15 && (a - rv).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_tiles_blend_to_the_constant() {
        let layout = TileLayout::new((8, 8), (12, 12)).unwrap();
        let c = |u: f64, v: f64| {
            let mut d = vec![u; 64];
            d.extend(vec![v; 64]);
            Tensor::new(d, &[2, 8, 8], DType::F64).unwrap()
        };
        let tiles = [c(1.5, -2.0), c(1.5, -2.0), c(1.5, -2.0), c(1.5, -2.0)];
        let out = blend_flows(&tiles, &layout, &gaussian_weight_map(8, 8)).unwrap();
        assert_eq!(out.shape(), &[2, 12, 12]);
        for (i, &v) in out.data().iter().enumerate() {
            let want = if i < 144 { 1.5 } else { -2.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_layout_returns_first_tile_bitwise() {
        let layout = TileLayout::new((8, 8), (8, 8)).unwrap();
        assert!(layout.is_degenerate());
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let t = Tensor::from_fn(&[2, 8, 8], DType::F64, |_| rng.gen_range(-3.0..3.0));
        let others = Tensor::zeros(&[2, 8, 8], DType::F64);
        let out = blend_flows(
            &[t.clone(), others.clone(), others.clone(), others],
            &layout,
            &gaussian_weight_map(8, 8),
        )
        .unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn blend_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let layout = TileLayout::new((8, 16), (16, 24)).unwrap();
        let tiles: [Tensor; 4] = std::array::from_fn(|_| {
            Tensor::from_fn(&[2, 8, 16], DType::F64, |_| rng.gen_range(-5.0..5.0))
        });
        let weights = Tensor::from_fn(&[8, 16], DType::F64, |_| rng.gen_range(0.01..1.0));
        let got = blend_flows(&tiles, &layout, &weights).unwrap();

        // Oracle: accumulate tile-first into dense numerator/denominator maps.
        let mut num = vec![0.0f64; 2 * 16 * 24];
        let mut den = vec![0.0f64; 16 * 24];
        for (i, &(oy, ox)) in layout.origins.iter().enumerate() {
            for ly in 0..8 {
                for lx in 0..16 {
                    let w = weights.data()[ly * 16 + lx];
                    let (y, x) = (oy + ly, ox + lx);
                    den[y * 24 + x] += w;
                    for c in 0..2 {
                        num[c * 16 * 24 + y * 24 + x] +=
                            w * tiles[i].data()[c * 8 * 16 + ly * 16 + lx];
                    }
                }
            }
        }
        for i in 0..2 * 16 * 24 {
            let want = num[i] / den[i % (16 * 24)];
            assert!((got.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn blended_values_stay_in_tile_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let layout = TileLayout::new((8, 8), (16, 16)).unwrap();
        let tiles: [Tensor; 4] = std::array::from_fn(|_| {
            Tensor::from_fn(&[2, 8, 8], DType::F64, |_| rng.gen_range(-4.0..4.0))
        });
        let out = blend_flows(&tiles, &layout, &gaussian_weight_map(8, 8)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..2 {
                    let mut lo = f64::MAX;
                    let mut hi = f64::MIN;
                    for (i, &(oy, ox)) in layout.origins.iter().enumerate() {
                        if y >= oy && x >= ox && y < oy + 8 && x < ox + 8 {
                            let v = tiles[i].data()[c * 64 + (y - oy) * 8 + (x - ox)];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let v = out.data()[c * 256 + y * 16 + x];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn oversized_and_uncovered_layouts_error() {
        assert!(TileLayout::new((16, 16), (8, 8)).is_err());
        assert!(TileLayout::new((8, 8), (24, 24)).is_err(), "uncoverable frame");
        // A hand-built broken layout is caught at blend time.
        let layout = TileLayout {
            train: (8, 8),
            test: (24, 24),
            origins: [(0, 0), (0, 16), (16, 0), (16, 16)],
        };
        let z = Tensor::zeros(&[2, 8, 8], DType::F64);
        let err = blend_flows(
            &[z.clone(), z.clone(), z.clone(), z],
            &layout,
            &gaussian_weight_map(8, 8),
        );
        assert!(matches!(err, Err(TileError::Uncovered { y: 0, x: 8 })));
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

    #[test]
    fn equal_sizes_reproduce_direct_inference_bitwise() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let model = FlowModel::new(&mut store, &mut rng, &cfg, false).unwrap();
        let s = synth_pair(24, 24, &mut rng, MotionKind::Constant(2.0, 1.0), 0.0, DType::F32);
        let direct = {
            let fw = Forward::new(&store, Mode::Inference);
            model
                .forward_flows(&fw, &s.image1, &s.image2)
                .unwrap()
                .pop()
                .unwrap()
        };
        let tiled = tile_infer(&store, &model, &s.image1, &s.image2, (24, 24)).unwrap();
        assert_eq!(direct.data(), tiled.data());
    }

    #[test]
    fn oversized_pair_blends_close_to_per_tile_quality() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let model = FlowModel::new(&mut store, &mut rng, &cfg, false).unwrap();
        // 1.5x the training size in one axis, covered by corner tiles.
        let s = synth_pair(32, 40, &mut rng, MotionKind::Constant(2.0, 1.0), 0.0, DType::F32);
        let blended = tile_infer(&store, &model, &s.image1, &s.image2, (24, 24)).unwrap();
        assert_eq!(blended.shape(), &[2, 32, 40]);
        let valid = valid_mask(&s.gt_flow);
        let blend_aepe = aepe(&blended, &s.gt_flow, &valid).unwrap();

        let layout = TileLayout::new((24, 24), (32, 40)).unwrap();
        let mut tile_aepes = Vec::new();
        for &(oy, ox) in &layout.origins {
            let c1 = crop(&s.image1, oy, ox, 24, 24).unwrap();
            let c2 = crop(&s.image2, oy, ox, 24, 24).unwrap();
            let fw = Forward::new(&store, Mode::Inference);
            let f = model.forward_flows(&fw, &c1, &c2).unwrap().pop().unwrap();
            let gt = crop(&s.gt_flow, oy, ox, 24, 24).unwrap();
            let v = valid_mask(&gt);
            tile_aepes.push(aepe(&f, &gt, &v).unwrap());
        }
        let mean_tile = tile_aepes.iter().sum::<f64>() / 4.0;
        assert!(
            (blend_aepe - mean_tile).abs() < 0.1,
            "blend {blend_aepe} vs per-tile mean {mean_tile}"
        );
    }
}
