//! Synthetic optical-flow pairs with exact ground truth.
//!
//! Frame one is a dense multi-scale texture (random sinusoids plus blurred
//! noise). The flow field comes from the chosen motion family, and frame two
//! is produced by warping frame one so that `image2(x + f(x)) == image1(x)`
//! up to interpolation: for every target pixel we invert `x -> x + f(x)` by
//! fixed-point iteration and sample frame one at the preimage.

use crate::flo::{read_flo, write_flo, FloError};
use crate::imageio::{read_ppm, write_ppm, ImageError};
use crate::tensor::{DType, Tensor};
use rand::Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub enum MotionKind {
    /// Uniform translation by (u, v) pixels.
    Constant(f64, f64),
    /// Global affine map drawn near the identity.
    Affine,
    /// Smooth low-frequency sinusoidal field, a few pixels in amplitude.
    Smooth,
}

pub struct SyntheticSample {
    pub image1: Tensor,
    pub image2: Tensor,
    pub gt_flow: Tensor,
    pub valid: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Flow(#[from] FloError),
    #[error("{0}")]
    Dir(String),
}

fn sample_zero(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                acc += wy * wx * data[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

fn sample_clamped(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    sample_zero(
        data,
        h,
        w,
        y.clamp(0.0, (h - 1) as f64),
        x.clamp(0.0, (w - 1) as f64),
    )
}

/// Two passes of an edge-clamped 3x3 box blur, in place.
fn blur(data: &mut Vec<f64>, h: usize, w: usize) {
    for _ in 0..2 {
        let src = data.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += src[yy * w + xx];
                    }
                }
                data[y * w + x] = acc / 9.0;
            }
        }
    }
}

/// One texture channel: gentle sinusoids (wavelength >= 16 px so bilinear
/// resampling stays accurate) plus low-amplitude blurred noise, rescaled to
/// [0.1, 0.9].
fn texture_channel(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut chan = vec![0.0f64; h * w];
    for _ in 0..4 {
        let kx = rng.gen_range(-1.0..1.0) / 16.0;
        let ky = rng.gen_range(-1.0..1.0) / 16.0;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.4..1.0);
        for y in 0..h {
            for x in 0..w {
                chan[y * w + x] += amp
                    * (std::f64::consts::TAU * (kx * x as f64 + ky * y as f64) + phase).sin();
            }
        }
    }
    let mut noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    blur(&mut noise, h, w);
    for (c, n) in chan.iter_mut().zip(&noise) {
        *c += 0.8 * n;
    }
    let lo = chan.iter().cloned().fold(f64::MAX, f64::min);
    let hi = chan.iter().cloned().fold(f64::MIN, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    chan.iter_mut()
        .for_each(|c| *c = 0.1 + 0.8 * (*c - lo) / span);
    chan
}

fn motion_field(h: usize, w: usize, kind: MotionKind, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    match kind {
        MotionKind::Constant(cu, cv) => {
            u.fill(cu);
            v.fill(cv);
        }
        MotionKind::Affine => {
            let a: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-0.02..0.02));
            let (bx, by) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    u[y * w + x] = a[0] * px + a[1] * py + bx;
                    v[y * w + x] = a[2] * px + a[3] * py + by;
                }
            }
        }
        MotionKind::Smooth => {
            for field in [&mut u, &mut v] {
                for _ in 0..2 {
                    let kx = rng.gen_range(-1.0..1.0) / (w as f64);
                    let ky = rng.gen_range(-1.0..1.0) / (h as f64);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let amp = rng.gen_range(0.3..1.0);
                    for y in 0..h {
                        for x in 0..w {
                            field[y * w + x] += amp
                                * (std::f64::consts::TAU * (kx * x as f64 + ky * y as f64)
                                    + phase)
                                    .sin();
                        }
                    }
                }
            }
        }
    }
    (u, v)
}

/// Generates one sample. `noise_std > 0` adds Gaussian pixel noise to frame
/// two (breaking exact warp identity, as real data would).
pub fn synth_pair(
    h: usize,
    w: usize,
    rng: &mut impl Rng,
    kind: MotionKind,
    noise_std: f64,
    dtype: DType,
) -> SyntheticSample {
    assert!(h % 8 == 0 && w % 8 == 0, "synthetic dims must be multiples of 8");
    let n = h * w;
    let channels: Vec<Vec<f64>> = (0..3).map(|_| texture_channel(h, w, rng)).collect();
    let (u, v) = motion_field(h, w, kind, rng);

    let zero_motion = u.iter().chain(&v).all(|&f| f == 0.0);
    let mut img2 = vec![0.0f64; 3 * n];
    if zero_motion {
        for (c, chan) in channels.iter().enumerate() {
            img2[c * n..(c + 1) * n].copy_from_slice(chan);
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                // Invert x -> x + f(x) by fixed-point iteration; the flow is
                // sampled with edge clamping so iterates stay well-defined.
                let (ty, tx) = (y as f64, x as f64);
                let (mut sy, mut sx) = (ty, tx);
                for _ in 0..12 {
                    let fu = sample_clamped(&u, h, w, sy, sx);
                    let fv = sample_clamped(&v, h, w, sy, sx);
                    sx = tx - fu;
                    sy = ty - fv;
                }
                for (c, chan) in channels.iter().enumerate() {
                    img2[c * n + y * w + x] = sample_zero(chan, h, w, sy, sx);
                }
            }
        }
    }
    if noise_std > 0.0 {
        let noise = crate::layers::normal(rng, 0.0, noise_std, 3 * n);
        for (p, nz) in img2.iter_mut().zip(noise) {
            *p = (*p + nz).clamp(0.0, 1.0);
        }
    }

    let valid: Vec<bool> = (0..n)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let tx = x as f64 + u[i];
            let ty = y as f64 + v[i];
            tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64
        })
        .collect();

    let mut img1 = Vec::with_capacity(3 * n);
    channels.into_iter().for_each(|c| img1.extend(c));
    let mut flow = u;
    flow.extend(v);
    SyntheticSample {
        image1: Tensor::new(img1, &[3, h, w], dtype).expect("sized above"),
        image2: Tensor::new(img2, &[3, h, w], dtype).expect("sized above"),
        gt_flow: Tensor::new(flow, &[2, h, w], dtype).expect("sized above"),
        valid,
    }
}

/// Recomputes the validity mask of a flow field (target lands in frame).
pub fn valid_mask(flow: &Tensor) -> Vec<bool> {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let n = h * w;
    let d = flow.data();
    (0..n)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let tx = x as f64 + d[i];
            let ty = y as f64 + d[n + i];
            tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64
        })
        .collect()
}

fn sample_paths(dir: &Path, idx: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{idx:04}_img1.ppm")),
        dir.join(format!("sample_{idx:04}_img2.ppm")),
        dir.join(format!("sample_{idx:04}_flow.flo")),
    )
}

pub fn write_sample(dir: &Path, idx: usize, s: &SyntheticSample) -> Result<(), DataError> {
    let (p1, p2, pf) = sample_paths(dir, idx);
    write_ppm(&p1, &s.image1)?;
    write_ppm(&p2, &s.image2)?;
    write_flo(&pf, &s.gt_flow)?;
    Ok(())
}

/// Loads a triplet written by `write_sample`; validity is recomputed from
/// the flow.
pub fn read_sample(dir: &Path, idx: usize, dtype: DType) -> Result<SyntheticSample, DataError> {
    let (p1, p2, pf) = sample_paths(dir, idx);
    let image1 = read_ppm(&p1)?.to_dtype(dtype);
    let image2 = read_ppm(&p2)?.to_dtype(dtype);
    let gt_flow = read_flo(&pf)?.to_dtype(dtype);
    let valid = valid_mask(&gt_flow);
    Ok(SyntheticSample {
        image1,
        image2,
        gt_flow,
        valid,
    })
}

/// Indices of the complete sample triplets present in `dir`, ascending.
pub fn list_samples(dir: &Path) -> Result<Vec<usize>, DataError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| DataError::Dir(format!("{}: {e}", dir.display())))?;
    let mut idxs = Vec::new();
    for entry in entries {
        let name = entry
            .map_err(|e| DataError::Dir(e.to_string()))?
            .file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("sample_") {
            if let Some(num) = rest.strip_suffix("_flow.flo") {
                if let Ok(idx) = num.parse::<usize>() {
                    let (p1, p2, _) = sample_paths(dir, idx);
                    if p1.exists() && p2.exists() {
                        idxs.push(idx);
                    }
                }
            }
        }
    }
    idxs.sort_unstable();
    Ok(idxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_translation_has_exact_flow_and_valid_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = synth_pair(32, 32, &mut rng, MotionKind::Constant(3.0, 4.0), 0.0, DType::F64);
        let d = s.gt_flow.data();
        assert!(d[..1024].iter().all(|&u| u == 3.0));
        assert!(d[1024..].iter().all(|&v| v == 4.0));
        for i in 0..1024 {
            let (y, x) = (i / 32, i % 32);
            assert_eq!(s.valid[i], x + 3 <= 31 && y + 4 <= 31, "pixel ({y},{x})");
        }
    }

    #[test]
    fn zero_motion_reproduces_frame_one_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = synth_pair(16, 16, &mut rng, MotionKind::Constant(0.0, 0.0), 0.0, DType::F32);
        assert_eq!(s.image1.data(), s.image2.data());
    }

    #[test]
    fn warp_consistency_on_interior_pixels() {
        for (seed, kind) in [
            (7, MotionKind::Constant(1.7, -2.3)),
            (8, MotionKind::Affine),
            (9, MotionKind::Smooth),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (48, 48);
            let s = synth_pair(h, w, &mut rng, kind, 0.0, DType::F64);
            let n = h * w;
            let flow = s.gt_flow.data();
            let i1 = s.image1.data();
            let i2 = s.image2.data();
            let mut worst = 0.0f64;
            let mut checked = 0;
            for y in 4..h - 4 {
                for x in 4..w - 4 {
                    let i = y * w + x;
                    let (tx, ty) = (x as f64 + flow[i], y as f64 + flow[n + i]);
                    if tx < 4.0 || tx > (w - 5) as f64 || ty < 4.0 || ty > (h - 5) as f64 {
                        continue;
                    }
                    checked += 1;
                    for c in 0..3 {
                        let got = sample_zero(&i2[c * n..(c + 1) * n], h, w, ty, tx);
                        worst = worst.max((got - i1[c * n + i]).abs());
                    }
                }
            }
            assert!(checked > 500, "too few interior pixels for kind {kind:?}");
            assert!(worst < 2e-2, "kind {kind:?}: worst interior error {worst}");
        }
    }

    #[test]
    fn same_seed_reproduces_sample_exactly() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            synth_pair(16, 24, &mut rng, MotionKind::Smooth, 0.01, DType::F32)
        };
        let (a, b) = (make(), make());
        assert_eq!(a.image1.data(), b.image1.data());
        assert_eq!(a.image2.data(), b.image2.data());
        assert_eq!(a.gt_flow.data(), b.gt_flow.data());
        assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn texture_has_spread_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chan = texture_channel(32, 32, &mut rng);
        let lo = chan.iter().cloned().fold(f64::MAX, f64::min);
        let hi = chan.iter().cloned().fold(f64::MIN, f64::max);
        assert!(lo >= 0.1 - 1e-12 && hi <= 0.9 + 1e-12);
        assert!(hi - lo > 0.5, "texture should span most of its range");
        let mean = chan.iter().sum::<f64>() / chan.len() as f64;
        let var = chan.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / chan.len() as f64;
        assert!(var > 0.005, "texture variance {var} too small");
    }

    #[test]
    fn dataset_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = synth_pair(16, 16, &mut rng, MotionKind::Constant(2.0, 1.0), 0.0, DType::F32);
        write_sample(dir.path(), 3, &s).unwrap();
        assert_eq!(list_samples(dir.path()).unwrap(), vec![3]);
        let back = read_sample(dir.path(), 3, DType::F32).unwrap();
        // Flow survives bitwise; images within one 8-bit quantization step.
        assert_eq!(back.gt_flow.data(), s.gt_flow.data());
        assert_eq!(back.valid, s.valid);
        for (a, b) in s.image1.data().iter().zip(back.image1.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
