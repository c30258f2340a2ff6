//! Flow-quality metrics and the supervised training loss.

use crate::tensor::{Result as TensorResult, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric undefined: no valid pixels")]
    EmptyValidSet,
    #[error("metric shape mismatch: {0}")]
    Shape(String),
}

/// How the two outlier conditions of F1-all combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    /// error > 3 px OR error > 5% of ground-truth magnitude (default).
    Or,
    /// error > 3 px AND error > 5% of ground-truth magnitude.
    And,
}

impl std::str::FromStr for F1Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "or" => Ok(F1Mode::Or),
            "and" => Ok(F1Mode::And),
            other => Err(format!("unknown f1 mode {other:?} (expected or|and)")),
        }
    }
}

fn check_fields(pred: &Tensor, gt: &Tensor, valid: &[bool]) -> std::result::Result<usize, MetricError> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 || pred.shape()[0] != 2 {
        return Err(MetricError::Shape(format!(
            "flow fields must both be [2, H, W], got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let n = pred.shape()[1] * pred.shape()[2];
    if valid.len() != n {
        return Err(MetricError::Shape(format!(
            "valid mask has {} entries for {} pixels",
            valid.len(),
            n
        )));
    }
    Ok(n)
}

/// Average end-point error: mean L2 distance over valid pixels.
pub fn aepe(pred: &Tensor, gt: &Tensor, valid: &[bool]) -> std::result::Result<f64, MetricError> {
    let n = check_fields(pred, gt, valid)?;
    let (p, g) = (pred.data(), gt.data());
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if valid[i] {
            sum += (p[i] - g[i]).hypot(p[n + i] - g[n + i]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyValidSet);
    }
    Ok(sum / count as f64)
}

/// Percentage of valid pixels whose end-point error is an outlier.
pub fn f1_all(
    pred: &Tensor,
    gt: &Tensor,
    valid: &[bool],
    mode: F1Mode,
) -> std::result::Result<f64, MetricError> {
    let n = check_fields(pred, gt, valid)?;
    let (p, g) = (pred.data(), gt.data());
    let mut outliers = 0usize;
    let mut count = 0usize;
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        count += 1;
        let err = (p[i] - g[i]).hypot(p[n + i] - g[n + i]);
        let rel = 0.05 * g[i].hypot(g[n + i]);
        let out = match mode {
            F1Mode::Or => err > 3.0 || err > rel,
            F1Mode::And => err > 3.0 && err > rel,
        };
        if out {
            outliers += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyValidSet);
    }
    Ok(100.0 * outliers as f64 / count as f64)
}

/// Exponentially weighted sum of masked L1 losses over the decoder's
/// iterates: sum_i gamma^(N-1-i) * mean_valid |pred_i - gt|.
/// Differentiable in the predictions; ground truth and mask are constants.
pub fn sequence_loss(
    preds: &[Tensor],
    gt: &Tensor,
    valid: &[bool],
    gamma: f64,
) -> TensorResult<Tensor> {
    if preds.is_empty() {
        return Err(TensorError::Invalid("sequence loss needs >= 1 prediction".into()));
    }
    let n = gt.shape()[1] * gt.shape()[2];
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(TensorError::Invalid("sequence loss: no valid pixels".into()));
    }
    let mask_data: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::new(mask_data, &[1, gt.shape()[1], gt.shape()[2]], gt.dtype())?;
    debug_assert_eq!(mask.data().len(), n);
    let total = preds.len();
    let mut loss: Option<Tensor> = None;
    for (i, pred) in preds.iter().enumerate() {
        let weight = gamma.powi((total - 1 - i) as i32);
        let term = pred
            .sub(gt)?
            .abs()?
            .mul(&mask)?
            .sum_all()?
            .scale(weight / count as f64)?;
        loss = Some(match loss {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(loss.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(data: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::new(data, &[2, h, w], DType::F64).unwrap()
    }

    #[test]
    fn uniform_offset_three_four_gives_exactly_five() {
        let gt = field(vec![0.0; 2 * 6 * 6], 6, 6);
        let mut p = vec![3.0; 36];
        p.extend(vec![4.0; 36]);
        let pred = field(p, 6, 6);
        let valid = vec![true; 36];
        assert_eq!(aepe(&pred, &gt, &valid).unwrap(), 5.0);
    }

    #[test]
    fn aepe_matches_loop_oracle_and_zero_on_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 40).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let gt_data: Vec<f64> = (0..2 * 40).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let pred = field(data.clone(), 5, 8);
        let gt = field(gt_data.clone(), 5, 8);
        let valid: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();

        let mut want = 0.0;
        let mut cnt = 0;
        for i in 0..40 {
            if valid[i] {
                let du = data[i] - gt_data[i];
                let dv = data[40 + i] - gt_data[40 + i];
                want += (du * du + dv * dv).sqrt();
                cnt += 1;
            }
        }
        want /= cnt as f64;
        assert!((aepe(&pred, &gt, &valid).unwrap() - want).abs() < 1e-12);
        assert_eq!(aepe(&gt, &gt, &valid).unwrap(), 0.0);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let gt = field(vec![0.0; 8], 2, 2);
        let valid = vec![false; 4];
        assert!(matches!(
            aepe(&gt, &gt, &valid),
            Err(MetricError::EmptyValidSet)
        ));
        assert!(matches!(
            f1_all(&gt, &gt, &valid, F1Mode::Or),
            Err(MetricError::EmptyValidSet)
        ));
    }

    #[test]
    fn f1_modes_follow_their_conditions() {
        // gt (10,0) vs pred (14,0): error 4 > 3 and 4 > 0.5 -> outlier both modes.
        let gt = field(vec![10.0, 0.0], 1, 1);
        let pred = field(vec![14.0, 0.0], 1, 1);
        assert_eq!(f1_all(&pred, &gt, &[true], F1Mode::Or).unwrap(), 100.0);
        assert_eq!(f1_all(&pred, &gt, &[true], F1Mode::And).unwrap(), 100.0);

        // gt (100,0) vs pred (102,0): error 2 <= 3 and 2 <= 5 -> inlier both modes.
        let gt = field(vec![100.0, 0.0], 1, 1);
        let pred = field(vec![102.0, 0.0], 1, 1);
        assert_eq!(f1_all(&pred, &gt, &[true], F1Mode::Or).unwrap(), 0.0);
        assert_eq!(f1_all(&pred, &gt, &[true], F1Mode::And).unwrap(), 0.0);

        // gt (2,0) vs pred (2.2,0): error 0.2 <= 3 but 0.2 > 0.1 -> outlier
        // only in "or" mode.
        let gt = field(vec![2.0, 0.0], 1, 1);
        let pred = field(vec![2.2, 0.0], 1, 1);
        assert_eq!(f1_all(&pred, &gt, &[true], F1Mode::Or).unwrap(), 100.0);
        assert_eq!(f1_all(&pred, &gt, &[true], F1Mode::And).unwrap(), 0.0);
    }

    #[test]
    fn half_outliers_give_fifty_percent() {
        let gt = field(vec![0.0; 2 * 4], 2, 2);
        let pred = field(vec![4.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 2);
        assert_eq!(f1_all(&pred, &gt, &[true; 4], F1Mode::Or).unwrap(), 50.0);
    }

    #[test]
    fn f1_matches_brute_force_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let n = h * w;
            let p: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let g: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
            if valid.iter().all(|v| !v) {
                continue;
            }
            let pred = field(p.clone(), h, w);
            let gt = field(g.clone(), h, w);
            for mode in [F1Mode::Or, F1Mode::And] {
                let brute = {
                    let idx: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
                    let outlier = |i: usize| {
                        let e = ((p[i] - g[i]).powi(2) + (p[n + i] - g[n + i]).powi(2)).sqrt();
                        let t = 0.05 * (g[i].powi(2) + g[n + i].powi(2)).sqrt();
                        match mode {
                            F1Mode::Or => e > 3.0 || e > t,
                            F1Mode::And => e > 3.0 && e > t,
                        }
                    };
                    100.0 * idx.iter().filter(|&&i| outlier(i)).count() as f64 / idx.len() as f64
                };
                let got = f1_all(&pred, &gt, &valid, mode).unwrap();
                assert!((got - brute).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sequence_loss_weights_and_masking() {
        let gt = field(vec![0.0; 2 * 4], 2, 2);
        let one = field(vec![1.0; 2 * 4], 2, 2);
        let valid = vec![true; 4];

        // Single prediction: plain masked L1 (|1|+|1| per pixel, mean over 4).
        let l1 = sequence_loss(&[one.clone()], &gt, &valid, 0.8).unwrap();
        assert!((l1.item().unwrap() - 2.0).abs() < 1e-12);

        // Four identical predictions with gamma 0.8: weights sum to
        // 0.512 + 0.64 + 0.8 + 1.0 = 2.952.
        let preds = vec![one.clone(), one.clone(), one.clone(), one.clone()];
        let l4 = sequence_loss(&preds, &gt, &valid, 0.8).unwrap();
        assert!((l4.item().unwrap() - 2.0 * 2.952).abs() < 1e-12);

        // Perfect predictions give exactly zero.
        let l0 = sequence_loss(&[gt.clone()], &gt, &valid, 0.8).unwrap();
        assert_eq!(l0.item().unwrap(), 0.0);

        // Invalid pixels are excluded: error only on a masked-out pixel.
        let mut p = vec![0.0; 8];
        p[0] = 100.0;
        let masked = sequence_loss(
            &[field(p, 2, 2)],
            &gt,
            &[false, true, true, true],
            0.8,
        )
        .unwrap();
        assert_eq!(masked.item().unwrap(), 0.0);
    }
}
