//! Adam with linear warmup and global gradient-norm clipping.

use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_slots: usize) -> Adam {
        Adam {
            cfg,
            m: vec![None; num_slots],
            v: vec![None; num_slots],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate for step `t` (1-based): linear ramp over the warmup
    /// window, constant afterwards.
    fn lr_at(&self, t: usize) -> f64 {
        if self.cfg.warmup_steps > 0 && t <= self.cfg.warmup_steps {
            self.cfg.lr * t as f64 / self.cfg.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }

    /// Applies one update from per-slot gradients (aligned with the store's
    /// registration order). Slots without gradients are left untouched.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        slot_grads: &[Option<Vec<f64>>],
    ) -> Result<StepStats> {
        if slot_grads.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "gradient list has {} slots, store has {}",
                slot_grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);

        let mut sq_sum = 0.0;
        for g in slot_grads.iter().flatten() {
            for &x in g {
                sq_sum += x * x;
            }
        }
        let grad_norm = sq_sum.sqrt();
        let clipped = self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm;
        let scale = if clipped {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
        let dtype = store.dtype();

        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.iter().enumerate() {
            let Some(g) = &slot_grads[i] else { continue };
            let value = store.get(*id);
            let n = value.numel();
            if g.len() != n {
                return Err(TensorError::Invalid(format!(
                    "gradient for {} has {} values, parameter has {}",
                    store.name(*id),
                    g.len(),
                    n
                )));
            }
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            let mut data = value.data().to_vec();
            for j in 0..n {
                let gj = g[j] * scale;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] = dtype.quantize(data[j] - lr * mh / (vh.sqrt() + self.cfg.eps));
            }
            let shape = value.shape().to_vec();
            store.set_value(*id, Tensor::new(data, &shape, dtype)?)?;
        }

        Ok(StepStats {
            lr,
            grad_norm,
            clipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Forward, Mode};
    use crate::tensor::tape::backward;
    use crate::tensor::DType;

    fn quad_store() -> (ParamStore, crate::params::ParamId) {
        let mut store = ParamStore::new(DType::F64);
        let id = store.register("x", vec![5.0, -3.0], &[2], true).unwrap();
        (store, id)
    }

    fn quad_grads(store: &ParamStore, id: crate::params::ParamId) -> Vec<Option<Vec<f64>>> {
        let fw = Forward::new(store, Mode::Train);
        let x = fw.param(id);
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        fw.slot_grads(&grads)
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut store, id) = quad_store();
        let cfg = AdamConfig {
            lr: 0.1,
            warmup_steps: 0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, store.len());
        for _ in 0..300 {
            let g = quad_grads(&store, id);
            opt.apply(&mut store, &g).unwrap();
        }
        for &x in store.get(id).data() {
            assert!(x.abs() < 1e-3, "did not converge: {x}");
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = AdamConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamConfig::default()
        };
        let opt = Adam::new(cfg, 0);
        assert_eq!(opt.lr_at(1), 0.25);
        assert_eq!(opt.lr_at(2), 0.5);
        assert_eq!(opt.lr_at(4), 1.0);
        assert_eq!(opt.lr_at(5), 1.0);
        assert_eq!(opt.lr_at(500), 1.0);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // With bias correction, the very first Adam step moves each
        // coordinate by lr * sign(g) (up to eps), independent of |g|.
        let (mut store, id) = quad_store();
        let cfg = AdamConfig {
            lr: 0.01,
            warmup_steps: 0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, store.len());
        let g = quad_grads(&store, id); // g = 2x = [10, -6]
        opt.apply(&mut store, &g).unwrap();
        let got = store.get(id).data().to_vec();
        for (x0, (x1, g0)) in [5.0, -3.0].iter().zip(got.iter().zip([10.0f64, -6.0])) {
            let expect = x0 - 0.01 * g0 / (g0.abs() + 1e-8);
            assert!((x1 - expect).abs() < 1e-6, "{x1} vs {expect}");
        }
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let (mut store, id) = quad_store();
        let cfg = AdamConfig {
            lr: 0.1,
            warmup_steps: 0,
            clip_norm: 1.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, store.len());
        let g = vec![Some(vec![300.0, 400.0])];
        let stats = opt.apply(&mut store, &g).unwrap();
        assert!(stats.clipped);
        assert!((stats.grad_norm - 500.0).abs() < 1e-9);
        let _ = id;
    }

    #[test]
    fn f32_store_keeps_params_quantized() {
        let mut store = ParamStore::new(DType::F32);
        let id = store
            .register("x", vec![0.1234567890123], &[1], true)
            .unwrap();
        let mut opt = Adam::new(AdamConfig::default(), store.len());
        opt.apply(&mut store, &[Some(vec![0.3])]).unwrap();
        let x = store.get(id).data()[0];
        assert_eq!(x, x as f32 as f64);
    }
}
