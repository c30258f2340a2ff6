//! Image-feature and context encoders: three stride-2 conv blocks with
//! instance normalization, mapping `[3, H, W]` images (values in [0,1]) to
//! 1/8-resolution feature maps. Both encoders share the skeleton but own
//! separate parameters, and either can be frozen by name prefix.

use rand::Rng;

use crate::layers::Conv2d;
use crate::params::{Forward, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

const IN_EPS: f64 = 1e-5;

/// Per-channel spatial standardization of `[B, C, H, W]`.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(TensorError::Shape(format!(
            "instance_norm expects [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let mean = x.mean_axes(&[2, 3], true)?;
    let centered = x.sub(&mean)?;
    let var = centered.mul(&centered)?.mean_axes(&[2, 3], true)?;
    centered.div(&var.add_scalar(IN_EPS)?.sqrt()?)
}

pub struct ConvEncoder {
    blocks: Vec<Conv2d>,
    out_dim: usize,
}

impl ConvEncoder {
    /// Channel ramp 3 -> 32 -> 64 -> `out_dim`, each stage halving resolution.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        out_dim: usize,
    ) -> Result<ConvEncoder> {
        let dims = [3, 32, 64, out_dim];
        let mut blocks = Vec::new();
        for i in 0..3 {
            blocks.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.block{i}"),
                dims[i],
                dims[i + 1],
                3,
                2,
                1,
            )?);
        }
        Ok(ConvEncoder { blocks, out_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `[3, H, W]` or `[B, 3, H, W]` with H, W multiples of 8 ->
    /// `[out, H/8, W/8]` (resp. batched). Input values are treated as [0,1]
    /// intensities and shifted to [-1,1] before the first conv.
    pub fn apply(&self, fw: &Forward, image: &Tensor) -> Result<Tensor> {
        let single = image.rank() == 3;
        let x = if single {
            let s = image.shape().to_vec();
            image.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            image.clone()
        };
        let s = x.shape().to_vec();
        if x.rank() != 4 || s[1] != 3 {
            return Err(TensorError::Shape(format!(
                "encoder expects [3,H,W] or [B,3,H,W], got {:?}",
                image.shape()
            )));
        }
        if s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(TensorError::Invalid(format!(
                "encoder input {}x{} must have sides divisible by 8",
                s[2], s[3]
            )));
        }
        let mut y = x.scale(2.0)?.add_scalar(-1.0)?;
        for block in &self.blocks {
            y = instance_norm(&block.apply(fw, &y)?)?.relu()?;
        }
        if single {
            let os = y.shape().to_vec();
            y = y.reshape(&[os[1], os[2], os[3]])?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::gradcheck::check_grads;
    use crate::tensor::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc(out_dim: usize) -> (ParamStore, ConvEncoder) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = ConvEncoder::new(&mut store, &mut rng, "enc", out_dim).unwrap();
        (store, e)
    }

    #[test]
    fn downsamples_by_eight() {
        let (store, e) = enc(32);
        let fw = Forward::new(&store, Mode::Inference);
        let img = Tensor::from_fn(&[3, 64, 64], DType::F64, |i| (i % 255) as f64 / 255.0);
        let y = e.apply(&fw, &img).unwrap();
        assert_eq!(y.shape(), &[32, 8, 8]);

        let batch = Tensor::from_fn(&[2, 3, 16, 24], DType::F64, |i| (i % 97) as f64 / 97.0);
        let yb = e.apply(&fw, &batch).unwrap();
        assert_eq!(yb.shape(), &[2, 32, 2, 3]);
    }

    #[test]
    fn rejects_non_multiple_of_8() {
        let (store, e) = enc(8);
        let fw = Forward::new(&store, Mode::Inference);
        let img = Tensor::zeros(&[3, 60, 64], DType::F64);
        assert!(e.apply(&fw, &img).is_err());
    }

    #[test]
    fn different_images_give_different_features() {
        let (store, e) = enc(16);
        let fw = Forward::new(&store, Mode::Inference);
        let a = Tensor::from_fn(&[3, 32, 32], DType::F64, |i| ((i * 31) % 100) as f64 / 100.0);
        let b = Tensor::from_fn(&[3, 32, 32], DType::F64, |i| ((i * 17) % 100) as f64 / 100.0);
        let fa = e.apply(&fw, &a).unwrap();
        let fb = e.apply(&fw, &b).unwrap();
        let linf = fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], DType::F64, |i| ((i * 13) % 23) as f64 * 0.7);
        let y = instance_norm(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let vals = &y.data()[(b * 3 + c) * 20..(b * 3 + c + 1) * 20];
                let mean: f64 = vals.iter().sum::<f64>() / 20.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gradients_flow_to_input() {
        let (store, e) = enc(4);
        let img: Vec<f64> = (0..3 * 16 * 16)
            .map(|i| ((i * 7) % 50) as f64 / 50.0)
            .collect();
        let res = check_grads("encoder", &[(&img, &[3, 16, 16][..])], 1e-5, 1e-3, |ins| {
            let fw = Forward::new(&store, Mode::Inference);
            e.apply(&fw, &ins[0])?.sum_all()
        })
        .unwrap();
        assert!(res.pass(), "{}: {}", res.name, res.max_rel_err);
    }

    #[test]
    fn frozen_encoder_records_nothing_on_tape() {
        let (mut store, e) = enc(8);
        for i in 0..store.len() {
            let id = store.iter().nth(i).map(|(id, _)| id).unwrap();
            store.set_trainable(id, false);
        }
        let fw = Forward::new(&store, Mode::Train);
        let img = Tensor::from_fn(&[3, 16, 16], DType::F64, |i| (i % 10) as f64 / 10.0);
        let y = e.apply(&fw, &img).unwrap();
        assert!(!y.requires_grad());
        assert!(fw.tape().is_empty());
    }
}
