//! Full model assembly: feature/context encoders, all-pairs cost volume,
//! cost-memory encoder, and the recurrent decoder, with an optional
//! patch-reconstruction head used only during pretraining.

use rand::Rng;

use crate::config::{CostScale, ModelConfig};
use crate::costencoder::{CostEncoder, MaskMaps};
use crate::costvolume::build_cost_volume;
use crate::decoder::FlowDecoder;
use crate::encoders::ConvEncoder;
use crate::layers::Linear;
use crate::params::{Forward, ParamStore};
use crate::tensor::{Result, Tensor};

/// Parameter-name prefix of the reconstruction head; everything under it is
/// dropped when a pretrained checkpoint loads into the plain flow model.
pub const HEAD_PREFIX: &str = "pretext.head";
pub const IMAGE_ENCODER_PREFIX: &str = "feature";
pub const CONTEXT_ENCODER_PREFIX: &str = "context";

/// 3-layer MLP (D -> D -> D -> 225) decoding a cost feature into a
/// flattened 15x15 target patch.
pub struct PretextHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl PretextHead {
    pub const OUT: usize = 15 * 15;

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Result<PretextHead> {
        Ok(PretextHead {
            fc1: Linear::new(store, rng, &format!("{HEAD_PREFIX}.fc1"), d, d, true)?,
            fc2: Linear::new(store, rng, &format!("{HEAD_PREFIX}.fc2"), d, d, true)?,
            fc3: Linear::new(store, rng, &format!("{HEAD_PREFIX}.fc3"), d, Self::OUT, true)?,
        })
    }

    pub fn apply(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let x = self.fc1.apply(fw, x)?.relu()?;
        let x = self.fc2.apply(fw, &x)?.relu()?;
        self.fc3.apply(fw, &x)
    }
}

/// Frozen-encoder products for one image pair: scaled cost maps and the
/// source image's context features.
pub struct EncodedPair {
    /// `[H*W, H, W]` cost maps at 1/8 resolution.
    pub maps: Tensor,
    /// `[Dc, H, W]` context features of frame one.
    pub ctx: Tensor,
}

pub struct FlowModel {
    pub feature_encoder: ConvEncoder,
    pub context_encoder: ConvEncoder,
    pub cost_encoder: CostEncoder,
    pub decoder: FlowDecoder,
    pub pretext_head: Option<PretextHead>,
    cost_scale: f64,
    img_h: usize,
    img_w: usize,
}

impl FlowModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        with_head: bool,
    ) -> Result<FlowModel> {
        let feature_encoder =
            ConvEncoder::new(store, rng, IMAGE_ENCODER_PREFIX, cfg.feat_dim)?;
        let context_encoder =
            ConvEncoder::new(store, rng, CONTEXT_ENCODER_PREFIX, cfg.ctx_dim)?;
        let cost_encoder = CostEncoder::new(store, rng, "cost", cfg)?;
        let decoder = FlowDecoder::new(store, rng, "decoder", cfg)?;
        let pretext_head = if with_head {
            Some(PretextHead::new(store, rng, cfg.latent_dim)?)
        } else {
            None
        };
        let cost_scale = match cfg.cost_scale {
            CostScale::Normalized => 1.0 / (cfg.feat_dim as f64).sqrt(),
            CostScale::Unit => 1.0,
        };
        Ok(FlowModel {
            feature_encoder,
            context_encoder,
            cost_encoder,
            decoder,
            pretext_head,
            cost_scale,
            img_h: cfg.img_h,
            img_w: cfg.img_w,
        })
    }

    pub fn cost_scale(&self) -> f64 {
        self.cost_scale
    }

    /// Runs both frozen-or-not encoders and builds the cost maps.
    pub fn encode_pair(&self, fw: &Forward, img1: &Tensor, img2: &Tensor) -> Result<EncodedPair> {
        let fs = self.feature_encoder.apply(fw, img1)?;
        let ft = self.feature_encoder.apply(fw, img2)?;
        let volume = build_cost_volume(&fs, &ft, self.cost_scale)?;
        let ctx = self.context_encoder.apply(fw, img1)?;
        Ok(EncodedPair {
            maps: volume.maps()?,
            ctx,
        })
    }

    /// Cost maps + context -> cost memory `[H*W, K, D]`; masks select the
    /// pretraining tokenization path.
    pub fn cost_memory(
        &self,
        fw: &Forward,
        enc: &EncodedPair,
        masks: Option<&MaskMaps>,
    ) -> Result<Tensor> {
        self.cost_encoder.encode(fw, &enc.maps, &enc.ctx, masks)
    }

    /// Full supervised forward: all decoder iterates at image resolution.
    pub fn forward_flows(&self, fw: &Forward, img1: &Tensor, img2: &Tensor) -> Result<Vec<Tensor>> {
        let enc = self.encode_pair(fw, img1, img2)?;
        let memory = self.cost_memory(fw, &enc, None)?;
        self.decoder.run(fw, &enc.maps, &memory, &enc.ctx)
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.img_h, self.img_w)
    }
}
