//! Supervised training and masked-pretraining loops with CSV metric logs.
//!
//! Both loops are deterministic given their seeds: data order is round-robin,
//! all sampling flows through one ChaCha stream, and the optimizer is
//! single-threaded, so rerunning a config reproduces the log byte for byte.

use crate::config::{MaskStrategy, PretrainSection, TrainSection};
use crate::metrics::{aepe, f1_all, sequence_loss, F1Mode, MetricError};
use crate::model::{FlowModel, CONTEXT_ENCODER_PREFIX, IMAGE_ENCODER_PREFIX};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Forward, Mode, ParamStore};
use crate::pretrain::{
    generate_block_masks, generate_random_masks, pretext_loss, pretext_predict, sample_pretext,
    MaskError,
};
use crate::synth::SyntheticSample;
use crate::tensor::tape::backward;
use crate::tensor::TensorError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}; aborting")]
    NonFinite { step: usize, loss: f64 },
    #[error("training setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// The loop-level guard behind the "abort with the step index" contract.
/// (Debug builds usually stop earlier: every op asserts its outputs finite.)
fn abort_on_non_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { step, loss })
    }
}

#[derive(Clone, Debug)]
pub struct SuperviseOptions {
    pub steps: usize,
    pub opt: AdamConfig,
    /// Per-iteration decay of the sequence loss.
    pub gamma: f64,
    /// Evaluate (and log a CSV row) every this many steps; 0 = final step only.
    pub eval_every: usize,
    /// Evaluate on at most this many leading corpus samples; 0 = all.
    pub eval_subset: usize,
    /// Stop once an evaluation AEPE drops below this.
    pub stop_at_aepe: Option<f64>,
    pub f1_mode: F1Mode,
}

impl SuperviseOptions {
    pub fn from_section(t: &TrainSection) -> SuperviseOptions {
        SuperviseOptions {
            steps: t.steps,
            opt: AdamConfig {
                lr: t.lr,
                warmup_steps: t.warmup_steps,
                clip_norm: t.clip_norm,
                ..AdamConfig::default()
            },
            gamma: t.gamma,
            eval_every: 100,
            eval_subset: 8,
            stop_at_aepe: None,
            f1_mode: F1Mode::Or,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub aepe: f64,
    pub f1: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    /// One training loss per executed step.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// `step,loss,aepe,f1_all` rows at the evaluation points.
    pub csv: String,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Mean final-iterate AEPE and F1-all over `samples`.
pub fn evaluate(
    store: &ParamStore,
    model: &FlowModel,
    samples: &[SyntheticSample],
    f1_mode: F1Mode,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(TrainError::Setup("evaluation needs >= 1 sample".into()));
    }
    let (mut a_sum, mut f_sum) = (0.0, 0.0);
    for s in samples {
        let fw = Forward::new(store, Mode::Inference);
        let flow = model
            .forward_flows(&fw, &s.image1, &s.image2)?
            .pop()
            .expect("decoder emits >= 1 iterate");
        a_sum += aepe(&flow, &s.gt_flow, &s.valid)?;
        f_sum += f1_all(&flow, &s.gt_flow, &s.valid, f1_mode)?;
    }
    let n = samples.len() as f64;
    Ok((a_sum / n, f_sum / n))
}

/// Standard supervised loop: forward all decoder iterates, weighted L1
/// sequence loss, clipped adaptive-moment update; round-robin over the
/// corpus. Aborts with the step index if the loss goes non-finite.
pub fn train_supervised(
    store: &mut ParamStore,
    model: &FlowModel,
    corpus: &[SyntheticSample],
    opts: &SuperviseOptions,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(TrainError::Setup("training corpus is empty".into()));
    }
    let mut adam = Adam::new(opts.opt.clone(), store.len());
    let mut csv = String::from("step,loss,aepe,f1_all\n");
    let mut losses = Vec::with_capacity(opts.steps);
    let mut evals = Vec::new();
    let mut stopped_early = false;

    for step in 1..=opts.steps {
        let sample = &corpus[(step - 1) % corpus.len()];
        let (loss, slot_grads) = {
            let fw = Forward::new(store, Mode::Train);
            let flows = model.forward_flows(&fw, &sample.image1, &sample.image2)?;
            let loss_t = sequence_loss(&flows, &sample.gt_flow, &sample.valid, opts.gamma)?;
            let loss = loss_t.item()?;
            abort_on_non_finite(loss, step)?;
            let grads = backward(&loss_t)?;
            (loss, fw.slot_grads(&grads))
        };
        adam.apply(store, &slot_grads)?;
        losses.push(loss);

        let due = opts.eval_every > 0 && step % opts.eval_every == 0;
        if due || step == opts.steps {
            let k = match opts.eval_subset {
                0 => corpus.len(),
                k => corpus.len().min(k),
            };
            let (a, f) = evaluate(store, model, &corpus[..k], opts.f1_mode)?;
            csv.push_str(&format!("{step},{loss},{a},{f}\n"));
            evals.push(EvalPoint {
                step,
                loss,
                aepe: a,
                f1: f,
            });
            if opts.stop_at_aepe.is_some_and(|t| a < t) {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainReport {
        steps_run: losses.len(),
        losses,
        evals,
        csv,
        stopped_early,
    })
}

#[derive(Debug)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// `step,loss` rows, one per step.
    pub csv: String,
}

/// Masked-autoencoding pretraining. The image feature encoder must be frozen
/// (the section validates this); its features and — unless configured
/// otherwise — the context features are computed once per corpus sample and
/// reused as constants, so every step trains only the cost encoder, decoder
/// query path, and reconstruction head.
pub fn pretrain_mcva(
    store: &mut ParamStore,
    model: &FlowModel,
    corpus: &[SyntheticSample],
    sect: &PretrainSection,
) -> Result<PretrainReport> {
    sect.validate().map_err(|e| TrainError::Setup(e.to_string()))?;
    let head = model
        .pretext_head
        .as_ref()
        .ok_or_else(|| TrainError::Setup("model was built without the reconstruction head".into()))?;
    if corpus.is_empty() {
        return Err(TrainError::Setup("pretraining corpus is empty".into()));
    }

    let frozen_img = store.set_trainable_prefix(IMAGE_ENCODER_PREFIX, false);
    if frozen_img == 0 {
        return Err(TrainError::Setup("no image-encoder parameters to freeze".into()));
    }
    if sect.freeze_context_encoder {
        store.set_trainable_prefix(CONTEXT_ENCODER_PREFIX, false);
    }

    let result = pretrain_loop(store, model, corpus, sect, head);

    // The trainable flags are a property of this loop, not of the store.
    store.set_trainable_prefix(IMAGE_ENCODER_PREFIX, true);
    if sect.freeze_context_encoder {
        store.set_trainable_prefix(CONTEXT_ENCODER_PREFIX, true);
    }
    result
}

fn pretrain_loop(
    store: &mut ParamStore,
    model: &FlowModel,
    corpus: &[SyntheticSample],
    sect: &PretrainSection,
    head: &crate::model::PretextHead,
) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sect.seed);

    // Frozen per-sample encodings, computed outside any training graph.
    let mut cache = Vec::with_capacity(corpus.len());
    for s in corpus {
        let fw = Forward::new(store, Mode::Inference);
        cache.push(model.encode_pair(&fw, &s.image1, &s.image2)?);
    }
    let (gh, gw) = (cache[0].maps.shape()[1], cache[0].maps.shape()[2]);
    let (lo, hi) = sect.block_bounds(gh.max(gw));

    let opt_cfg = AdamConfig {
        lr: sect.lr,
        warmup_steps: sect.warmup_steps,
        clip_norm: sect.clip_norm,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(opt_cfg, store.len());
    let mut csv = String::from("step,loss\n");
    let mut losses = Vec::with_capacity(sect.steps);

    for step in 1..=sect.steps {
        let idx = (step - 1) % corpus.len();
        let enc = &cache[idx];
        let masks = match sect.mask_strategy {
            MaskStrategy::Block => generate_block_masks(gh, gw, sect.mask_ratio, (lo, hi), &mut rng)?,
            MaskStrategy::Random => generate_random_masks(gh, gw, sect.mask_ratio, &mut rng)?,
        };
        let maps = masks.to_maps(store.dtype());
        let batch = sample_pretext(&enc.maps, &mut rng)?;

        let (loss, slot_grads) = {
            let fw = Forward::new(store, Mode::Train);
            let ctx = if sect.freeze_context_encoder {
                enc.ctx.clone()
            } else {
                model.context_encoder.apply(&fw, &corpus[idx].image1)?
            };
            let memory = model.cost_encoder.encode(&fw, &enc.maps, &ctx, Some(&maps))?;
            let pred = pretext_predict(&fw, &model.decoder, head, &enc.maps, &memory, &batch.centers)?;
            let loss_t = pretext_loss(&pred, &batch.targets, sect.normalize_side)?;
            let loss = loss_t.item()?;
            abort_on_non_finite(loss, step)?;
            let grads = backward(&loss_t)?;
            (loss, fw.slot_grads(&grads))
        };
        adam.apply(store, &slot_grads)?;
        csv.push_str(&format!("{step},{loss}\n"));
        losses.push(loss);
    }

    Ok(PretrainReport { losses, csv })
}
