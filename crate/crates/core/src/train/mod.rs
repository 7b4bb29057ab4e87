//! Losses, optimiser, the two-stage training loop, robustness sweeps and
//! ablation runs.
//!
//! Every random draw in training and evaluation comes from a stream keyed
//! by `(seed, purpose, ids…)`, so results do not depend on thread count or
//! iteration order. Per-sample gradients are reduced in batch order.

pub mod ablation;
pub mod eval;
mod loss;
mod optim;

pub use ablation::{ablation_from_pretrained, ablation_run, pretrain_run, AblationConfig, AblationOutcome, AblationRow, AblationTable, MeanStd};
pub use eval::{
    perturb_seed, robustness_sweep, write_records_jsonl, EvalRecord, Labeled, RobustnessTable, SegModel, SweepConfig,
    SweepOutcome, TableCell, TableRow,
};
pub use loss::{dice, seg_loss, soft_dice_loss, DICE_SMOOTH};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamW};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    object_radius, perturb_box, perturb_point, splitmix64, Mask, Prompt, PromptKind, Sample,
};
use crate::error::{Error, Result};
use crate::model::{decode, encode_image, encode_prompts, DecoderVariant, FeatureCache, Model, TRUNK_SCOPES};
use crate::params::{FreezeSet, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder, prompt encoder, two-way layer and head from scratch, perfect prompts.
    Pretrain,
    /// Frozen trunk; decoder extensions trained on mixed perfect/perturbed prompts.
    Safeclick,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub variant: DecoderVariant,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Frozen scopes; `None` picks the stage default.
    pub freeze: Option<FreezeSet>,
    /// Share of second-stage prompts that are perturbed.
    pub perturbed_fraction: f64,
    /// Cap on validation samples per epoch.
    pub max_val_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Safeclick,
            variant: DecoderVariant::SafeClick,
            lr: 1e-4,
            batch_size: 8,
            epochs: 20,
            optimizer: AdamW::default(),
            seed: 0,
            freeze: None,
            perturbed_fraction: 0.5,
            max_val_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        TrainConfig { stage: Stage::Pretrain, variant: DecoderVariant::Baseline, lr: 1e-3, seed, ..Default::default() }
    }

    pub fn stage2(variant: DecoderVariant, seed: u64) -> Self {
        TrainConfig { variant, seed, ..Default::default() }
    }

    pub fn effective_freeze(&self) -> FreezeSet {
        match (&self.freeze, self.stage) {
            (Some(f), _) => f.clone(),
            (None, Stage::Pretrain) => FreezeSet::none(),
            (None, Stage::Safeclick) => FreezeSet::new(["encoder", "prompt", "e3"]),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.perturbed_fraction) {
            return Err(Error::invalid("learning rate must be nonnegative and perturbed fraction in [0, 1]"));
        }
        Ok(())
    }
}

/// Samples plus the index sets used for training and validation.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub samples: &'a [Sample],
    pub train: &'a [usize],
    pub val: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    pub variant: DecoderVariant,
    pub seed: u64,
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_dice: f64,
    pub lr: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
}

/// Second-stage starting point: fresh `variant` parameters at `seed` with
/// the trunk copied from `pretrained`.
pub fn stage2_init(pretrained: &Model, variant: DecoderVariant, seed: u64) -> Result<Model> {
    let mut model = Model::init(pretrained.config.clone(), variant, seed)?;
    let trunk: ParamStore = pretrained
        .params
        .iter()
        .filter(|(name, _)| TRUNK_SCOPES.iter().any(|s| crate::params::in_scope(name, s)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for scope in TRUNK_SCOPES {
        if !trunk.has_prefix(scope) {
            return Err(Error::ConfigMismatch(format!("pretrained model has no `{scope}` parameters")));
        }
    }
    model.params.overlay(&trunk)?;
    Ok(model)
}

const TAG_SHUFFLE: u64 = 1;
const TAG_PROMPT: u64 = 2;
const TAG_VAL: u64 = 3;

/// Independent random stream for `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ a) ^ b))
}

/// Prompt drawn for one training or validation visit: point or box with
/// equal odds; in the second stage, perturbed with probability
/// `perturbed_fraction` at a level uniform in `[0, 1]` (points) or
/// `[0.5, 1.5]` (boxes).
pub fn training_prompt(sample: &Sample, stage: Stage, perturbed_fraction: f64, rng: &mut impl Rng) -> Result<Prompt> {
    let kind = if rng.gen_bool(0.5) { PromptKind::Point } else { PromptKind::Box };
    let perfect = sample.perfect_prompt(kind)?;
    if stage == Stage::Pretrain || !rng.gen_bool(perturbed_fraction) {
        return Ok(perfect);
    }
    match kind {
        PromptKind::Point => {
            let q = rng.gen_range(0.0..=1.0);
            perturb_point(perfect, object_radius(&sample.mask)?, q, sample.size, rng)
        }
        PromptKind::Box => perturb_box(perfect, rng.gen_range(0.5..=1.5), sample.size),
    }
}

fn forward_loss<'p>(
    model: &'p Model,
    freeze: &'p FreezeSet,
    sample: &Sample,
    cache: Option<&FeatureCache>,
    prompt: Prompt,
) -> Result<(f32, BTreeMap<String, Tensor>)> {
    let mut s = Session::training(&model.params, freeze);
    let feats = match cache {
        Some(c) => c.bind(&mut s.tape),
        None => encode_image(&mut s, &model.config, &sample.image_tensor())?,
    };
    let tokens = encode_prompts(&mut s, &model.config, &[prompt])?;
    let logits = decode(&mut s, &model.config, model.variant, &feats, &tokens)?;
    let loss = seg_loss(&mut s.tape, logits, &sample.mask.to_tensor())?;
    let value = s.tape.value(loss).item();
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    Ok((value, s.backward(loss)?))
}

fn predict(model: &Model, sample: &Sample, cache: Option<&FeatureCache>, prompt: Prompt) -> Result<Tensor> {
    match cache {
        Some(c) => model.predict_cached(c, &[prompt]),
        None => model.predict(&sample.image_tensor(), &[prompt]),
    }
}

fn validation_dice(
    model: &Model,
    cfg: &TrainConfig,
    data: &TrainData,
    caches: &[Option<FeatureCache>],
) -> Result<f64> {
    let n = cfg.max_val_samples.map_or(data.val.len(), |m| m.min(data.val.len()));
    if n == 0 {
        return Ok(f64::NAN);
    }
    let scores: Vec<f64> = data.val[..n]
        .par_iter()
        .map(|&i| {
            let sample = &data.samples[i];
            let mut rng = stream(cfg.seed, TAG_VAL, i as u64, 0);
            let prompt = training_prompt(sample, cfg.stage, cfg.perturbed_fraction, &mut rng)?;
            let logits = predict(model, sample, caches[i].as_ref(), prompt)?;
            dice(&Mask::from_logits(&logits)?, &sample.mask)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Runs `cfg.epochs` epochs of minibatch AdamW from `init`.
///
/// When the whole encoder is frozen its outputs are computed once per
/// sample and reused. `on_epoch` sees each epoch's metrics as they land.
pub fn train(
    cfg: &TrainConfig,
    init: Model,
    data: TrainData,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.variant != cfg.variant {
        return Err(Error::ConfigMismatch(format!(
            "config trains {} but the model is {}",
            cfg.variant, init.variant
        )));
    }
    if data.train.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("no training samples"));
    }
    if let Some(&i) = data.train.iter().chain(data.val).find(|&&i| i >= data.samples.len()) {
        return Err(Error::invalid(format!("sample index {i} out of range")));
    }
    let freeze = cfg.effective_freeze();
    let mut model = init;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, metrics });
    }

    let encoder_frozen = model.params.names().filter(|n| crate::params::in_scope(n, "encoder")).all(|n| freeze.is_frozen(n));
    let mut caches: Vec<Option<FeatureCache>> = vec![None; data.samples.len()];
    if encoder_frozen {
        let mut ids: Vec<usize> = data.train.iter().chain(data.val).copied().collect();
        ids.sort_unstable();
        ids.dedup();
        let computed: Vec<(usize, FeatureCache)> = ids
            .par_iter()
            .map(|&i| Ok((i, model.features(&data.samples[i].image_tensor())?)))
            .collect::<Result<_>>()?;
        for (i, c) in computed {
            caches[i] = Some(c);
        }
    }

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut state = AdamState::new();
    let mut step = 0u64;
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        let mut order = data.train.to_vec();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut stream(cfg.seed, TAG_SHUFFLE, epoch as u64, 0));
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f32, BTreeMap<String, Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &data.samples[i];
                    let mut rng = stream(cfg.seed, TAG_PROMPT, epoch as u64, i as u64);
                    let prompt = training_prompt(sample, cfg.stage, cfg.perturbed_fraction, &mut rng)?;
                    forward_loss(&model, &freeze, sample, caches[i].as_ref(), prompt)
                })
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f32;
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            for (value, grads) in results {
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: epoch + 1, step: step as usize + 1, value });
                }
                loss_sum += value as f64;
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            total.insert(name, g);
                        }
                    }
                }
            }
            for g in total.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            lr = cosine_lr(step, total_steps, cfg.lr);
            step += 1;
            adamw_step(&mut model.params, &total, &mut state, &cfg.optimizer, lr, step)?;
        }
        let m = EpochMetrics {
            stage: cfg.stage,
            variant: cfg.variant,
            seed: cfg.seed,
            epoch: epoch + 1,
            steps: step,
            train_loss: loss_sum / data.train.len() as f64,
            val_dice: validation_dice(&model, cfg, &data, &caches)?,
            lr,
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_data() -> Vec<Sample> {
        let cfg = SynthConfig { size: 32, ..Default::default() };
        generate_dataset(12, 9, &cfg).unwrap()
    }

    fn tiny_model(variant: DecoderVariant) -> Model {
        let cfg = ModelConfig { image_size: 32, patch_size: 8, ..ModelConfig::tiny() };
        Model::init(cfg, variant, 5).unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let samples = tiny_data();
        let idx: Vec<usize> = (0..8).collect();
        let init = tiny_model(DecoderVariant::Baseline);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::pretrain(1) };
        let out = train(&cfg, init.clone(), TrainData { samples: &samples, train: &idx, val: &[] }, |_| Ok(())).unwrap();
        assert!(out.model.params.bit_eq(&init.params));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn stage2_keeps_frozen_scopes_bitwise() {
        let samples = tiny_data();
        let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = ((0..8).collect(), (8..12).collect());
        let pre = tiny_model(DecoderVariant::Baseline);
        let init = stage2_init(&pre, DecoderVariant::SafeClick, 3).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::stage2(DecoderVariant::SafeClick, 3) };
        let data = TrainData { samples: &samples, train: &train_idx, val: &val_idx };
        let out = train(&cfg, init.clone(), data, |_| Ok(())).unwrap();
        for scope in ["encoder", "prompt", "e3"] {
            assert!(out.model.params.scope_bit_eq(&pre.params, scope), "{scope}");
        }
        assert!(!out.model.params.scope_bit_eq(&init.params, "crl.conv"));
        assert_eq!(out.metrics.len(), 2);
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let samples = tiny_data();
        let idx = [0usize];
        let cfg = TrainConfig::stage2(DecoderVariant::SafeClick, 0);
        let r = train(&cfg, tiny_model(DecoderVariant::Baseline), TrainData { samples: &samples, train: &idx, val: &[] }, |_| Ok(()));
        assert!(matches!(r, Err(Error::ConfigMismatch(_))));
    }
}
