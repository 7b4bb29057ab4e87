use std::fmt;

use serde::{Deserialize, Serialize};

use super::eval::{robustness_sweep, RobustnessTable, SegModel, SweepConfig, SweepOutcome};
use super::{stage2_init, train, EpochMetrics, TrainConfig, TrainData, TrainOutcome};
use crate::data::{PromptKind, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{DecoderVariant, Model, ModelConfig};

/// One pretrain run, then one second-stage run per variant from the same
/// pretrained weights, then a shared robustness sweep on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Template for every variant; `variant` is overwritten per run.
    pub stage2: TrainConfig,
    pub variants: Vec<DecoderVariant>,
    pub sweep: SweepConfig,
    /// Evaluate at most this many test samples.
    pub max_test_samples: Option<usize>,
    /// Give Baseline its own second-stage run over `out_norm` and `head`.
    /// Off by default: Baseline is the pretrained decoder as is.
    pub finetune_baseline: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl AblationConfig {
    pub fn with_seed(seed: u64) -> Self {
        AblationConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(seed),
            stage2: TrainConfig::stage2(DecoderVariant::SafeClick, seed),
            variants: DecoderVariant::ALL.to_vec(),
            sweep: SweepConfig { seed, ..Default::default() },
            max_test_samples: None,
            finetune_baseline: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: DecoderVariant,
    pub point_pp: MeanStd,
    pub point_ip: MeanStd,
    pub box_pp: MeanStd,
    pub box_ip: MeanStd,
}

/// PP and IP-average Dice (%) per decoder configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Picks the PP and average columns of `table` for every variant present,
    /// in the order Baseline, w/o E1, w/o E2, w/o CRL, SafeClick.
    pub fn from_robustness(table: &RobustnessTable) -> Result<Self> {
        let get = |v: DecoderVariant, kind: PromptKind, col: &str| {
            table
                .cell(v.as_str(), kind, col)
                .map(|c| MeanStd { mean: c.mean, std: c.std })
                .ok_or_else(|| Error::invalid(format!("table has no {} {} {col} cell", v.as_str(), kind.as_str())))
        };
        let rows = DecoderVariant::ALL
            .iter()
            .filter(|v| table.rows.iter().any(|r| r.variant == v.as_str()))
            .map(|&v| {
                Ok(AblationRow {
                    variant: v,
                    point_pp: get(v, PromptKind::Point, "PP")?,
                    point_ip: get(v, PromptKind::Point, "Avg")?,
                    box_pp: get(v, PromptKind::Box, "PP")?,
                    box_ip: get(v, PromptKind::Box, "Avg")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AblationTable { rows })
    }

    pub fn row(&self, v: DecoderVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.rows.iter().map(|r| r.variant.label()).collect()
    }

    pub const CSV_HEADER: &'static str =
        "config,point_pp,point_pp_std,point_ip,point_ip_std,box_pp,box_pp_std,box_ip,box_ip_std";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.variant.label(),
                r.point_pp.mean,
                r.point_pp.std,
                r.point_ip.mean,
                r.point_ip.std,
                r.box_pp.mean,
                r.box_pp.std,
                r.box_ip.mean,
                r.box_ip.std
            ));
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>16} {:>16} {:>16} {:>16}", "config", "point PP", "point IP", "box PP", "box IP")?;
        for r in &self.rows {
            write!(f, "{:<10}", r.variant.label())?;
            for c in [r.point_pp, r.point_ip, r.box_pp, r.box_ip] {
                write!(f, " {:>8.2} ±{:>6.2}", c.mean, c.std)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub pretrained: Model,
    pub models: Vec<Model>,
    pub metrics: Vec<EpochMetrics>,
    pub sweep: SweepOutcome,
    pub table: AblationTable,
}

/// Runs the full ablation on `samples` partitioned by `split`.
///
/// `on_epoch` sees pretrain metrics first, then each variant's in
/// `cfg.variants` order.
pub fn ablation_run(
    cfg: &AblationConfig,
    samples: &[Sample],
    split: &Split,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<AblationOutcome> {
    if cfg.variants.is_empty() {
        return Err(Error::invalid("no variants to ablate"));
    }
    let pre = pretrain_run(cfg, samples, split, &mut on_epoch)?;
    let mut out = ablation_from_pretrained(cfg, pre.model, samples, split, on_epoch)?;
    out.metrics.splice(0..0, pre.metrics);
    Ok(out)
}

/// The first stage of [`ablation_run`] alone.
pub fn pretrain_run(
    cfg: &AblationConfig,
    samples: &[Sample],
    split: &Split,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let data = TrainData { samples, train: &split.train, val: &split.val };
    let init = Model::init(cfg.model.clone(), cfg.pretrain.variant, cfg.pretrain.seed)?;
    train(&cfg.pretrain, init, data, on_epoch)
}

/// Second stage and sweep of [`ablation_run`] from given pretrained weights.
/// `metrics` holds second-stage epochs only.
pub fn ablation_from_pretrained(
    cfg: &AblationConfig,
    pretrained: Model,
    samples: &[Sample],
    split: &Split,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<AblationOutcome> {
    if cfg.variants.is_empty() {
        return Err(Error::invalid("no variants to ablate"));
    }
    let data = TrainData { samples, train: &split.train, val: &split.val };
    let mut metrics = Vec::new();
    let mut models = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let tc = TrainConfig { variant, ..cfg.stage2.clone() };
        let init = stage2_init(&pretrained, variant, tc.seed)?;
        if variant == DecoderVariant::Baseline && !cfg.finetune_baseline {
            models.push(init);
            continue;
        }
        let out = train(&tc, init, data, &mut on_epoch)?;
        metrics.extend(out.metrics);
        models.push(out.model);
    }

    let n = cfg.max_test_samples.map_or(split.test.len(), |m| m.min(split.test.len()));
    let refs: Vec<&dyn SegModel> = models.iter().map(|m| m as &dyn SegModel).collect();
    let sweep = robustness_sweep(&refs, samples, &split.test[..n], &cfg.sweep)?;
    let table = AblationTable::from_robustness(&sweep.table)?;
    Ok(AblationOutcome { pretrained, models, metrics, sweep, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    fn tiny_cfg(seed: u64) -> AblationConfig {
        let mut cfg = AblationConfig::with_seed(seed);
        cfg.model = ModelConfig { image_size: 32, patch_size: 8, ..ModelConfig::tiny() };
        cfg.pretrain.epochs = 1;
        cfg.stage2.epochs = 1;
        cfg.max_test_samples = Some(4);
        cfg
    }

    #[test]
    fn rows_follow_the_five_configurations_and_repeat() {
        let samples = generate_dataset(20, 4, &SynthConfig { size: 32, ..Default::default() }).unwrap();
        let split = Split::new(samples.len(), 4);
        let a = ablation_run(&tiny_cfg(4), &samples, &split, |_| Ok(())).unwrap();
        assert_eq!(a.table.labels(), ["Baseline", "w/o E1", "w/o E2", "w/o CRL", "SafeClick"]);
        let b = ablation_run(&tiny_cfg(4), &samples, &split, |_| Ok(())).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.sweep.records, b.sweep.records);
    }
}
