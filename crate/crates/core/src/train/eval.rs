//! Robustness sweeps over perturbation levels and the resulting tables.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dice;
use crate::data::{
    object_radius, perturb_seeded, splitmix64, Mask, PerturbSpec, Prompt, PromptKind, Sample, BOX_SCALES,
    POINT_LEVELS,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

/// Anything that maps an image and prompts to `[S, S]` logits.
pub trait SegModel: Sync {
    /// Row name in tables and records.
    fn name(&self) -> String;

    fn image_size(&self) -> usize;

    /// Architecture, for compatibility checks. Stubs have none.
    fn model_config(&self) -> Option<&ModelConfig> {
        None
    }

    /// Logits for each prompt set on one sample.
    fn predict_many(&self, sample: &Sample, prompt_sets: &[Vec<Prompt>]) -> Result<Vec<Tensor>>;
}

impl SegModel for Model {
    fn name(&self) -> String {
        self.variant.as_str().to_string()
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn model_config(&self) -> Option<&ModelConfig> {
        Some(&self.config)
    }

    fn predict_many(&self, sample: &Sample, prompt_sets: &[Vec<Prompt>]) -> Result<Vec<Tensor>> {
        let cache = self.features(&sample.image_tensor())?;
        prompt_sets.iter().map(|p| self.predict_cached(&cache, p)).collect()
    }
}

/// A model under a different row name.
pub struct Labeled<'a, M> {
    pub name: String,
    pub inner: &'a M,
}

impl<M: SegModel> SegModel for Labeled<'_, M> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn image_size(&self) -> usize {
        self.inner.image_size()
    }

    fn model_config(&self) -> Option<&ModelConfig> {
        self.inner.model_config()
    }

    fn predict_many(&self, sample: &Sample, prompt_sets: &[Vec<Prompt>]) -> Result<Vec<Tensor>> {
        self.inner.predict_many(sample, prompt_sets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Base of every perturbation seed.
    pub seed: u64,
    /// Logit threshold for the predicted mask.
    pub threshold: f32,
    pub prompt_types: Vec<PromptKind>,
    pub point_levels: Vec<f64>,
    pub box_levels: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            threshold: 0.0,
            prompt_types: vec![PromptKind::Point, PromptKind::Box],
            point_levels: POINT_LEVELS.to_vec(),
            box_levels: BOX_SCALES.to_vec(),
        }
    }
}

impl SweepConfig {
    fn levels(&self, kind: PromptKind) -> &[f64] {
        match kind {
            PromptKind::Point => &self.point_levels,
            PromptKind::Box => &self.box_levels,
        }
    }
}

/// Seed of the perturbation applied to `sample_id` at `(kind, level)`.
/// It does not involve the model, so every variant sees the same prompts.
pub fn perturb_seed(base: u64, sample_id: usize, kind: PromptKind, level: f64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ sample_id as u64) ^ splitmix64(level.to_bits() ^ kind as u64))
}

/// One evaluated (model, sample, prompt setting).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub variant: String,
    pub prompt_type: PromptKind,
    pub level: f64,
    pub sample_id: usize,
    pub dice: f64,
    pub perturb_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    /// `PP`, a level label such as `25%`, or `Avg`.
    pub column: String,
    /// Perturbation level; `None` for the average column.
    pub level: Option<f64>,
    /// Mean Dice in percent.
    pub mean: f64,
    /// Standard deviation across seeds, in percent.
    pub std: f64,
    /// Number of seeds aggregated.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub prompt_type: PromptKind,
    pub cells: Vec<TableCell>,
}

/// Dice (%) for each model and prompt type: the perfect prompt, each
/// imperfect level, and the arithmetic mean of the imperfect levels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub rows: Vec<TableRow>,
}

pub const AVG_COLUMN: &str = "Avg";
pub const PP_COLUMN: &str = "PP";

fn column_label(kind: PromptKind, level: f64) -> String {
    if level == kind.perfect_level() {
        PP_COLUMN.to_string()
    } else {
        kind.level_label(level)
    }
}

impl RobustnessTable {
    pub fn row(&self, variant: &str, kind: PromptKind) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.variant == variant && r.prompt_type == kind)
    }

    pub fn cell(&self, variant: &str, kind: PromptKind, column: &str) -> Option<&TableCell> {
        self.row(variant, kind)?.cells.iter().find(|c| c.column == column)
    }

    pub fn pp(&self, variant: &str, kind: PromptKind) -> Option<f64> {
        self.cell(variant, kind, PP_COLUMN).map(|c| c.mean)
    }

    pub fn ip_avg(&self, variant: &str, kind: PromptKind) -> Option<f64> {
        self.cell(variant, kind, AVG_COLUMN).map(|c| c.mean)
    }

    /// Column names of a row, in order.
    pub fn columns(&self, variant: &str, kind: PromptKind) -> Vec<&str> {
        self.row(variant, kind).map(|r| r.cells.iter().map(|c| c.column.as_str()).collect()).unwrap_or_default()
    }

    fn from_means(rows: Vec<(String, PromptKind, Vec<(f64, f64)>)>) -> Self {
        let rows = rows
            .into_iter()
            .map(|(variant, kind, cols)| {
                let mut cells: Vec<TableCell> = cols
                    .iter()
                    .map(|&(level, mean)| TableCell {
                        column: column_label(kind, level),
                        level: Some(level),
                        mean,
                        std: 0.0,
                        n: 1,
                    })
                    .collect();
                let ip: Vec<f64> = cells.iter().filter(|c| c.column != PP_COLUMN).map(|c| c.mean).collect();
                if !ip.is_empty() {
                    cells.push(TableCell {
                        column: AVG_COLUMN.to_string(),
                        level: None,
                        mean: ip.iter().sum::<f64>() / ip.len() as f64,
                        std: 0.0,
                        n: 1,
                    });
                }
                TableRow { variant, prompt_type: kind, cells }
            })
            .collect();
        RobustnessTable { rows }
    }

    /// Cell-wise mean and sample standard deviation over per-seed tables
    /// with identical layout.
    pub fn aggregate(tables: &[RobustnessTable]) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::invalid("no tables to aggregate"))?;
        let mut out = first.clone();
        for (ri, row) in out.rows.iter_mut().enumerate() {
            for (ci, cell) in row.cells.iter_mut().enumerate() {
                let mut vals = Vec::with_capacity(tables.len());
                for t in tables {
                    let other = t
                        .rows
                        .get(ri)
                        .filter(|r| r.variant == row.variant && r.prompt_type == row.prompt_type)
                        .and_then(|r| r.cells.get(ci))
                        .filter(|c| c.column == cell.column)
                        .ok_or_else(|| Error::ConfigMismatch("tables differ in layout".into()))?;
                    vals.push(other.mean);
                }
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = if n > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                cell.mean = mean;
                cell.std = var.sqrt();
                cell.n = n;
            }
        }
        Ok(out)
    }

    pub const CSV_HEADER: &'static str = "variant,prompt_type,column,level,mean_dice,std_dice,n";

    /// Long format, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            for c in &row.cells {
                let level = c.level.map(|l| l.to_string()).unwrap_or_default();
                s.push_str(&format!(
                    "{},{},{},{},{:.4},{:.4},{}\n",
                    row.variant,
                    row.prompt_type.as_str(),
                    c.column,
                    level,
                    c.mean,
                    c.std,
                    c.n
                ));
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

impl fmt::Display for RobustnessTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut last_kind = None;
        for row in &self.rows {
            if last_kind != Some(row.prompt_type) {
                write!(f, "{:<12} {:<6}", "variant", "prompt")?;
                for c in &row.cells {
                    write!(f, " {:>15}", c.column)?;
                }
                writeln!(f)?;
                last_kind = Some(row.prompt_type);
            }
            write!(f, "{:<12} {:<6}", row.variant, row.prompt_type.as_str())?;
            for c in &row.cells {
                if c.n > 1 {
                    write!(f, " {:>8.2} ±{:>5.2}", c.mean, c.std)?;
                } else {
                    write!(f, " {:>15.2}", c.mean)?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn write_records_jsonl(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub table: RobustnessTable,
    pub records: Vec<EvalRecord>,
}

struct Setting {
    kind: PromptKind,
    level: f64,
    seed: u64,
    prompts: Vec<Prompt>,
}

fn settings_for(sample: &Sample, id: usize, cfg: &SweepConfig) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    for &kind in &cfg.prompt_types {
        let perfect = sample.perfect_prompt(kind)?;
        let radius = object_radius(&sample.mask)?;
        let levels = std::iter::once(kind.perfect_level()).chain(cfg.levels(kind).iter().copied());
        for level in levels {
            let seed = perturb_seed(cfg.seed, id, kind, level);
            let spec = PerturbSpec { kind, level, seed };
            let prompts = perturb_seeded(&[perfect], &spec, Some(radius), sample.size)?;
            out.push(Setting { kind, level, seed, prompts });
        }
    }
    Ok(out)
}

/// Mean Dice of every model at every prompt setting over `ids`.
///
/// Perturbed prompts depend only on `(cfg.seed, sample id, type, level)`,
/// so all models are compared on identical inputs.
pub fn robustness_sweep(
    models: &[&dyn SegModel],
    samples: &[Sample],
    ids: &[usize],
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    let first = models.first().ok_or_else(|| Error::invalid("no models to evaluate"))?;
    for m in models {
        if m.image_size() != first.image_size() {
            return Err(Error::ConfigMismatch(format!(
                "{} takes {}px images, {} takes {}px",
                m.name(),
                m.image_size(),
                first.name(),
                first.image_size()
            )));
        }
    }
    let configs: Vec<&ModelConfig> = models.iter().filter_map(|m| m.model_config()).collect();
    if configs.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::ConfigMismatch("models do not share an encoder configuration".into()));
    }
    if ids.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    for &i in ids {
        let s = samples.get(i).ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
        if s.size != first.image_size() {
            return Err(Error::ConfigMismatch(format!("sample {i} is {}px, models take {}px", s.size, first.image_size())));
        }
    }

    // per_sample[s][m][setting] = dice
    let per_sample: Vec<(Vec<Setting>, Vec<Vec<f64>>)> = ids
        .par_iter()
        .map(|&id| {
            let sample = &samples[id];
            let settings = settings_for(sample, id, cfg)?;
            let sets: Vec<Vec<Prompt>> = settings.iter().map(|s| s.prompts.clone()).collect();
            let scores = models
                .iter()
                .map(|m| {
                    m.predict_many(sample, &sets)?
                        .iter()
                        .map(|logits| {
                            let pred = Mask::from_bits(
                                sample.size,
                                logits.data().iter().map(|&v| v > cfg.threshold).collect(),
                            )?;
                            dice(&pred, &sample.mask)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((settings, scores))
        })
        .collect::<Result<_>>()?;

    let n_settings = per_sample[0].0.len();
    let mut records = Vec::with_capacity(models.len() * n_settings * ids.len());
    let mut rows = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        let name = m.name();
        let mut by_kind: Vec<(PromptKind, Vec<(f64, f64)>)> = Vec::new();
        for si in 0..n_settings {
            let (kind, level) = (per_sample[0].0[si].kind, per_sample[0].0[si].level);
            let mut sum = 0.0;
            for (k, &id) in ids.iter().enumerate() {
                let (settings, scores) = &per_sample[k];
                let d = scores[mi][si];
                sum += d;
                records.push(EvalRecord {
                    variant: name.clone(),
                    prompt_type: kind,
                    level,
                    sample_id: id,
                    dice: d,
                    perturb_seed: settings[si].seed,
                });
            }
            let mean = 100.0 * sum / ids.len() as f64;
            match by_kind.last_mut() {
                Some((k, cols)) if *k == kind => cols.push((level, mean)),
                _ => by_kind.push((kind, vec![(level, mean)])),
            }
        }
        rows.extend(by_kind.into_iter().map(|(k, cols)| (name.clone(), k, cols)));
    }
    Ok(SweepOutcome { table: RobustnessTable::from_means(rows), records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    struct Oracle;
    struct Empty;

    impl SegModel for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }
        fn image_size(&self) -> usize {
            32
        }
        fn predict_many(&self, s: &Sample, sets: &[Vec<Prompt>]) -> Result<Vec<Tensor>> {
            Ok(sets.iter().map(|_| s.mask.to_tensor().map(|v| 2.0 * v - 1.0)).collect())
        }
    }

    impl SegModel for Empty {
        fn name(&self) -> String {
            "empty".into()
        }
        fn image_size(&self) -> usize {
            32
        }
        fn predict_many(&self, _: &Sample, sets: &[Vec<Prompt>]) -> Result<Vec<Tensor>> {
            Ok(sets.iter().map(|_| Tensor::full([32, 32], -1.0)).collect())
        }
    }

    #[test]
    fn stubs_bound_the_table() {
        let samples = generate_dataset(6, 2, &SynthConfig { size: 32, ..Default::default() }).unwrap();
        let ids: Vec<usize> = (0..6).collect();
        let out = robustness_sweep(&[&Oracle, &Empty], &samples, &ids, &SweepConfig::default()).unwrap();
        for row in &out.table.rows {
            let want = if row.variant == "oracle" { 100.0 } else { 0.0 };
            assert!(row.cells.iter().all(|c| c.mean == want), "{row:?}");
        }
        assert_eq!(out.table.columns("oracle", PromptKind::Point), ["PP", "25%", "50%", "75%", "100%", "Avg"]);
        assert_eq!(out.table.columns("oracle", PromptKind::Box), ["PP", "50%", "75%", "125%", "150%", "Avg"]);
        assert_eq!(out.records.len(), 2 * 10 * 6);
    }

    #[test]
    fn aggregate_reports_spread() {
        let t = |v: f64| RobustnessTable::from_means(vec![("m".into(), PromptKind::Point, vec![(0.0, v), (0.5, v)])]);
        let agg = RobustnessTable::aggregate(&[t(10.0), t(20.0)]).unwrap();
        let pp = agg.cell("m", PromptKind::Point, "PP").unwrap();
        assert_eq!((pp.mean, pp.n), (15.0, 2));
        assert!((pp.std - 50f64.sqrt()).abs() < 1e-12);
    }
}
