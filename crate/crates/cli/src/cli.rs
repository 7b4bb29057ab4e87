use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use safeclick::checkpoint::{load_checkpoint, save_checkpoint};
use safeclick::checks::{gradient_suite, DEFAULT_STEP, DEFAULT_TOL};
use safeclick::data::{
    generate_dataset, object_radius, perturb_seeded, read_dataset, write_dataset, PerturbSpec, Prompt, Sample, Split,
};
use safeclick::model::{DecoderVariant, Model};
use safeclick::params::FreezeSet;
use safeclick::train::{
    ablation_run, robustness_sweep, stage2_init, train, write_records_jsonl, AblationConfig, EpochMetrics, Labeled,
    SegModel, TrainConfig, TrainData,
};

use crate::config::RunConfig;
use crate::service::{fresh_pair, router, AppState, Snapshot};

#[derive(Debug, Parser)]
#[command(name = "safeclick", version, about = "Error-tolerant interactive segmentation decoder")]
pub struct Cli {
    /// Seed for data generation, initialisation, training and perturbation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Safeclick,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Test,
    Val,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic SCDS dataset.
    GenData {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Image side length; overrides the config.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one stage and write an SFCK checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "safeclick")]
        stage: StageArg,
        /// Decoder variant of the second stage.
        #[arg(long, default_value = "safeclick")]
        variant: DecoderVariant,
        /// Pretrained checkpoint, required by the second stage.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Per-epoch metrics as JSON lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Robustness sweep of one or more checkpoints.
    Eval {
        /// Comma-separated paths, each optionally `name=path`.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        dataset: PathBuf,
        /// Summary table as CSV.
        #[arg(long)]
        out: PathBuf,
        /// Per-sample records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Pretrain once, train every decoder variant, sweep, and tabulate.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        max_test_samples: Option<usize>,
    },
    /// Perturb one prompt and print the result as JSON.
    Perturb {
        /// Prompt as JSON, e.g. `{"type":"point","x":10,"y":12,"label":1}`.
        #[arg(long)]
        prompt: String,
        /// Displacement fraction for points, scale factor for boxes.
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Object radius for points.
        #[arg(long)]
        radius: Option<f64>,
        /// Take size and radius from this sample instead.
        #[arg(long, requires = "sample")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        sample: Option<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        /// Comma-separated checkpoint paths, one per variant.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<PathBuf>,
        /// Serve freshly initialised Baseline and SafeClick models instead.
        #[arg(long, conflicts_with = "checkpoints")]
        fresh: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static UI files served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and module.
    GradCheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f32,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f32,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        // Fails only if a pool already exists, as in tests running in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { count, out, size } => gen_data(&cfg, seed, count, &out, size),
        Command::Train { dataset, out, stage, variant, init, epochs, lr, batch_size, metrics } => {
            let opts = TrainOpts { stage, variant, init, epochs, lr, batch_size, metrics };
            train_cmd(&cfg, seed, &dataset, &out, opts)
        }
        Command::Eval { checkpoints, dataset, out, records, split, max_samples } => {
            eval_cmd(&cfg, seed, &checkpoints, &dataset, &out, records.as_deref(), split, max_samples)
        }
        Command::Ablate { dataset, out_dir, epochs, pretrain_epochs, max_test_samples } => {
            ablate_cmd(&cfg, seed, &dataset, &out_dir, epochs, pretrain_epochs, max_test_samples)
        }
        Command::Perturb { prompt, level, size, radius, dataset, sample } => {
            perturb_cmd(seed, &prompt, level, size, radius, dataset.as_deref(), sample)
        }
        Command::Serve { checkpoints, fresh, dataset, addr, static_dir } => {
            serve_cmd(&cfg, seed, &checkpoints, fresh, dataset.as_deref(), addr, static_dir)
        }
        Command::GradCheck { seeds, tol, step } => grad_check_cmd(&seeds, step, tol),
    }
}

fn gen_data(cfg: &RunConfig, seed: u64, count: usize, out: &Path, size: Option<usize>) -> anyhow::Result<()> {
    let mut synth = cfg.synth.clone();
    if let Some(s) = size {
        synth.size = s;
    }
    let samples = generate_dataset(count, seed, &synth)?;
    write_dataset(out, &samples).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {count} samples of {0}x{0} to {1}", synth.size, out.display());
    Ok(())
}

fn load_samples(path: &Path) -> anyhow::Result<Vec<Sample>> {
    let samples = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if samples.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(samples)
}

fn jsonl_writer(path: Option<&Path>) -> anyhow::Result<Option<BufWriter<File>>> {
    path.map(|p| File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display())))
        .transpose()
}

fn log_epoch(m: &EpochMetrics, sink: &mut Option<BufWriter<File>>) -> safeclick::Result<()> {
    eprintln!(
        "{:?} {} epoch {} loss {:.5} val_dice {:.4} lr {:.3e}",
        m.stage, m.variant, m.epoch, m.train_loss, m.val_dice, m.lr
    );
    if let Some(w) = sink {
        serde_json::to_writer(&mut *w, m)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn apply_train_section(tc: &mut TrainConfig, cfg: &RunConfig, pretrain: bool) {
    let t = &cfg.train;
    if let Some(lr) = if pretrain { t.pretrain_lr } else { t.lr } {
        tc.lr = lr;
    }
    if let Some(e) = if pretrain { t.pretrain_epochs } else { t.epochs } {
        tc.epochs = e;
    }
    if let Some(b) = t.batch_size {
        tc.batch_size = b;
    }
    if let Some(o) = t.optimizer {
        tc.optimizer = o;
    }
    if let Some(f) = t.perturbed_fraction {
        tc.perturbed_fraction = f;
    }
    if !pretrain {
        if let Some(fr) = &t.freeze {
            tc.freeze = Some(FreezeSet::new(fr.iter().cloned()));
        }
    }
    tc.max_val_samples = t.max_val_samples;
}

pub struct TrainOpts {
    pub stage: StageArg,
    pub variant: DecoderVariant,
    pub init: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f32>,
    pub batch_size: Option<usize>,
    pub metrics: Option<PathBuf>,
}

fn train_cmd(cfg: &RunConfig, seed: u64, dataset: &Path, out: &Path, o: TrainOpts) -> anyhow::Result<()> {
    let samples = load_samples(dataset)?;
    let split = Split::new(samples.len(), cfg.split_seed);
    let (mut tc, init) = match o.stage {
        StageArg::Pretrain => {
            if o.init.is_some() {
                bail!("--init applies to the second stage only");
            }
            let mut tc = TrainConfig::pretrain(seed);
            apply_train_section(&mut tc, cfg, true);
            let model = Model::init(cfg.model.clone(), tc.variant, seed)?;
            (tc, model)
        }
        StageArg::Safeclick => {
            let path = o.init.as_ref().context("the second stage needs --init <pretrained checkpoint>")?;
            let pre = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let mut tc = TrainConfig::stage2(o.variant, seed);
            apply_train_section(&mut tc, cfg, false);
            (tc, stage2_init(&pre, o.variant, seed)?)
        }
    };
    if init.config.image_size != samples[0].size {
        bail!("dataset images are {}px but the model takes {}px", samples[0].size, init.config.image_size);
    }
    if let Some(e) = o.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = o.lr {
        tc.lr = lr;
    }
    if let Some(b) = o.batch_size {
        tc.batch_size = b;
    }
    let mut sink = jsonl_writer(o.metrics.as_deref())?;
    let data = TrainData { samples: &samples, train: &split.train, val: &split.val };
    let outcome = train(&tc, init, data, |m| log_epoch(m, &mut sink))?;
    save_checkpoint(out, &outcome.model).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn parse_named(spec: &str) -> (Option<&str>, &str) {
    match spec.split_once('=') {
        Some((name, path)) => (Some(name), path),
        None => (None, spec),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    cfg: &RunConfig,
    seed: u64,
    checkpoints: &[String],
    dataset: &Path,
    out: &Path,
    records: Option<&Path>,
    split: SplitArg,
    max_samples: Option<usize>,
) -> anyhow::Result<()> {
    let samples = load_samples(dataset)?;
    let mut models = Vec::new();
    for spec in checkpoints {
        let (name, path) = parse_named(spec);
        let m = load_checkpoint(path).with_context(|| format!("loading {path}"))?;
        let name = name.map(str::to_string).unwrap_or_else(|| m.variant.as_str().to_string());
        if models.iter().any(|(n, _): &(String, Model)| *n == name) {
            bail!("two checkpoints named `{name}`; use name=path to tell them apart");
        }
        models.push((name, m));
    }
    let labeled: Vec<Labeled<Model>> = models.iter().map(|(n, m)| Labeled { name: n.clone(), inner: m }).collect();
    let refs: Vec<&dyn SegModel> = labeled.iter().map(|l| l as &dyn SegModel).collect();
    let s = Split::new(samples.len(), cfg.split_seed);
    let mut ids = match split {
        SplitArg::Test => s.test,
        SplitArg::Val => s.val,
        SplitArg::All => (0..samples.len()).collect(),
    };
    if let Some(n) = max_samples.or(cfg.sweep.max_test_samples) {
        ids.truncate(n);
    }
    let outcome = robustness_sweep(&refs, &samples, &ids, &cfg.sweep.to_sweep(seed))?;
    outcome.table.write_csv(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(r) = records {
        write_records_jsonl(r, &outcome.records).with_context(|| format!("writing {}", r.display()))?;
    }
    print!("{}", outcome.table);
    Ok(())
}

fn ablate_cmd(
    cfg: &RunConfig,
    seed: u64,
    dataset: &Path,
    out_dir: &Path,
    epochs: Option<usize>,
    pretrain_epochs: Option<usize>,
    max_test_samples: Option<usize>,
) -> anyhow::Result<()> {
    let samples = load_samples(dataset)?;
    let split = Split::new(samples.len(), cfg.split_seed);
    let mut ac = AblationConfig::with_seed(seed);
    ac.model = cfg.model.clone();
    apply_train_section(&mut ac.pretrain, cfg, true);
    apply_train_section(&mut ac.stage2, cfg, false);
    if let Some(e) = epochs {
        ac.stage2.epochs = e;
    }
    if let Some(e) = pretrain_epochs {
        ac.pretrain.epochs = e;
    }
    ac.sweep = cfg.sweep.to_sweep(seed);
    ac.max_test_samples = max_test_samples.or(cfg.sweep.max_test_samples);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut sink = jsonl_writer(Some(&out_dir.join("metrics.jsonl")))?;
    let outcome = ablation_run(&ac, &samples, &split, |m| log_epoch(m, &mut sink))?;
    save_checkpoint(out_dir.join("pretrain.sfck"), &outcome.pretrained)?;
    for m in &outcome.models {
        save_checkpoint(out_dir.join(format!("{}.sfck", m.variant)), m)?;
    }
    outcome.sweep.table.write_csv(out_dir.join("robustness.csv"))?;
    write_records_jsonl(out_dir.join("records.jsonl"), &outcome.sweep.records)?;
    std::fs::write(out_dir.join("ablation.csv"), outcome.table.to_csv())?;
    print!("{}\n{}", outcome.sweep.table, outcome.table);
    Ok(())
}

fn perturb_cmd(
    seed: u64,
    prompt: &str,
    level: f64,
    size: usize,
    radius: Option<f64>,
    dataset: Option<&Path>,
    sample: Option<usize>,
) -> anyhow::Result<()> {
    let prompt: Prompt = serde_json::from_str(prompt).context("parsing --prompt")?;
    let (size, radius) = match (dataset, sample) {
        (Some(d), Some(i)) => {
            let samples = load_samples(d)?;
            let s = samples.get(i).with_context(|| format!("dataset has no sample {i}"))?;
            (s.size, Some(object_radius(&s.mask)?))
        }
        _ => (size, radius),
    };
    prompt.check_bounds(size)?;
    let spec = PerturbSpec { kind: prompt.kind(), level, seed };
    let perturbed = perturb_seeded(&[prompt], &spec, radius, size)?[0];
    let out = serde_json::json!({ "prompt": prompt, "spec": spec, "size": size, "radius": radius, "perturbed": perturbed });
    println!("{out}");
    Ok(())
}

fn serve_cmd(
    cfg: &RunConfig,
    seed: u64,
    checkpoints: &[PathBuf],
    fresh: bool,
    dataset: Option<&Path>,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let models = if fresh {
        fresh_pair(cfg.model.clone(), seed)?
    } else {
        if checkpoints.is_empty() {
            bail!("give --checkpoints or --fresh");
        }
        checkpoints
            .iter()
            .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let samples = match dataset {
        Some(d) => load_samples(d)?,
        None => Vec::new(),
    };
    let state = AppState::new(Snapshot::new(models, samples)?);
    let app = router(state, static_dir);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

fn grad_check_cmd(seeds: &[u64], step: f32, tol: f32) -> anyhow::Result<()> {
    let results = gradient_suite(seeds, step, tol)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<24} seed {:<3} max_rel_err {:.2e} over {} elements (worst {})",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.seed,
            r.max_rel_err,
            r.checked,
            r.worst
        );
        failed += !r.pass as usize;
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
