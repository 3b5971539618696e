use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowd_budget::cap::{cap_normalize, cap_similarity, write_affinity_csv};
use crowd_budget::counternet::{forward, infer, load_params, CounterParams, FeatureOrigin};
use crowd_budget::densitymap::{evaluate, generate_density_map};
use crowd_budget::gmm::EmConfig;
use crowd_budget::harness::{
    fmt_f64, read_run_config, read_run_params, replay_run, report_csv, run_ablation,
    run_pipeline, split_point, summary_csv, write_run_dir, Ablation, BudgetConfig,
    PipelineSettings, RunConfig,
};
use crowd_budget::regionselect::{
    partition_strips, select_max, select_mdc, select_random, select_ratio_rect, AspectRatio,
    LabelMask, MaskRecord, Strategy,
};
use crowd_budget::synthcrowd::{load_dataset, save_dataset, generate_dataset, Dataset, SceneSpec};

#[derive(Parser)]
#[command(name = "crowd-budget", version, about = "Region-level labeling budgets for crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Choose the labeled regions of one scene and write the mask as JSON.
    Select(SelectArgs),
    /// Run the labeling and training pipeline for one seed into a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run's counter on a dataset split.
    Eval(EvalArgs),
    /// Run a named ablation over several budgets and seeds.
    Bench(BenchArgs),
    /// Write the affinity rows a trained counter produces for one scene.
    DumpAffinity(DumpArgs),
    /// Re-execute a run directory and compare its outputs bit for bit.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// JSON file holding a full scene spec; the flags below are ignored when set.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl SpecArgs {
    fn build(&self) -> Result<SceneSpec> {
        let spec = match &self.spec {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .with_context(|| format!("cannot read spec file {}", path.display()))?;
                serde_json::from_slice(&bytes)
                    .with_context(|| format!("spec file {} is not a valid scene spec", path.display()))?
            }
            None => SceneSpec {
                height: self.height,
                width: self.width,
                seed: self.data_seed,
                ..SceneSpec::default()
            },
        };
        spec.validate().context("invalid scene spec")?;
        Ok(spec)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    scenes: usize,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Args)]
struct BudgetArgs {
    /// none_or_all, random_strips, max_strips, mdc or ratio_rect.
    #[arg(long, default_value = "mdc")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.1)]
    budget: f64,
    /// Aspect ratio for ratio_rect, such as `inf:1`, `1:inf` or `2:1`.
    #[arg(long)]
    ratio: Option<AspectRatio>,
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Run directory of the warm-up counter; required by max_strips and mdc.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    strip_width: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; the mask JSON goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainingArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 30)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

impl TrainingArgs {
    fn settings(&self) -> PipelineSettings {
        let mut s = PipelineSettings::default();
        s.train.epochs = self.epochs;
        s.train.learning_rate = self.lr;
        s.warmup_epochs = self.warmup_epochs;
        s
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 0.2)]
    warmup: f64,
    /// Train with crowd affinity propagation.
    #[arg(long)]
    cap: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Evaluate on every scene instead of the held-out split.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// fig4, table1, table2, table3 or table4.
    ablation: String,
    /// Comma-separated budget fractions; each ablation has its own default.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<f64>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 60)]
    scenes: usize,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Directory for report.csv, summary.csv and config.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: usize,
    /// Mask JSON as written by `select`.
    #[arg(long)]
    mask: PathBuf,
    /// Comma-separated labeled positions to dump; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    run_dir: PathBuf,
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        bail!("missing dataset: {} has no manifest.json", dir.display());
    }
    load_dataset(dir).with_context(|| format!("cannot load dataset {}", dir.display()))
}

fn open_model(dir: &Path) -> Result<CounterParams> {
    let (bin, json) = (dir.join("params.bin"), dir.join("params.json"));
    if !bin.is_file() || !json.is_file() {
        bail!("missing model: {} has no params.bin/params.json", dir.display());
    }
    load_params(&bin, &json).with_context(|| format!("cannot load model from {}", dir.display()))
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn budget_config(b: &BudgetArgs, warmup: f64, cap: bool, seeds: Vec<u64>) -> Result<BudgetConfig> {
    let config = BudgetConfig {
        budget_fraction: b.budget,
        warmup_fraction: warmup,
        strategy: b.strategy,
        ratio: b.ratio,
        levels: b.levels,
        seeds,
        cap_enabled: cap,
    };
    config.validate().context("invalid configuration")?;
    Ok(config)
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = args.spec.build()?;
    let dataset = generate_dataset(&spec, args.scenes).context("invalid configuration")?;
    save_dataset(&dataset, &args.out)
        .with_context(|| format!("cannot write dataset to {}", args.out.display()))?;
    println!("{} scenes, manifest digest {}", args.scenes, dataset.manifest.digest());
    Ok(())
}

fn select(args: SelectArgs) -> Result<()> {
    let b = &args.budget;
    if b.strategy == Strategy::NoneOrAll {
        bail!("invalid configuration: none_or_all labels whole images, use `train` instead");
    }
    if b.strategy.needs_warmup() && args.model.is_none() {
        bail!(
            "invalid configuration: strategy {} needs a warm-up model, pass --model <run dir>",
            b.strategy
        );
    }
    let dataset = open_dataset(&args.data)?;
    let Some(scene) = dataset.scenes.get(args.scene) else {
        bail!(
            "invalid configuration: scene {} out of range (dataset has {})",
            args.scene,
            dataset.scenes.len()
        );
    };
    let shape = scene.shape();
    let partition = partition_strips(shape, args.strip_width).context("invalid configuration")?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mask = match b.strategy {
        Strategy::RatioRect => {
            let Some(ratio) = b.ratio else {
                bail!("invalid configuration: ratio_rect needs --ratio");
            };
            select_ratio_rect(shape, b.budget, ratio, &mut rng)?
        }
        Strategy::RandomStrips => {
            let n = partition.strips_for_budget(b.budget)?;
            select_random(&partition, n, &mut rng)?
        }
        Strategy::MaxStrips | Strategy::Mdc => {
            let params = open_model(args.model.as_deref().expect("checked above"))?;
            let predicted = infer(&params, &scene.input_grid).context("warm-up model does not fit the dataset")?;
            let n = partition.strips_for_budget(b.budget)?;
            if b.strategy == Strategy::Mdc {
                let em = EmConfig {
                    seed: args.seed,
                    ..EmConfig::default()
                };
                select_mdc(&partition, &predicted, b.levels, n, &em, &mut rng)?.mask
            } else {
                select_max(&partition, &predicted, n, &mut rng)?
            }
        }
        Strategy::NoneOrAll => unreachable!(),
    };
    let record = MaskRecord::new(&mask, b.strategy, b.budget, args.seed);
    let json = serde_json::to_string_pretty(&record)?;
    match &args.out {
        Some(path) => write_out(path, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let dataset = open_dataset(&args.data)?;
    let budget = budget_config(&args.budget, args.warmup, args.cap, vec![args.seed])?;
    let settings = args.training.settings();
    settings.train.validate().context("invalid configuration")?;
    let outcome = run_pipeline(&dataset, &budget, &settings, args.seed).context("pipeline failed")?;
    let config = RunConfig {
        dataset_spec: dataset.manifest.spec.clone(),
        n_scenes: dataset.scenes.len(),
        manifest_digest: dataset.manifest.digest(),
        budget,
        settings,
        seed: args.seed,
    };
    write_run_dir(&args.out, &config, &outcome)
        .with_context(|| format!("cannot write run directory {}", args.out.display()))?;
    println!(
        "mae {} rmse {} labeled_cells {} annotated_heads {}",
        fmt_f64(outcome.metrics.mae),
        fmt_f64(outcome.metrics.rmse),
        outcome.annotation.labeled_cells,
        outcome.annotation.annotated_heads
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let dataset = open_dataset(&args.data)?;
    let params = open_model(&args.model)?;
    let kernel = match read_run_config(&args.model) {
        Ok(c) => c.settings.kernel,
        Err(_) => PipelineSettings::default().kernel,
    };
    let start = if args.all {
        0
    } else {
        split_point(dataset.scenes.len(), PipelineSettings::default().train_fraction)?
    };
    let scenes = &dataset.scenes[start..];
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    println!("scene,predicted_count,gt_count");
    for s in scenes {
        let p = infer(&params, &s.input_grid).context("model does not fit the dataset")?;
        let g = generate_density_map(&s.heads, s.shape(), &kernel)?;
        println!("{},{},{}", s.index, fmt_f64(p.count()), fmt_f64(g.count()));
        preds.push(p);
        gts.push(g);
    }
    let m = evaluate(&preds, &gts)?;
    eprintln!("mae {} rmse {} over {} scenes", fmt_f64(m.mae), fmt_f64(m.rmse), scenes.len());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let ablation: Ablation = args.ablation.parse()?;
    if args.seeds == 0 {
        bail!("invalid configuration: --seeds must be >= 1");
    }
    let spec = args.spec.build()?;
    let settings = args.training.settings();
    settings.train.validate().context("invalid configuration")?;
    let budgets = if args.budgets.is_empty() {
        ablation.default_budgets()
    } else {
        args.budgets.clone()
    };
    let grid = ablation.grid(&budgets, &(0..args.seeds).collect::<Vec<_>>());
    for c in &grid {
        c.validate().context("invalid configuration")?;
    }
    let reports = run_ablation(ablation, &spec, args.scenes, &grid, &settings)?;
    let report = report_csv(ablation, &reports);
    print!("{report}");
    if let Some(dir) = &args.out {
        write_out(&dir.join("report.csv"), &report)?;
        write_out(&dir.join("summary.csv"), &summary_csv(&reports))?;
        let echo = serde_json::json!({
            "ablation": ablation.name(),
            "dataset_spec": spec,
            "n_scenes": args.scenes,
            "grid": grid,
            "settings": settings,
        });
        write_out(&dir.join("config.json"), &serde_json::to_string_pretty(&echo)?)?;
    }
    Ok(())
}

fn dump_affinity(args: DumpArgs) -> Result<()> {
    let dataset = open_dataset(&args.data)?;
    let params = open_model(&args.model)?;
    let Some(scene) = dataset.scenes.get(args.scene) else {
        bail!(
            "invalid configuration: scene {} out of range (dataset has {})",
            args.scene,
            dataset.scenes.len()
        );
    };
    let bytes = std::fs::read(&args.mask)
        .with_context(|| format!("missing mask file {}", args.mask.display()))?;
    let record: MaskRecord = serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is not a mask record", args.mask.display()))?;
    let mask: LabelMask = record.to_mask()?;
    if mask.shape() != scene.shape() {
        bail!(
            "invalid configuration: mask is {:?} but scene {} is {:?}",
            mask.shape(),
            args.scene,
            scene.shape()
        );
    }
    let (features, _) = forward(&params, &scene.input_grid).context("model does not fit the dataset")?;
    let w = scene.shape().1;
    let labeled: Vec<usize> = (0..mask.selected.len()).filter(|&p| mask.selected[p]).collect();
    let unlabeled: Vec<usize> = (0..mask.selected.len()).filter(|&p| !mask.selected[p]).collect();
    if labeled.is_empty() || unlabeled.is_empty() {
        bail!("invalid configuration: the mask must leave both labeled and unlabeled cells");
    }
    let eps = params_eps(&args.model);
    let n_l = cap_normalize(&features.gather(&labeled, FeatureOrigin::LabeledRegion), eps)?;
    let n_u = cap_normalize(&features.gather(&unlabeled, FeatureOrigin::UnlabeledRegion), eps)?;
    let affinity = cap_similarity(&n_l, &n_u)?;
    let rows = if args.rows.is_empty() {
        (0..labeled.len()).collect()
    } else {
        args.rows.clone()
    };
    let cells = |v: &[usize]| v.iter().map(|&p| (p / w, p % w)).collect::<Vec<_>>();
    write_affinity_csv(&args.out, &affinity, &cells(&labeled), &cells(&unlabeled), &rows)?;
    Ok(())
}

fn params_eps(run_dir: &Path) -> f64 {
    read_run_config(run_dir)
        .map(|c| c.settings.train.cap.eps)
        .unwrap_or_else(|_| PipelineSettings::default().train.cap.eps)
}

fn replay(args: ReplayArgs) -> Result<()> {
    if !args.run_dir.join("config.json").is_file() {
        bail!("missing run directory: {} has no config.json", args.run_dir.display());
    }
    read_run_params(&args.run_dir)
        .with_context(|| format!("missing model in {}", args.run_dir.display()))?;
    let out = replay_run(&args.run_dir).context("replay failed")?;
    if !out.is_exact() {
        bail!(
            "replay mismatch: metrics {} params {}\nrecorded:\n{}replayed:\n{}",
            if out.metrics_match { "match" } else { "differ" },
            if out.params_match { "match" } else { "differ" },
            out.recorded_metrics,
            out.replayed_metrics
        );
    }
    println!("replay exact");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Select(a) => select(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::DumpAffinity(a) => dump_affinity(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
