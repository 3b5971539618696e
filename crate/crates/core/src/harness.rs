//! End-to-end pipeline (label, warm up, select, train, evaluate), ablation
//! sweeps and persisted run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counternet::{
    infer, load_params, save_params, train, CounterParams, TrainConfig, TrainExample, TrainingLog,
};
use crate::densitymap::{evaluate, generate_density_map, CountMetrics, DensityMap, KernelConfig};
use crate::error::{Error, Result};
use crate::gmm::EmConfig;
use crate::grid::read_bytes;
use crate::regionselect::{
    partition_strips, select_max, select_mdc, select_random, select_ratio_rect, AspectRatio,
    LabelMask, MaskRecord, Strategy,
};
use crate::synthcrowd::{generate_dataset, CrowdScene, Dataset, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Fraction of every training image's area that may be annotated.
    pub budget_fraction: f64,
    /// Fraction of training images labeled at random to warm up the counter.
    pub warmup_fraction: f64,
    pub strategy: Strategy,
    pub ratio: Option<AspectRatio>,
    pub levels: usize,
    pub seeds: Vec<u64>,
    /// Train with crowd affinity propagation.
    pub cap_enabled: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            budget_fraction: 0.1,
            warmup_fraction: 0.2,
            strategy: Strategy::Mdc,
            ratio: None,
            levels: 4,
            seeds: (0..5).collect(),
            cap_enabled: false,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return bad(format!("budget fraction {} outside (0, 1]", self.budget_fraction));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warm-up fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.levels < 1 {
            return bad("levels must be >= 1".into());
        }
        if self.strategy.needs_warmup() && self.warmup_fraction == 0.0 {
            return bad(format!(
                "strategy {} needs predicted maps, so warm-up fraction must be > 0",
                self.strategy
            ));
        }
        if self.strategy == Strategy::RatioRect && self.ratio.is_none() {
            return bad("ratio_rect needs an aspect ratio".into());
        }
        Ok(())
    }

    /// Short row label used in reports.
    pub fn label(&self) -> String {
        let mut s = match (self.strategy, self.ratio) {
            (Strategy::RatioRect, Some(r)) => format!("ratio {r}"),
            (s, _) => s.tag().to_string(),
        };
        if self.cap_enabled {
            s.push_str(" + cap");
        }
        s
    }
}

/// Hyperparameters shared by every run of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub train: TrainConfig,
    pub warmup_epochs: usize,
    pub strip_width_fraction: f64,
    pub kernel: KernelConfig,
    pub em: EmConfig,
    /// Leading fraction of scenes used for training; the rest is the test split.
    pub train_fraction: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            warmup_epochs: 30,
            strip_width_fraction: 0.1,
            kernel: KernelConfig::default(),
            em: EmConfig::default(),
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCost {
    pub labeled_cells: usize,
    pub annotated_heads: usize,
    pub total_cells: usize,
}

/// Heads whose cell is selected by the mask.
pub fn heads_in_mask(scene: &CrowdScene, mask: &LabelMask) -> usize {
    scene
        .heads
        .iter()
        .filter(|&&(r, c)| mask.is_selected(r as usize, c as usize))
        .count()
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub params: CounterParams,
    pub metrics: CountMetrics,
    pub log: TrainingLog,
    /// Mask of every labeled training scene, keyed by scene index.
    pub masks: BTreeMap<usize, MaskRecord>,
    pub annotation: AnnotationCost,
    pub test_counts: Vec<(usize, f64, f64)>,
}

pub fn split_point(n_scenes: usize, train_fraction: f64) -> Result<usize> {
    let n_train = (train_fraction * n_scenes as f64).round() as usize;
    if n_train == 0 || n_train >= n_scenes {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} leaves an empty split of {n_scenes} scenes"
        )));
    }
    Ok(n_train)
}

fn gt_maps(scenes: &[CrowdScene], kernel: &KernelConfig) -> Result<Vec<DensityMap>> {
    scenes
        .iter()
        .map(|s| generate_density_map(&s.heads, s.shape(), kernel))
        .collect()
}

fn train_on(
    scenes: &[CrowdScene],
    gts: &[DensityMap],
    masks: &[Option<LabelMask>],
    config: &TrainConfig,
) -> Result<(CounterParams, TrainingLog)> {
    let examples: Vec<TrainExample<'_>> = scenes
        .iter()
        .zip(gts)
        .zip(masks)
        .filter_map(|((s, g), m)| {
            m.as_ref().map(|mask| TrainExample {
                input: &s.input_grid,
                gt: g,
                mask,
            })
        })
        .collect();
    train(&examples, config, None, None)
}

/// Runs the full labeling and training pipeline for one seed and evaluates
/// the CAP-free counter on the test split.
pub fn run_pipeline(
    dataset: &Dataset,
    config: &BudgetConfig,
    settings: &PipelineSettings,
    seed: u64,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let n_train = split_point(dataset.scenes.len(), settings.train_fraction)?;
    let (train_scenes, test_scenes) = dataset.scenes.split_at(n_train);
    let shape = train_scenes[0].shape();
    let train_gts = gt_maps(train_scenes, &settings.kernel)?;
    let partition = partition_strips(shape, settings.strip_width_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let mut masks: Vec<Option<LabelMask>> = vec![None; n_train];
    match config.strategy {
        Strategy::NoneOrAll => {
            let k = ((config.budget_fraction * n_train as f64).floor() as usize).max(1);
            for i in sample(&mut rng, n_train, k) {
                masks[i] = Some(LabelMask::full(shape.0, shape.1));
            }
        }
        Strategy::RatioRect => {
            let ratio = config.ratio.expect("validated");
            for m in masks.iter_mut() {
                *m = Some(select_ratio_rect(shape, config.budget_fraction, ratio, &mut rng)?);
            }
        }
        Strategy::RandomStrips => {
            let n_l = partition.strips_for_budget(config.budget_fraction)?;
            for m in masks.iter_mut() {
                *m = Some(select_random(&partition, n_l, &mut rng)?);
            }
        }
        Strategy::MaxStrips | Strategy::Mdc => {
            let n_l = partition.strips_for_budget(config.budget_fraction)?;
            let n_warm = ((config.warmup_fraction * n_train as f64).round() as usize)
                .clamp(1, n_train);
            for i in sample(&mut rng, n_train, n_warm) {
                masks[i] = Some(select_random(&partition, n_l, &mut rng)?);
            }
            let warm_config = TrainConfig {
                epochs: settings.warmup_epochs,
                cap_enabled: false,
                seed,
                ..settings.train.clone()
            };
            let (warm_params, _) = train_on(train_scenes, &train_gts, &masks, &warm_config)?;
            let em = EmConfig {
                seed,
                ..settings.em.clone()
            };
            for i in 0..n_train {
                if masks[i].is_some() {
                    continue;
                }
                let predicted = infer(&warm_params, &train_scenes[i].input_grid)?;
                masks[i] = Some(if config.strategy == Strategy::Mdc {
                    select_mdc(&partition, &predicted, config.levels, n_l, &em, &mut rng)?.mask
                } else {
                    select_max(&partition, &predicted, n_l, &mut rng)?
                });
            }
        }
    }

    let mut annotation = AnnotationCost {
        total_cells: n_train * shape.0 * shape.1,
        ..AnnotationCost::default()
    };
    let mut records = BTreeMap::new();
    for (i, m) in masks.iter().enumerate() {
        if let Some(mask) = m {
            annotation.labeled_cells += mask.n_selected();
            annotation.annotated_heads += heads_in_mask(&train_scenes[i], mask);
            records.insert(
                i,
                MaskRecord::new(mask, config.strategy, config.budget_fraction, seed),
            );
        }
    }

    let final_config = TrainConfig {
        cap_enabled: config.cap_enabled,
        seed,
        ..settings.train.clone()
    };
    let (params, log) = train_on(train_scenes, &train_gts, &masks, &final_config)?;

    let test_gts = gt_maps(test_scenes, &settings.kernel)?;
    let preds = test_scenes
        .iter()
        .map(|s| infer(&params, &s.input_grid))
        .collect::<Result<Vec<_>>>()?;
    let metrics = evaluate(&preds, &test_gts)?;
    let test_counts = test_scenes
        .iter()
        .zip(preds.iter().zip(&test_gts))
        .map(|(s, (p, g))| (s.index, p.count(), g.count()))
        .collect();
    Ok(PipelineOutcome {
        params,
        metrics,
        log,
        masks: records,
        annotation,
        test_counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: CountMetrics,
    pub annotation: AnnotationCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub config_echo: BudgetConfig,
    pub per_seed: Vec<SeedResult>,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub mean_annotated_heads: f64,
    pub mean_labeled_cells: f64,
}

impl ExperimentReport {
    pub fn from_seeds(config: &BudgetConfig, per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::EmptyInput("no seed results"));
        }
        let n = per_seed.len() as f64;
        let mean = |f: &dyn Fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            label: config.label(),
            config_echo: config.clone(),
            mean_mae: mean(&|r| r.metrics.mae),
            mean_rmse: mean(&|r| r.metrics.rmse),
            mean_annotated_heads: mean(&|r| r.annotation.annotated_heads as f64),
            mean_labeled_cells: mean(&|r| r.annotation.labeled_cells as f64),
            per_seed,
        })
    }
}

/// Runs a configuration over all of its seeds.
pub fn run_experiment(
    dataset: &Dataset,
    config: &BudgetConfig,
    settings: &PipelineSettings,
) -> Result<ExperimentReport> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let out = run_pipeline(dataset, config, settings, seed)?;
        log::info!(
            "{} budget={} seed={seed}: mae={:.3} rmse={:.3}",
            config.label(),
            config.budget_fraction,
            out.metrics.mae,
            out.metrics.rmse
        );
        per_seed.push(SeedResult {
            seed,
            metrics: out.metrics,
            annotation: out.annotation,
        });
    }
    ExperimentReport::from_seeds(config, per_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Whole images versus random strips across budgets.
    Fig4,
    /// Aspect ratio of a randomly placed labeled rectangle.
    Table1,
    /// RANDOM, MAX and MDC strip selection across budgets.
    Table2,
    /// Warm-up fraction for MDC.
    Table3,
    /// MDC with and without affinity propagation during training.
    Table4,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fig4" => Ablation::Fig4,
            "table1" => Ablation::Table1,
            "table2" => Ablation::Table2,
            "table3" => Ablation::Table3,
            "table4" => Ablation::Table4,
            other => return Err(Error::UnknownAblation(other.to_string())),
        })
    }
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Fig4 => "fig4",
            Ablation::Table1 => "table1",
            Ablation::Table2 => "table2",
            Ablation::Table3 => "table3",
            Ablation::Table4 => "table4",
        }
    }

    pub fn default_budgets(&self) -> Vec<f64> {
        match self {
            Ablation::Fig4 => vec![0.1, 0.2, 0.5, 0.7, 0.9],
            Ablation::Table2 => vec![0.1, 0.2, 0.5, 0.9],
            Ablation::Table1 | Ablation::Table3 | Ablation::Table4 => vec![0.1],
        }
    }

    /// The configurations an ablation compares.
    pub fn grid(&self, budgets: &[f64], seeds: &[u64]) -> Vec<BudgetConfig> {
        let base = BudgetConfig {
            seeds: seeds.to_vec(),
            ..BudgetConfig::default()
        };
        let mut grid = Vec::new();
        for &budget in budgets {
            let at = |strategy, warmup: f64| BudgetConfig {
                budget_fraction: budget,
                strategy,
                warmup_fraction: warmup,
                ..base.clone()
            };
            match self {
                Ablation::Fig4 => {
                    grid.push(at(Strategy::NoneOrAll, 0.0));
                    grid.push(at(Strategy::RandomStrips, 0.0));
                }
                Ablation::Table1 => {
                    for ratio in AspectRatio::sweep() {
                        grid.push(BudgetConfig {
                            ratio: Some(ratio),
                            ..at(Strategy::RatioRect, 0.0)
                        });
                    }
                }
                Ablation::Table2 => {
                    grid.push(at(Strategy::RandomStrips, 0.0));
                    grid.push(at(Strategy::MaxStrips, 0.2));
                    grid.push(at(Strategy::Mdc, 0.2));
                }
                Ablation::Table3 => {
                    for warmup in [0.1, 0.2, 0.3, 0.4] {
                        grid.push(at(Strategy::Mdc, warmup));
                    }
                }
                Ablation::Table4 => {
                    grid.push(at(Strategy::Mdc, 0.2));
                    grid.push(BudgetConfig {
                        cap_enabled: true,
                        ..at(Strategy::Mdc, 0.2)
                    });
                }
            }
        }
        grid
    }
}

/// Runs every configuration of an ablation on a freshly generated dataset.
pub fn run_ablation(
    ablation: Ablation,
    dataset_spec: &SceneSpec,
    n_scenes: usize,
    grid: &[BudgetConfig],
    settings: &PipelineSettings,
) -> Result<Vec<ExperimentReport>> {
    let dataset = generate_dataset(dataset_spec, n_scenes)?;
    log::info!(
        "{}: {} configurations on {} scenes",
        ablation.name(),
        grid.len(),
        n_scenes
    );
    grid.iter()
        .map(|c| run_experiment(&dataset, c, settings))
        .collect()
}

/// 17 significant digits, enough to reproduce any f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per (configuration, seed).
pub fn report_csv(ablation: Ablation, reports: &[ExperimentReport]) -> String {
    let mut out = String::from(
        "ablation,label,strategy,budget,warmup,ratio,cap,seed,mae,rmse,labeled_cells,annotated_heads\n",
    );
    for r in reports {
        let c = &r.config_echo;
        for s in &r.per_seed {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                ablation.name(),
                r.label,
                c.strategy,
                fmt_f64(c.budget_fraction),
                fmt_f64(c.warmup_fraction),
                c.ratio.map(|x| x.to_string()).unwrap_or_default(),
                c.cap_enabled,
                s.seed,
                fmt_f64(s.metrics.mae),
                fmt_f64(s.metrics.rmse),
                s.annotation.labeled_cells,
                s.annotation.annotated_heads
            );
        }
    }
    out
}

/// One row per configuration with seed means.
pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(
        "label,strategy,budget,warmup,ratio,cap,seeds,mean_mae,mean_rmse,mean_labeled_cells,mean_annotated_heads\n",
    );
    for r in reports {
        let c = &r.config_echo;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            c.strategy,
            fmt_f64(c.budget_fraction),
            fmt_f64(c.warmup_fraction),
            c.ratio.map(|x| x.to_string()).unwrap_or_default(),
            c.cap_enabled,
            r.per_seed.len(),
            fmt_f64(r.mean_mae),
            fmt_f64(r.mean_rmse),
            fmt_f64(r.mean_labeled_cells),
            fmt_f64(r.mean_annotated_heads)
        );
    }
    out
}

/// Everything needed to re-execute a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_spec: SceneSpec,
    pub n_scenes: usize,
    pub manifest_digest: String,
    pub budget: BudgetConfig,
    pub settings: PipelineSettings,
    pub seed: u64,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(seed: u64, metrics: &CountMetrics) -> String {
    format!(
        "seed,mae,rmse\n{seed},{},{}\n",
        fmt_f64(metrics.mae),
        fmt_f64(metrics.rmse)
    )
}

fn test_counts_csv(counts: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("scene,predicted_count,gt_count,error\n");
    for &(i, p, g) in counts {
        let _ = writeln!(out, "{i},{},{},{}", fmt_f64(p), fmt_f64(g), fmt_f64(p - g));
    }
    out
}

/// Persists a run: `config.json`, `mask/*.json`, `params.bin` + `params.json`,
/// `log.csv`, `metrics.csv` and `report.csv` (per test scene counts).
pub fn write_run_dir(dir: &Path, config: &RunConfig, outcome: &PipelineOutcome) -> Result<()> {
    let mask_dir = dir.join("mask");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    write_file(&dir.join("config.json"), &serde_json::to_vec_pretty(config)?)?;
    for (i, rec) in &outcome.masks {
        write_file(
            &mask_dir.join(format!("scene_{i:04}.json")),
            &serde_json::to_vec_pretty(rec)?,
        )?;
    }
    save_params(&outcome.params, &dir.join("params.bin"), &dir.join("params.json"))?;
    write_file(&dir.join("log.csv"), outcome.log.to_csv().as_bytes())?;
    write_file(
        &dir.join("metrics.csv"),
        metrics_csv(config.seed, &outcome.metrics).as_bytes(),
    )?;
    write_file(
        &dir.join("report.csv"),
        test_counts_csv(&outcome.test_counts).as_bytes(),
    )
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    Ok(serde_json::from_slice(&read_bytes(&dir.join("config.json"))?)?)
}

pub fn read_run_params(dir: &Path) -> Result<CounterParams> {
    load_params(&dir.join("params.bin"), &dir.join("params.json"))
}

/// Regenerates the dataset a run config describes and checks its digest.
pub fn dataset_for(config: &RunConfig) -> Result<Dataset> {
    let dataset = generate_dataset(&config.dataset_spec, config.n_scenes)?;
    if dataset.manifest.digest() != config.manifest_digest {
        return Err(Error::Validation(
            "regenerated dataset does not match the recorded manifest digest".into(),
        ));
    }
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub metrics_match: bool,
    pub params_match: bool,
    pub recorded_metrics: String,
    pub replayed_metrics: String,
}

impl ReplayOutcome {
    pub fn is_exact(&self) -> bool {
        self.metrics_match && self.params_match
    }
}

/// Re-executes a persisted run and compares its outputs byte for byte.
pub fn replay_run(dir: &Path) -> Result<ReplayOutcome> {
    let config = read_run_config(dir)?;
    let dataset = dataset_for(&config)?;
    let outcome = run_pipeline(&dataset, &config.budget, &config.settings, config.seed)?;
    let recorded_metrics = String::from_utf8_lossy(&read_bytes(&dir.join("metrics.csv"))?).into_owned();
    let replayed_metrics = metrics_csv(config.seed, &outcome.metrics);
    let recorded_params = read_run_params(dir)?;
    Ok(ReplayOutcome {
        metrics_match: recorded_metrics == replayed_metrics,
        params_match: recorded_params.to_flat() == outcome.params.to_flat(),
        recorded_metrics,
        replayed_metrics,
    })
}
