use crowd_budget::harness::{
    run_ablation, run_experiment, run_pipeline, split_point, summary_csv, Ablation, BudgetConfig,
    PipelineSettings,
};
use crowd_budget::counternet::TrainConfig;
use crowd_budget::regionselect::{partition_strips, AspectRatio, Strategy};
use crowd_budget::synthcrowd::{generate_dataset, SceneSpec};

fn tiny_spec() -> SceneSpec {
    SceneSpec {
        height: 16,
        width: 20,
        n_heads_range: (5, 20),
        ..SceneSpec::default()
    }
}

fn quick() -> PipelineSettings {
    PipelineSettings {
        train: TrainConfig { epochs: 1, ..TrainConfig::default() },
        warmup_epochs: 1,
        ..PipelineSettings::default()
    }
}

#[test]
fn every_strategy_respects_the_budget() {
    let data = generate_dataset(&tiny_spec(), 10).unwrap();
    let settings = quick();
    let n_train = split_point(10, settings.train_fraction).unwrap();
    let p = partition_strips((16, 20), settings.strip_width_fraction).unwrap();
    let widest = (0..p.n_strips).map(|s| p.strip_width(s)).max().unwrap();
    let cases = [
        (Strategy::NoneOrAll, None, 0.0),
        (Strategy::RandomStrips, None, 0.0),
        (Strategy::MaxStrips, None, 0.2),
        (Strategy::Mdc, None, 0.2),
        (Strategy::RatioRect, Some(AspectRatio::FullHeight), 0.0),
        (Strategy::RatioRect, Some(AspectRatio::Finite { vertical: 1, horizontal: 1 }), 0.0),
    ];
    for budget in [0.1, 0.3] {
        for (strategy, ratio, warmup) in cases {
            let config = BudgetConfig {
                budget_fraction: budget,
                warmup_fraction: warmup,
                strategy,
                ratio,
                ..BudgetConfig::default()
            };
            let out = run_pipeline(&data, &config, &settings, 1).unwrap();
            let a = out.annotation;
            assert_eq!(a.total_cells, n_train * 16 * 20);
            let bound = if strategy == Strategy::NoneOrAll {
                // Whole images, rounded down but never fewer than one.
                (((budget * n_train as f64).floor() as usize).max(1) * 16 * 20) as f64
            } else {
                budget * a.total_cells as f64 + (n_train * 16 * widest) as f64
            };
            assert!(
                a.labeled_cells as f64 <= bound,
                "{strategy} {budget}: {} cells",
                a.labeled_cells
            );
            let heads: usize = data.scenes[..n_train].iter().map(|s| s.count()).sum();
            assert!(a.annotated_heads <= heads);
        }
    }
}

#[test]
fn warmup_sweep_reports_one_row_per_setting() {
    let grid = Ablation::Table3.grid(&[0.2], &[0, 1]);
    let reports = run_ablation(Ablation::Table3, &tiny_spec(), 10, &grid, &quick()).unwrap();
    assert_eq!(reports.len(), 4);
    let warmups: Vec<f64> = reports.iter().map(|r| r.config_echo.warmup_fraction).collect();
    assert_eq!(warmups, vec![0.1, 0.2, 0.3, 0.4]);
    for r in &reports {
        assert_eq!(r.per_seed.len(), 2);
        let mean = r.per_seed.iter().map(|s| s.metrics.mae).sum::<f64>() / 2.0;
        assert!((r.mean_mae - mean).abs() <= 1e-12);
    }
    assert_eq!(summary_csv(&reports).lines().count(), 5);
}

#[test]
fn full_budget_beats_partial_budgets_on_average() {
    let data = generate_dataset(&SceneSpec::default(), 60).unwrap();
    let settings = PipelineSettings::default();
    let mae = |budget: f64| {
        let config = BudgetConfig {
            budget_fraction: budget,
            warmup_fraction: 0.0,
            strategy: Strategy::RandomStrips,
            seeds: (0..5).collect(),
            ..BudgetConfig::default()
        };
        run_experiment(&data, &config, &settings).unwrap().mean_mae
    };
    let full = mae(1.0);
    let partial: Vec<(f64, f64)> = [0.1, 0.5, 0.9].iter().map(|&b| (b, mae(b))).collect();
    assert!(
        partial.iter().all(|&(_, m)| full < m),
        "full budget MAE {full:.3} vs (budget, MAE) {partial:?}"
    );
}
