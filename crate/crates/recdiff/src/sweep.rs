//! Multi-run drivers: end-to-end single runs, hyperparameter sweeps, and
//! the fake-edge robustness experiment.

use rayon::prelude::*;

use crate::data::{inject_social_noise, DatasetBundle};
use crate::error::{Error, Result};
use crate::metrics::MetricSet;
use crate::model::{ModelConfig, RecDiffModel, Variant};
use crate::report::config_hash;
use crate::train::{evaluate_model, split, train, DataSplit, SplitSpec, TrainOutcome, TrainSettings};

/// One trained-and-evaluated run.
pub struct SingleRun {
    pub model: RecDiffModel,
    pub split: DataSplit,
    pub outcome: TrainOutcome,
    pub test: MetricSet,
    pub users_evaluated: usize,
    pub config_hash: String,
}

/// Split, train, and evaluate one configuration on one dataset.
/// `mask_valid_at_test` controls whether validation items are hidden from
/// the test-time ranking (the default protocol).
pub fn run_once(
    bundle: &DatasetBundle,
    cfg: &ModelConfig,
    split_spec: &SplitSpec,
    settings: &TrainSettings,
    mask_valid_at_test: bool,
) -> Result<SingleRun> {
    let s = split(&bundle.interactions, split_spec)?;
    let mut model = RecDiffModel::new(cfg.clone(), &s.train, Some(&bundle.social), settings.seed)?;
    let outcome = train(&mut model, &s, settings)?;
    let masks = s.test_masks(mask_valid_at_test);
    let (test, users_evaluated) = evaluate_model(&model, &s.test_items, &masks, &settings.eval_ns)?;
    let hash = config_hash(&cfg.canonical_text(), &bundle.name, settings.seed);
    Ok(SingleRun { model, split: s, outcome, test, users_evaluated, config_hash: hash })
}

/// Hyperparameter grid; empty axes keep the base config's value.
#[derive(Debug, Clone, Default)]
pub struct SweepGrid {
    pub d: Vec<usize>,
    pub t_max: Vec<usize>,
    pub tau: Vec<f64>,
    pub d_time: Vec<usize>,
    pub lr: Vec<f64>,
    pub lambda1: Vec<f64>,
}

impl SweepGrid {
    fn cells(&self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let or_base = |xs: &Vec<usize>, b: usize| if xs.is_empty() { vec![b] } else { xs.clone() };
        let or_base_f = |xs: &Vec<f64>, b: f64| if xs.is_empty() { vec![b] } else { xs.clone() };
        let ds = or_base(&self.d, base.d);
        let ts = or_base(&self.t_max, base.t_max);
        let taus = or_base_f(&self.tau, base.tau);
        let dts = or_base(&self.d_time, base.d_time);
        let lrs = or_base_f(&self.lr, base.lr);
        let l1s = or_base_f(&self.lambda1, base.lambda1);
        let mut cells = Vec::new();
        for &d in &ds {
            for &t in &ts {
                for &tau in &taus {
                    for &dt in &dts {
                        for &lr in &lrs {
                            for &l1 in &l1s {
                                let mut cfg = base.clone();
                                cfg.d = d;
                                cfg.t_max = t;
                                cfg.tau = tau;
                                cfg.d_time = dt;
                                cfg.lr = lr;
                                cfg.lambda1 = l1;
                                let label = format!(
                                    "d={d} T={t} tau={tau} d'={dt} lr={lr} l1={l1}"
                                );
                                cells.push((label, cfg));
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

pub struct SweepRow {
    pub label: String,
    pub cfg: ModelConfig,
    pub test: MetricSet,
    pub best_epoch: usize,
    pub mean_epoch_time_s: f64,
    pub config_hash: String,
}

/// Run every grid cell independently; cells share the same seeds so rows
/// are comparable. Cell order in the output matches grid order.
pub fn sweep(
    bundle: &DatasetBundle,
    base: &ModelConfig,
    grid: &SweepGrid,
    split_spec: &SplitSpec,
    settings: &TrainSettings,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    let run_cell = |(label, cfg): &(String, ModelConfig)| -> Result<SweepRow> {
        let run = run_once(bundle, cfg, split_spec, settings, true)?;
        Ok(SweepRow {
            label: label.clone(),
            cfg: cfg.clone(),
            test: run.test,
            best_epoch: run.outcome.best_epoch,
            mean_epoch_time_s: run.outcome.mean_epoch_time_s,
            config_hash: run.config_hash,
        })
    };
    if parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    }
}

/// One (variant, ratio) cell of the robustness experiment.
pub struct RobustnessCell {
    pub variant: Variant,
    pub ratio: f64,
    /// Per-seed test metrics, in seed order.
    pub per_seed: Vec<MetricSet>,
    pub median_recall20: f64,
    pub median_ndcg20: f64,
    /// Relative NDCG@20 drop versus the same variant at ratio 0;
    /// NaN when ratio 0 was not part of the grid.
    pub rel_ndcg_drop: f64,
}

fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Corrupt the social graph at each ratio, retrain each variant from
/// scratch, and evaluate on the uncorrupted test split. Metrics are
/// seed-medians; drops are relative to the same variant at ratio 0.
pub fn robustness_experiment(
    bundle: &DatasetBundle,
    variants: &[Variant],
    ratios: &[f64],
    base: &ModelConfig,
    split_spec: &SplitSpec,
    settings: &TrainSettings,
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<RobustnessCell>> {
    if let Some(&bad) = ratios.iter().find(|&&r| !(0.0..1.0).contains(&r)) {
        return Err(Error::Config(format!("noise ratio {bad} outside [0, 1)")));
    }
    if seeds.is_empty() {
        return Err(Error::Config("robustness experiment needs at least one seed".into()));
    }
    let mut jobs = Vec::new();
    for &variant in variants {
        for &ratio in ratios {
            for &seed in seeds {
                jobs.push((variant, ratio, seed));
            }
        }
    }
    let run_job = |&(variant, ratio, seed): &(Variant, f64, u64)| -> Result<MetricSet> {
        let corrupted = DatasetBundle {
            social: inject_social_noise(&bundle.social, ratio, seed)?,
            ..bundle.clone()
        };
        let mut cfg = base.clone();
        cfg.variant = variant;
        let mut st = settings.clone();
        st.seed = seed;
        let sp = SplitSpec { seed, ..*split_spec };
        let run = run_once(&corrupted, &cfg, &sp, &st, true)?;
        Ok(run.test)
    };
    let results: Result<Vec<MetricSet>> = if parallel {
        jobs.par_iter().map(run_job).collect()
    } else {
        jobs.iter().map(run_job).collect()
    };
    let results = results?;

    let mut cells = Vec::new();
    for &variant in variants {
        let mut baseline_ndcg = f64::NAN;
        for &ratio in ratios {
            let per_seed: Vec<MetricSet> = jobs
                .iter()
                .zip(results.iter())
                .filter(|((v, r, _), _)| *v == variant && *r == ratio)
                .map(|(_, m)| m.clone())
                .collect();
            let median_recall20 =
                median(&mut per_seed.iter().map(|m| m.recall(20)).collect());
            let median_ndcg20 = median(&mut per_seed.iter().map(|m| m.ndcg(20)).collect());
            if ratio == 0.0 {
                baseline_ndcg = median_ndcg20;
            }
            let rel_ndcg_drop = if baseline_ndcg.is_finite() && baseline_ndcg != 0.0 {
                (baseline_ndcg - median_ndcg20) / baseline_ndcg
            } else {
                f64::NAN
            };
            cells.push(RobustnessCell {
                variant,
                ratio,
                per_seed,
                median_recall20,
                median_ndcg20,
                rel_ndcg_drop,
            });
        }
    }
    Ok(cells)
}
