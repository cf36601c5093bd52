//! Run orchestration: configuration, method dispatch under budgets, output
//! files, head-to-head comparisons, gradient checks and result listings.

pub mod compare;
pub mod config;
pub mod gradcheck;
pub mod output;
pub mod report;

use std::path::{Path, PathBuf};

pub use compare::{compare, CompareRow, Comparison};
pub use config::{Budget, DatasetConfig, FitnessConfig, Method, RunConfig, SurrogateConfig, SCHEMA_VERSION};
pub use gradcheck::{gradcheck_matrix, run_gradcheck, GradCheckRow};
pub use output::{read_history, read_summary, write_run, RunSummary, CURVES_FILE, HISTORY_FILE, SUMMARY_FILE};
pub use report::{format_listing, parse_listing, report_run};

use crate::baselines::{run_baseline_ga, run_random_search};
use crate::error::{Error, Result};
use crate::evaluator::{SurrogateBackend, SurrogateSpec, TrainedBackend};
use crate::ga::{evolve, RunHistory};
use crate::FitnessBackend;

/// The fitness backend a config describes, plus the resolved surrogate
/// target when there is one.
pub struct Backend {
    pub inner: Box<dyn FitnessBackend>,
    pub surrogate: Option<SurrogateSpec>,
}

impl Backend {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.fitness {
            FitnessConfig::Surrogate(s) => {
                let spec = s.resolve(&cfg.limits);
                spec.check(&cfg.limits)?;
                Ok(Self {
                    inner: Box::new(SurrogateBackend(spec.clone())),
                    surrogate: Some(spec),
                })
            }
            FitnessConfig::Tinynet { dataset, split } => {
                let dataset = dataset.load()?;
                dataset.check()?;
                Ok(Self {
                    inner: Box::new(TrainedBackend {
                        dataset,
                        train: cfg.train.clone(),
                        split: *split,
                    }),
                    surrogate: None,
                })
            }
        }
    }
}

/// Runs `method` from `cfg` with `seed`, capping concurrency at `cfg.workers`.
pub fn run_method(cfg: &RunConfig, method: Method, backend: &dyn FitnessBackend, seed: u64) -> Result<RunHistory> {
    let run = || match method {
        Method::Proposed => evolve(&cfg.ga_config(), &cfg.limits, backend, &cfg.bigan, seed),
        Method::SmallSet => run_baseline_ga(&cfg.small_set(), &cfg.ga_config(), &cfg.limits, backend, seed),
        Method::LargeSet => run_baseline_ga(&cfg.large_set(), &cfg.ga_config(), &cfg.limits, backend, seed),
        Method::Random => run_random_search(&cfg.random_config(), &cfg.limits, &cfg.large_set(), backend, seed),
    };
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Output directory precedence: explicit override, then the config, then
/// `runs/<method>-seed<seed>`.
pub fn output_dir(cfg: &RunConfig, override_dir: Option<&Path>) -> PathBuf {
    override_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.method, cfg.seed)))
}

/// Runs the configured method and writes history.jsonl, summary.json and
/// curves.csv into `dir`.
pub fn search(cfg: &RunConfig, dir: &Path) -> Result<RunHistory> {
    let backend = Backend::from_config(cfg)?;
    let history = run_method(cfg, cfg.method, backend.inner.as_ref(), cfg.seed)?;
    write_run(dir, cfg, &history, backend.surrogate.as_ref())?;
    Ok(history)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::genome::SearchLimits;

    pub(crate) fn tiny_config(method: Method) -> RunConfig {
        let text = format!(
            r#"{{
                "schema_version": 1,
                "method": "{method}",
                "seed": 3,
                "limits": {{ "C": 2, "D": 2, "neuron_bounds": [16, 512], "filter_bounds": [1, 64] }},
                "ga": {{ "n_m": 6, "t": 2, "r": 2, "d": 1, "generations": 50 }},
                "bigan": {{ "m": 3, "gen_hidden": [16], "disc_hidden": [16] }},
                "random": {{ "batch_size": 10 }},
                "fitness": {{ "kind": "surrogate", "width_fraction": 0.1, "target_seed": 1 }},
                "budget": {{ "evals": 60 }}
            }}"#
        );
        RunConfig::from_json(&text).unwrap()
    }

    #[test]
    fn every_method_respects_the_eval_budget() {
        for method in Method::ALL {
            let cfg = tiny_config(method);
            let backend = Backend::from_config(&cfg).unwrap();
            let h = run_method(&cfg, method, backend.inner.as_ref(), cfg.seed).unwrap();
            let per_gen = h.records.iter().map(|r| r.evaluations).max().unwrap();
            assert!(h.total_evaluations >= 60, "{method}");
            assert!(h.total_evaluations < 60 + per_gen, "{method}: {}", h.total_evaluations);
            assert_eq!(h.method, method.name());
            for (i, r) in h.records.iter().enumerate() {
                assert_eq!(r.generation, i + 1);
            }
        }
    }

    #[test]
    fn time_budget_stops_between_generations() {
        let mut cfg = tiny_config(Method::SmallSet);
        cfg.budget = Budget {
            evals: None,
            seconds: Some(1e-9),
        };
        let backend = Backend::from_config(&cfg).unwrap();
        let h = run_method(&cfg, Method::SmallSet, backend.inner.as_ref(), 0).unwrap();
        assert!(h.records.len() <= 1);
    }

    #[test]
    fn worker_cap_does_not_change_results() {
        let cfg = tiny_config(Method::Proposed);
        let backend = Backend::from_config(&cfg).unwrap();
        let free = run_method(&cfg, Method::Proposed, backend.inner.as_ref(), 1).unwrap();
        let capped = RunConfig {
            workers: Some(1),
            ..cfg.clone()
        };
        let one = run_method(&capped, Method::Proposed, backend.inner.as_ref(), 1).unwrap();
        assert_eq!(free.to_jsonl().unwrap(), one.to_jsonl().unwrap());
    }

    #[test]
    fn search_writes_reproducible_files() {
        let cfg = tiny_config(Method::Proposed);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        search(&cfg, a.path()).unwrap();
        search(&cfg, b.path()).unwrap();
        for f in [output::HISTORY_FILE, output::SUMMARY_FILE, output::CURVES_FILE] {
            assert!(a.path().join(f).is_file(), "{f}");
        }
        let read = |d: &Path| std::fs::read(d.join(output::HISTORY_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn output_dir_precedence() {
        let mut cfg = tiny_config(Method::Random);
        assert_eq!(output_dir(&cfg, None), PathBuf::from("runs/random-seed3"));
        cfg.output_dir = Some("from_config".into());
        assert_eq!(output_dir(&cfg, None), PathBuf::from("from_config"));
        assert_eq!(output_dir(&cfg, Some(Path::new("flag"))), PathBuf::from("flag"));
    }

    #[test]
    fn tinynet_backend_loads_its_dataset() {
        let mut cfg = tiny_config(Method::Random);
        cfg.limits = SearchLimits::new(1, 1).with_filter_bounds(1, 4).with_neuron_bounds(4, 8);
        cfg.fitness = FitnessConfig::Tinynet {
            dataset: DatasetConfig::Synthetic {
                shape: crate::evaluator::SyntheticKind::Blobs,
                samples: 60,
                input_shape: vec![1, 6, 6],
                seed: 0,
            },
            split: Default::default(),
        };
        cfg.train.max_epochs = 2;
        cfg.budget.evals = Some(4);
        cfg.random.batch_size = 2;
        let backend = Backend::from_config(&cfg).unwrap();
        assert!(backend.surrogate.is_none());
        let h = run_method(&cfg, Method::Random, backend.inner.as_ref(), 0).unwrap();
        assert_eq!(h.total_evaluations, 4);
        let best = h.best_candidate().unwrap().fitness.clone().unwrap();
        assert!(best.diagnostic.is_none() && best.accuracy > 0.0, "{best:?}");
    }
}
