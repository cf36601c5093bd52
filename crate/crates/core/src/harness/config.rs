//! Run configuration: a flat, versioned JSON document.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineVariant, RandomSearchConfig};
use crate::bigan::BiGanConfig;
use crate::error::{Error, Result};
use crate::evaluator::{load_idx, make_synthetic_dataset, Dataset, FitnessSplit, SurrogateSpec, SyntheticKind};
use crate::ga::GaConfig;
use crate::genome::{random_genome, validate, ContinuousParams, Genome, LayerKind, SearchLimits};
use crate::seed::rng_for;
use crate::tinynet::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    SmallSet,
    LargeSet,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::SmallSet, Method::LargeSet, Method::Random];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::SmallSet => "small_set",
            Method::LargeSet => "large_set",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method `{s}` (expected one of {})", known.join(", ")))
        })
    }
}

/// Stopping rule shared by every method. At least one limit must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default)]
    pub evals: Option<usize>,
    #[serde(default)]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitnessConfig {
    Surrogate(SurrogateConfig),
    Tinynet {
        dataset: DatasetConfig,
        #[serde(default)]
        split: FitnessSplit,
    },
}

/// Analytic fitness. Missing targets are drawn from `target_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default)]
    pub target_genome: Option<Genome>,
    #[serde(default)]
    pub target_counts: Option<ContinuousParams>,
    /// Quadratic width of each count term, as a fraction of its bound range.
    #[serde(default = "default_width_fraction")]
    pub width_fraction: f64,
    #[serde(default)]
    pub target_seed: u64,
    #[serde(default = "default_w_cont")]
    pub w_cont: f64,
    #[serde(default = "default_w_disc")]
    pub w_disc: f64,
}

fn default_width_fraction() -> f64 {
    0.04
}

fn default_w_cont() -> f64 {
    0.7
}

fn default_w_disc() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        shape: SyntheticKind,
        samples: usize,
        input_shape: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_val_fraction() -> f64 {
    0.2
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic {
                shape,
                samples,
                input_shape,
                seed,
            } => make_synthetic_dataset(*shape, *samples, input_shape, *seed),
            DatasetConfig::Idx {
                images,
                labels,
                limit,
                val_fraction,
            } => load_idx(images, labels, *limit, *val_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limits: SearchLimits,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub bigan: BiGanConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Batch size and history detail for random search; budgets come from `budget`.
    #[serde(default)]
    pub random: RandomSearchConfig,
    /// Defaults to the standard choice lists, keeping only values inside `limits`.
    #[serde(default)]
    pub small_set: Option<BaselineVariant>,
    /// Defaults to the full count range of `limits`.
    #[serde(default)]
    pub large_set: Option<BaselineVariant>,
    pub fitness: FitnessConfig,
    pub budget: Budget,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Cap on concurrent evaluations; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Reads and validates a config file. Parse errors name the offending field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::ConfigNotFound(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        let cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("field `{path}`: {}", e.into_inner()))
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.limits.check()?;
        self.ga.check()?;
        if self.ga.budget_evals.is_some() || self.ga.budget_seconds.is_some() {
            return Err(Error::Config("set budgets under `budget`, not `ga`".into()));
        }
        self.bigan.check()?;
        for variant in [self.small_set(), self.large_set()] {
            variant.check()?;
            let inside = |kind, (lo, hi)| {
                let (a, b) = variant.span(kind);
                a >= lo && b <= hi
            };
            if !inside(LayerKind::Conv, self.limits.filter_bounds) || !inside(LayerKind::Dense, self.limits.neuron_bounds) {
                return Err(Error::Config(format!("{} counts must lie within limits", variant.name())));
            }
        }
        if self.random.batch_size == 0 {
            return Err(Error::Config("random.batch_size must be positive".into()));
        }
        match (self.budget.evals, self.budget.seconds) {
            (None, None) => return Err(Error::Config("budget needs `evals` and/or `seconds`".into())),
            (Some(0), _) => return Err(Error::Config("budget.evals must be positive".into())),
            (_, Some(s)) if !(s > 0.0 && s.is_finite()) => {
                return Err(Error::Config("budget.seconds must be positive".into()))
            }
            _ => {}
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        match &self.fitness {
            FitnessConfig::Surrogate(s) => {
                if !(s.width_fraction > 0.0 && s.width_fraction.is_finite()) {
                    return Err(Error::Config("fitness.width_fraction must be positive".into()));
                }
                if let Some(g) = &s.target_genome {
                    validate(g, &self.limits).map_err(|v| {
                        Error::Config(format!("fitness.target_genome is outside the search space: {v:?}"))
                    })?;
                }
                if let Some(c) = &s.target_counts {
                    if !c.within(&self.limits) {
                        return Err(Error::Config("fitness.target_counts must lie within limits".into()));
                    }
                }
            }
            FitnessConfig::Tinynet { .. } => self.train.check()?,
        }
        Ok(())
    }

    pub fn small_set(&self) -> BaselineVariant {
        if let Some(v) = &self.small_set {
            return v.clone();
        }
        let BaselineVariant::SmallSet { neuron_choices, filter_choices } = BaselineVariant::small_set() else {
            unreachable!()
        };
        let keep = |choices: Vec<u32>, (lo, hi): (u32, u32)| {
            let kept: Vec<u32> = choices.into_iter().filter(|v| (lo..=hi).contains(v)).collect();
            if kept.is_empty() {
                if lo == hi { vec![lo] } else { vec![lo, hi] }
            } else {
                kept
            }
        };
        BaselineVariant::SmallSet {
            neuron_choices: keep(neuron_choices, self.limits.neuron_bounds),
            filter_choices: keep(filter_choices, self.limits.filter_bounds),
        }
    }

    pub fn large_set(&self) -> BaselineVariant {
        self.large_set.clone().unwrap_or(BaselineVariant::LargeSet {
            neuron_range: self.limits.neuron_bounds,
            filter_range: self.limits.filter_bounds,
        })
    }

    /// GA settings with the shared budget applied.
    pub fn ga_config(&self) -> GaConfig {
        GaConfig {
            budget_evals: self.budget.evals,
            budget_seconds: self.budget.seconds,
            ..self.ga.clone()
        }
    }

    pub fn random_config(&self) -> RandomSearchConfig {
        RandomSearchConfig {
            budget_evals: self.budget.evals.unwrap_or(usize::MAX),
            budget_seconds: self.budget.seconds,
            ..self.random.clone()
        }
    }
}

impl SurrogateConfig {
    /// Target genome and counts, drawing whichever is missing.
    pub fn resolve(&self, limits: &SearchLimits) -> SurrogateSpec {
        let mut rng = rng_for(self.target_seed, &[0x7a59]);
        let genome = self.target_genome.clone().unwrap_or_else(|| random_genome(limits, &mut rng));
        let counts = self.target_counts.clone().unwrap_or_else(|| {
            let flat: Vec<u32> = (0..limits.count_len())
                .map(|slot| {
                    let (lo, hi) = limits.count_bounds(slot);
                    rng.random_range(lo..=hi)
                })
                .collect();
            ContinuousParams::from_flat(limits, &flat)
        });
        let mut spec = SurrogateSpec::with_relative_widths(limits, genome, counts, self.width_fraction);
        spec.w_cont = self.w_cont;
        spec.w_disc = self.w_disc;
        spec
    }
}
