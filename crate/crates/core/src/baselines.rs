//! Comparison methods: GA with counts drawn from a small discrete set or a
//! wide integer range, and plain random search.

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::FitnessBackend;
use crate::ga::{generation_record, run_ga, CountSource, GaConfig, RunHistory};
use crate::genome::{random_genome, Candidate, ContinuousParams, LayerKind, SearchLimits};
use crate::seed::{derive, rng_for};

/// How a baseline chooses filter and neuron counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineVariant {
    SmallSet { neuron_choices: Vec<u32>, filter_choices: Vec<u32> },
    LargeSet { neuron_range: (u32, u32), filter_range: (u32, u32) },
}

impl BaselineVariant {
    pub fn small_set() -> Self {
        Self::SmallSet {
            neuron_choices: vec![16, 32, 64, 128, 256, 512, 1024, 2048, 4096],
            filter_choices: vec![1, 4, 16, 64, 256],
        }
    }

    pub fn large_set() -> Self {
        Self::LargeSet {
            neuron_range: (16, 4096),
            filter_range: (1, 256),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SmallSet { .. } => "small_set",
            Self::LargeSet { .. } => "large_set",
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            Self::SmallSet { neuron_choices, filter_choices } => {
                if neuron_choices.is_empty() || filter_choices.is_empty() {
                    return Err(Error::Config("small_set choice lists must be non-empty".into()));
                }
                if neuron_choices.iter().chain(filter_choices).any(|&v| v == 0) {
                    return Err(Error::Config("small_set choices must be positive".into()));
                }
            }
            Self::LargeSet { neuron_range, filter_range } => {
                for (name, (lo, hi)) in [("neuron_range", neuron_range), ("filter_range", filter_range)] {
                    if *lo < 1 || lo > hi {
                        return Err(Error::Config(format!("large_set {name} ({lo}, {hi}) is not a valid range")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Smallest and largest count the variant can produce for `kind`.
    pub fn span(&self, kind: LayerKind) -> (u32, u32) {
        match (self, kind) {
            (Self::SmallSet { filter_choices: c, .. }, LayerKind::Conv)
            | (Self::SmallSet { neuron_choices: c, .. }, LayerKind::Dense) => {
                (c.iter().copied().min().unwrap_or(0), c.iter().copied().max().unwrap_or(0))
            }
            (Self::LargeSet { filter_range: r, .. }, LayerKind::Conv)
            | (Self::LargeSet { neuron_range: r, .. }, LayerKind::Dense) => *r,
        }
    }

    /// Whether `v` is a legal count for a layer of `kind`.
    pub fn admits(&self, kind: LayerKind, v: u32) -> bool {
        match (self, kind) {
            (Self::SmallSet { filter_choices, .. }, LayerKind::Conv) => filter_choices.contains(&v),
            (Self::SmallSet { neuron_choices, .. }, LayerKind::Dense) => neuron_choices.contains(&v),
            (Self::LargeSet { filter_range: (lo, hi), .. }, LayerKind::Conv)
            | (Self::LargeSet { neuron_range: (lo, hi), .. }, LayerKind::Dense) => (*lo..=*hi).contains(&v),
        }
    }
}

fn draw<R: Rng + ?Sized>(variant: &BaselineVariant, kind: LayerKind, rng: &mut R) -> u32 {
    match (variant, kind) {
        (BaselineVariant::SmallSet { filter_choices, .. }, LayerKind::Conv) => *filter_choices.choose(rng).unwrap(),
        (BaselineVariant::SmallSet { neuron_choices, .. }, LayerKind::Dense) => *neuron_choices.choose(rng).unwrap(),
        (BaselineVariant::LargeSet { filter_range: (lo, hi), .. }, LayerKind::Conv)
        | (BaselineVariant::LargeSet { neuron_range: (lo, hi), .. }, LayerKind::Dense) => rng.random_range(*lo..=*hi),
    }
}

/// Uniform draw of every count from the variant's set or range.
pub fn sample_counts<R: Rng + ?Sized>(variant: &BaselineVariant, limits: &SearchLimits, rng: &mut R) -> ContinuousParams {
    ContinuousParams {
        filters: (0..limits.max_conv).map(|_| draw(variant, LayerKind::Conv, rng)).collect(),
        neurons: (0..limits.max_dense).map(|_| draw(variant, LayerKind::Dense, rng)).collect(),
    }
}

/// A different legal count where one exists.
pub fn resample_count<R: Rng + ?Sized>(variant: &BaselineVariant, kind: LayerKind, current: u32, rng: &mut R) -> u32 {
    match (variant, kind) {
        (BaselineVariant::SmallSet { filter_choices: set, .. }, LayerKind::Conv)
        | (BaselineVariant::SmallSet { neuron_choices: set, .. }, LayerKind::Dense) => {
            let others: Vec<u32> = set.iter().copied().filter(|&v| v != current).collect();
            others.choose(rng).copied().unwrap_or(current)
        }
        (BaselineVariant::LargeSet { filter_range: (lo, hi), .. }, LayerKind::Conv)
        | (BaselineVariant::LargeSet { neuron_range: (lo, hi), .. }, LayerKind::Dense) => {
            if lo == hi {
                return *lo;
            }
            if !(*lo..=*hi).contains(&current) {
                return rng.random_range(*lo..=*hi);
            }
            // uniform over the range minus `current`
            let v = rng.random_range(*lo..*hi);
            if v >= current {
                v + 1
            } else {
                v
            }
        }
    }
}

/// GA whose counts are extra genes (`6C + 5D` mutation slots).
pub fn run_baseline_ga(
    variant: &BaselineVariant,
    cfg: &GaConfig,
    limits: &SearchLimits,
    backend: &dyn FitnessBackend,
    seed: u64,
) -> Result<RunHistory> {
    run_ga(variant.name(), cfg, limits, backend, &CountSource::Genes(variant.clone()), seed)
}

/// Settings for [`run_random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSearchConfig {
    pub budget_evals: usize,
    /// Candidates per history record.
    pub batch_size: usize,
    /// Keep every candidate in the history rather than only each batch's best.
    pub keep_all: bool,
    pub budget_seconds: Option<f64>,
}

impl Default for RandomSearchConfig {
    fn default() -> Self {
        Self {
            budget_evals: 1000,
            batch_size: 100,
            keep_all: false,
            budget_seconds: None,
        }
    }
}

/// Independent uniform candidates. Each record covers one batch and its
/// `best_fitness` is the running best.
pub fn run_random_search(
    cfg: &RandomSearchConfig,
    limits: &SearchLimits,
    counts: &BaselineVariant,
    backend: &dyn FitnessBackend,
    seed: u64,
) -> Result<RunHistory> {
    if cfg.budget_evals == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("random search needs a positive budget and batch size".into()));
    }
    limits.check()?;
    counts.check()?;
    let started = Instant::now();
    let mut history = RunHistory::new("random", seed);
    let mut done = 0;
    let mut batch = 0;
    while done < cfg.budget_evals {
        if cfg.budget_seconds.is_some_and(|b| started.elapsed().as_secs_f64() >= b) {
            break;
        }
        batch += 1;
        let n = cfg.batch_size.min(cfg.budget_evals - done);
        let mut candidates: Vec<Candidate> = (done..done + n)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_for(seed, &[i as u64]);
                let mut c = Candidate::new(random_genome(limits, &mut rng), sample_counts(counts, limits, &mut rng));
                c.fitness = Some(backend.evaluate(&c, derive(seed, &[u64::MAX, i as u64])));
                c
            })
            .collect();
        done += n;
        if !cfg.keep_all {
            let best = (0..candidates.len())
                .max_by(|&a, &b| candidates[a].accuracy().total_cmp(&candidates[b].accuracy()).then(b.cmp(&a)))
                .unwrap();
            candidates = vec![candidates.swap_remove(best)];
        }
        let mut record = generation_record(batch, candidates, n);
        let prev = history.records.last().map_or(0.0, |r| r.best_so_far);
        record.best_fitness = record.best_fitness.max(prev);
        history.push(record, &started);
    }
    Ok(history)
}
