//! The evolutionary loop: selection, counter-based pairing, layer-block
//! crossover, mutation and generational replacement, with continuous
//! counts refreshed every generation by the Bi-GAN.

use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{resample_count, sample_counts, BaselineVariant};
use crate::bigan::{bigan_iteration, BiGanConfig, BiGanState, IterationRecord};
use crate::error::{Error, Result};
use crate::evaluator::FitnessBackend;
use crate::genome::{random_genome, Candidate, ContinuousParams, GeneField, Genome, LayerKind, SearchLimits, SlotSpace};
use crate::seed::{derive, rng_for};

// Stream tags for `seed::derive`.
const INIT: u64 = 1;
const GENERATION: u64 = 2;
const EVAL: u64 = 3;
const BIGAN_EVAL: u64 = 4;
const BIGAN_INIT: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    /// Population size.
    pub n_m: usize,
    /// Top-ranked candidates kept as parents.
    pub t: usize,
    /// Extra parents drawn at random from the rest.
    pub r: usize,
    /// Parents dropped at random from the merged pool.
    pub d: usize,
    pub mutation_fraction: f64,
    pub generations: usize,
    pub budget_seconds: Option<f64>,
    pub budget_evals: Option<usize>,
    /// Carry the best candidate into the next generation unchanged.
    pub elitism: bool,
    pub bigan_iters_per_gen: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            n_m: 25,
            t: 4,
            r: 2,
            d: 1,
            mutation_fraction: 0.2,
            generations: 10,
            budget_seconds: None,
            budget_evals: None,
            elitism: false,
            bigan_iters_per_gen: 1,
        }
    }
}

impl GaConfig {
    pub fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_m < 2 {
            problems.push(format!("n_m must be at least 2, got {}", self.n_m));
        }
        if self.t + self.r < self.d + 2 {
            problems.push(format!("t + r - d must be at least 2 (t={}, r={}, d={})", self.t, self.r, self.d));
        }
        if self.t + self.r > self.n_m {
            problems.push(format!("t + r = {} exceeds population size {}", self.t + self.r, self.n_m));
        }
        if !(0.0..=1.0).contains(&self.mutation_fraction) {
            problems.push(format!("mutation_fraction {} outside [0, 1]", self.mutation_fraction));
        }
        if self.generations == 0 {
            problems.push("generations must be positive".into());
        }
        if self.budget_seconds.is_some_and(|s| !(s > 0.0)) {
            problems.push("budget_seconds must be positive".into());
        }
        if self.budget_evals == Some(0) {
            problems.push("budget_evals must be positive".into());
        }
        if self.bigan_iters_per_gen == 0 {
            problems.push("bigan_iters_per_gen must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// `ceil(mutation_fraction · n_m)`
    pub fn mutation_count(&self) -> usize {
        ((self.mutation_fraction * self.n_m as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// 1-based.
    pub generation: usize,
    pub candidates: Vec<Candidate>,
    /// Best fitness within this generation (running best for random search).
    pub best_fitness: f64,
    pub best_so_far: f64,
    pub mean_fitness: f64,
    pub mean_loss: Option<f64>,
    pub evaluations: usize,
    pub cumulative_evaluations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bigan: Vec<IterationRecord>,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: String,
    pub seed: u64,
    pub records: Vec<GenerationRecord>,
    pub total_evaluations: usize,
    #[serde(skip)]
    pub total_seconds: f64,
}

impl RunHistory {
    pub fn new(method: impl Into<String>, seed: u64) -> Self {
        Self {
            method: method.into(),
            seed,
            records: Vec::new(),
            total_evaluations: 0,
            total_seconds: 0.0,
        }
    }

    /// Highest-fitness candidate seen, earliest on ties.
    pub fn best_candidate(&self) -> Option<&Candidate> {
        let mut best: Option<&Candidate> = None;
        for c in self.records.iter().flat_map(|r| &r.candidates) {
            if c.fitness.is_some() && best.is_none_or(|b| c.accuracy() > b.accuracy()) {
                best = Some(c);
            }
        }
        best
    }

    pub fn best_fitness(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.best_so_far)
    }

    /// Best fitness reached once `evals` evaluations had been spent.
    pub fn best_at_evals(&self, evals: usize) -> f64 {
        self.records
            .iter()
            .take_while(|r| r.cumulative_evaluations <= evals)
            .last()
            .map_or(0.0, |r| r.best_so_far)
    }

    /// One record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn records_from_jsonl(text: &str) -> Result<Vec<GenerationRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| Error::Parse(format!("history line {}: {e}", i + 1)))
            })
            .collect()
    }

    pub(crate) fn push(&mut self, mut record: GenerationRecord, started: &Instant) {
        self.total_evaluations += record.evaluations;
        record.cumulative_evaluations = self.total_evaluations;
        let prev = self.records.last().map_or(f64::NEG_INFINITY, |r| r.best_so_far);
        record.best_so_far = prev.max(record.best_fitness);
        record.elapsed_seconds = started.elapsed().as_secs_f64();
        self.total_seconds = record.elapsed_seconds;
        self.records.push(record);
    }
}

fn score(c: &Candidate) -> f64 {
    let a = c.accuracy();
    if a.is_nan() {
        f64::NEG_INFINITY
    } else {
        a
    }
}

/// Summary statistics over an evaluated population.
pub(crate) fn generation_record(generation: usize, candidates: Vec<Candidate>, evaluations: usize) -> GenerationRecord {
    let n = candidates.len().max(1) as f64;
    let best_fitness = candidates.iter().map(Candidate::accuracy).fold(0.0, f64::max);
    let mean_fitness = candidates.iter().map(Candidate::accuracy).sum::<f64>() / n;
    let losses: Vec<f64> = candidates.iter().filter_map(|c| c.fitness.as_ref()?.loss).collect();
    let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    GenerationRecord {
        generation,
        candidates,
        best_fitness,
        best_so_far: best_fitness,
        mean_fitness,
        mean_loss,
        evaluations,
        cumulative_evaluations: 0,
        bigan: Vec::new(),
        elapsed_seconds: 0.0,
    }
}

/// Indices of the parent pool: the `t` best (ties to the lower index),
/// `r` drawn from the rest, then `d` dropped at random from the merged set.
pub fn select_parents<R: Rng + ?Sized>(scores: &[f64], cfg: &GaConfig, rng: &mut R) -> Result<Vec<usize>> {
    if cfg.t + cfg.r < cfg.d + 2 || cfg.t + cfg.r > scores.len() {
        return Err(Error::Config(format!(
            "cannot select t={} r={} d={} from {} candidates",
            cfg.t,
            cfg.r,
            cfg.d,
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let mut pool: Vec<usize> = order[..cfg.t].to_vec();
    pool.extend(order[cfg.t..].choose_multiple(rng, cfg.r).copied());
    for _ in 0..cfg.d {
        let k = rng.random_range(0..pool.len());
        pool.remove(k);
    }
    Ok(pool)
}

/// `n_m` pairs of pool positions. Each pair takes a random least-used
/// parent, then a random least-used parent among the others.
pub fn pair_parents<R: Rng + ?Sized>(pool_len: usize, n_m: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if pool_len < 2 {
        return Err(Error::Config(format!("parent pool needs at least 2 members, got {pool_len}")));
    }
    let mut counters = vec![0usize; pool_len];
    let mut pairs = Vec::with_capacity(n_m);
    let least_used = |counters: &[usize], skip: Option<usize>| -> Vec<usize> {
        let min = (0..pool_len).filter(|&i| Some(i) != skip).map(|i| counters[i]).min().unwrap();
        (0..pool_len).filter(|&i| Some(i) != skip && counters[i] == min).collect()
    };
    for _ in 0..n_m {
        let first = *least_used(&counters, None).choose(rng).unwrap();
        let second = *least_used(&counters, Some(first)).choose(rng).unwrap();
        counters[first] += 1;
        counters[second] += 1;
        pairs.push((first, second));
    }
    Ok(pairs)
}

/// Child takes conv layers `1..=id1` and dense layers `1..=id2` from `a`,
/// the rest from `b`. Count genes travel with their layers.
pub fn crossover_at(a: &Candidate, b: &Candidate, id1: usize, id2: usize) -> Candidate {
    let pick = |i: usize, cut: usize| i < cut;
    let conv = (0..a.genome.conv.len())
        .map(|i| if pick(i, id1) { a.genome.conv[i].clone() } else { b.genome.conv[i].clone() })
        .collect();
    let dense = (0..a.genome.dense.len())
        .map(|i| if pick(i, id2) { a.genome.dense[i].clone() } else { b.genome.dense[i].clone() })
        .collect();
    let filters = (0..a.params.filters.len())
        .map(|i| if pick(i, id1) { a.params.filters[i] } else { b.params.filters[i] })
        .collect();
    let neurons = (0..a.params.neurons.len())
        .map(|i| if pick(i, id2) { a.params.neurons[i] } else { b.params.neurons[i] })
        .collect();
    let mut genome = Genome { conv, dense };
    genome.repair();
    Candidate::new(genome, ContinuousParams { filters, neurons })
}

/// Crossover at cut points drawn uniformly from `1..=C` and `1..=D`.
pub fn crossover<R: Rng + ?Sized>(a: &Candidate, b: &Candidate, rng: &mut R) -> Candidate {
    let id1 = rng.random_range(1..=a.genome.conv.len());
    let id2 = rng.random_range(1..=a.genome.dense.len());
    crossover_at(a, b, id1, id2)
}

fn other_choice<T: Copy + PartialEq, R: Rng + ?Sized>(choices: &[T], current: T, rng: &mut R) -> T {
    let others: Vec<T> = choices.iter().copied().filter(|&c| c != current).collect();
    others.choose(rng).copied().unwrap_or(current)
}

/// Resamples one genome field (given by its slot) to a different value from
/// its choice set.
fn mutate_field<R: Rng + ?Sized>(genome: &mut Genome, limits: &SearchLimits, kind: LayerKind, layer: usize, field: GeneField, rng: &mut R) {
    let i = layer - 1;
    match kind {
        LayerKind::Conv => {
            let g = &mut genome.conv[i];
            match field {
                GeneField::Exists => g.exists = !g.exists,
                GeneField::KernelSize => g.kernel_size = other_choice(&limits.kernel_choices, g.kernel_size, rng),
                GeneField::Activation => g.activation = other_choice(&limits.activation_choices, g.activation, rng),
                GeneField::BatchNorm => g.batch_norm = !g.batch_norm,
                GeneField::MaxPool => g.max_pool = !g.max_pool,
                GeneField::Dropout | GeneField::Count => unreachable!("not a conv genome field"),
            }
        }
        LayerKind::Dense => {
            let g = &mut genome.dense[i];
            match field {
                GeneField::Exists => g.exists = !g.exists,
                GeneField::Activation => g.activation = other_choice(&limits.activation_choices, g.activation, rng),
                GeneField::BatchNorm => g.batch_norm = !g.batch_norm,
                GeneField::Dropout => g.dropout = !g.dropout,
                GeneField::KernelSize | GeneField::MaxPool | GeneField::Count => {
                    unreachable!("not a dense genome field")
                }
            }
        }
    }
}

/// Changes one uniformly chosen slot of the `5C + 4D` genome fields, then
/// repairs.
pub fn mutate<R: Rng + ?Sized>(genome: &Genome, limits: &SearchLimits, rng: &mut R) -> Genome {
    let mut out = genome.clone();
    let index = rng.random_range(1..=SlotSpace::Genome.slot_count(limits));
    let slot = SlotSpace::Genome.locate(limits, index).expect("index drawn in range");
    mutate_field(&mut out, limits, slot.kind, slot.layer, slot.field, rng);
    out.repair();
    out
}

/// Mutation over the `6C + 5D` space where each layer block also carries
/// its count gene; count genes are resampled from `variant`.
pub fn mutate_with_counts<R: Rng + ?Sized>(
    candidate: &Candidate,
    limits: &SearchLimits,
    variant: &BaselineVariant,
    rng: &mut R,
) -> Candidate {
    let mut out = Candidate::new(candidate.genome.clone(), candidate.params.clone());
    let index = rng.random_range(1..=SlotSpace::WithCounts.slot_count(limits));
    let slot = SlotSpace::WithCounts.locate(limits, index).expect("index drawn in range");
    if slot.field == GeneField::Count {
        let i = slot.layer - 1;
        match slot.kind {
            LayerKind::Conv => out.params.filters[i] = resample_count(variant, LayerKind::Conv, out.params.filters[i], rng),
            LayerKind::Dense => out.params.neurons[i] = resample_count(variant, LayerKind::Dense, out.params.neurons[i], rng),
        }
    } else {
        mutate_field(&mut out.genome, limits, slot.kind, slot.layer, slot.field, rng);
        out.genome.repair();
    }
    out
}

/// Where a run's filter and neuron counts come from.
#[derive(Debug, Clone)]
pub enum CountSource {
    /// Stamped on every candidate each generation by the better generator.
    BiGan(BiGanConfig),
    /// Carried as genes, crossed over with their layers and resampled on
    /// mutation.
    Genes(BaselineVariant),
}

/// Builds the next population from an evaluated one.
pub fn breed<R: Rng + ?Sized>(
    population: &[Candidate],
    cfg: &GaConfig,
    limits: &SearchLimits,
    source: &CountSource,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    let scores: Vec<f64> = population.iter().map(score).collect();
    let pool = select_parents(&scores, cfg, rng)?;
    let pairs = pair_parents(pool.len(), cfg.n_m, rng)?;
    let mut children: Vec<Candidate> = pairs
        .iter()
        .map(|&(a, b)| crossover(&population[pool[a]], &population[pool[b]], rng))
        .collect();
    let mut idx: Vec<usize> = (0..children.len()).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(cfg.mutation_count()) {
        children[i] = match source {
            CountSource::BiGan(_) => Candidate::new(mutate(&children[i].genome, limits, rng), children[i].params.clone()),
            CountSource::Genes(v) => mutate_with_counts(&children[i], limits, v, rng),
        };
    }
    if cfg.elitism {
        let best = (0..population.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("non-empty population");
        children[0] = population[best].clone();
    }
    Ok(children)
}

fn evaluate_population(population: &mut [Candidate], backend: &dyn FitnessBackend, seed: u64, generation: usize) -> usize {
    let todo: Vec<usize> = (0..population.len()).filter(|&i| population[i].fitness.is_none()).collect();
    let reports: Vec<_> = todo
        .par_iter()
        .map(|&i| backend.evaluate(&population[i], derive(seed, &[EVAL, generation as u64, i as u64])))
        .collect();
    for (&i, r) in todo.iter().zip(reports) {
        population[i].fitness = Some(r);
    }
    todo.len()
}

/// Genome the Bi-GAN scores its proposals on: the given genome with every
/// layer switched on, so each count slot influences fitness.
fn bigan_reference(genome: &Genome) -> Genome {
    let mut g = genome.clone();
    g.conv.iter_mut().for_each(|l| l.exists = true);
    g.dense.iter_mut().for_each(|l| l.exists = true);
    g
}

/// Shared generation loop for the proposed method and the GA baselines.
pub fn run_ga(
    method: &str,
    cfg: &GaConfig,
    limits: &SearchLimits,
    backend: &dyn FitnessBackend,
    source: &CountSource,
    seed: u64,
) -> Result<RunHistory> {
    cfg.check()?;
    limits.check()?;
    if let CountSource::Genes(v) = source {
        v.check()?;
    }
    let started = Instant::now();
    let mut history = RunHistory::new(method, seed);

    let mut init_rng = rng_for(seed, &[INIT]);
    let mut population: Vec<Candidate> = (0..cfg.n_m)
        .map(|_| {
            let genome = random_genome(limits, &mut init_rng);
            let params = match source {
                CountSource::BiGan(_) => ContinuousParams::midpoint(limits),
                CountSource::Genes(v) => sample_counts(v, limits, &mut init_rng),
            };
            Candidate::new(genome, params)
        })
        .collect();
    let mut bigan = match source {
        CountSource::BiGan(bc) => Some(BiGanState::new(bc, limits, &mut rng_for(seed, &[BIGAN_INIT]))?),
        CountSource::Genes(_) => None,
    };
    let mut reference = bigan_reference(&population[0].genome);

    for generation in 1..=cfg.generations {
        if cfg.budget_evals.is_some_and(|b| history.total_evaluations >= b)
            || cfg.budget_seconds.is_some_and(|b| started.elapsed().as_secs_f64() >= b)
        {
            break;
        }
        let mut rng = rng_for(seed, &[GENERATION, generation as u64]);
        let mut evaluations = 0;
        let mut bigan_records = Vec::new();
        if let (Some(state), CountSource::BiGan(bc)) = (bigan.as_mut(), source) {
            for it in 0..cfg.bigan_iters_per_gen {
                let fitness_of = |p: &ContinuousParams, k: usize| {
                    let c = Candidate::new(reference.clone(), p.clone());
                    let s = derive(seed, &[BIGAN_EVAL, generation as u64, it as u64, k as u64]);
                    backend.evaluate(&c, s).accuracy
                };
                let rec = bigan_iteration(state, limits, fitness_of, bc, &mut rng);
                evaluations += rec.evaluations;
                bigan_records.push(rec);
            }
            for c in population.iter_mut().filter(|c| c.fitness.is_none()) {
                c.params = state.propose_params(limits, &mut rng);
            }
        }
        evaluations += evaluate_population(&mut population, backend, seed, generation);

        let next = breed(&population, cfg, limits, source, &mut rng)?;
        let best = population.iter().max_by(|a, b| score(a).total_cmp(&score(b))).expect("population");
        reference = bigan_reference(&best.genome);

        let mut record = generation_record(generation, std::mem::replace(&mut population, next), evaluations);
        record.bigan = bigan_records;
        history.push(record, &started);
    }
    Ok(history)
}

/// GA with Bi-GAN-proposed counts.
pub fn evolve(
    cfg: &GaConfig,
    limits: &SearchLimits,
    backend: &dyn FitnessBackend,
    bigan: &BiGanConfig,
    seed: u64,
) -> Result<RunHistory> {
    run_ga("proposed", cfg, limits, backend, &CountSource::BiGan(bigan.clone()), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{SurrogateBackend, SurrogateSpec};
    use crate::genome::{validate, Activation, ConvLayerGene, DenseLayerGene};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::collections::HashSet;

    fn cfg(n_m: usize, t: usize, r: usize, d: usize) -> GaConfig {
        GaConfig { n_m, t, r, d, ..GaConfig::default() }
    }

    #[test]
    fn selection_keeps_top_and_adds_random() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        for seed in 0..50 {
            let pool = select_parents(&scores, &cfg(6, 2, 1, 0), &mut rng_for(seed, &[])).unwrap();
            assert_eq!(pool.len(), 3);
            assert_eq!(&pool[..2], &[0, 1]);
            assert!((2..6).contains(&pool[2]));
        }
        let scores: Vec<f64> = (0..25).map(|i| i as f64 / 25.0).collect();
        let pool = select_parents(&scores, &GaConfig::default(), &mut rng_for(1, &[])).unwrap();
        assert_eq!(pool.len(), 5);
        assert!(select_parents(&scores, &cfg(25, 1, 1, 1), &mut rng_for(1, &[])).is_err());
    }

    #[test]
    fn selection_breaks_ties_by_index() {
        let scores = [0.5, 0.9, 0.9, 0.5, 0.9];
        let pool = select_parents(&scores, &cfg(5, 3, 0, 0), &mut rng_for(0, &[])).unwrap();
        assert_eq!(pool, vec![1, 2, 4]);
        let pool = select_parents(&[0.1, 0.1, 0.1, 0.1], &cfg(4, 2, 0, 0), &mut rng_for(0, &[])).unwrap();
        assert_eq!(pool, vec![0, 1]);
    }

    #[test]
    fn pairing_two_parents_reuses_the_only_pair() {
        let pairs = pair_parents(2, 3, &mut rng_for(0, &[])).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|&(a, b)| a != b && a.max(b) == 1 && a.min(b) == 0));
        assert!(pair_parents(1, 3, &mut rng_for(0, &[])).is_err());
    }

    #[test]
    fn pairing_four_parents_two_children_is_disjoint() {
        for seed in 0..50 {
            let pairs = pair_parents(4, 2, &mut rng_for(seed, &[])).unwrap();
            let used: HashSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            assert_eq!(used.len(), 4);
        }
    }

    proptest! {
        #[test]
        fn pairing_balances_counters(half in 1usize..8, mult in 1usize..5, seed in any::<u64>()) {
            let pool = 2 * half;
            // 2·n_m a multiple of the pool size
            let n_m = pool * mult / 2;
            let pairs = pair_parents(pool, n_m, &mut rng_for(seed, &[])).unwrap();
            let mut counters = vec![0; pool];
            for (a, b) in pairs {
                prop_assert!(a != b);
                counters[a] += 1;
                counters[b] += 1;
            }
            prop_assert!(counters.iter().max().unwrap() - counters.iter().min().unwrap() <= 1);
        }
    }

    fn labelled(tag: u32, limits: &SearchLimits) -> Candidate {
        let mut rng = rng_for(tag as u64, &[]);
        let mut c = Candidate::new(random_genome(limits, &mut rng), ContinuousParams::midpoint(limits));
        c.params.filters.iter_mut().for_each(|f| *f = tag);
        c.params.neurons.iter_mut().for_each(|n| *n = 100 + tag);
        for g in &mut c.genome.conv {
            g.exists = true;
        }
        for g in &mut c.genome.dense {
            g.exists = true;
        }
        c
    }

    #[test]
    fn crossover_layout() {
        let l = SearchLimits::new(3, 3);
        let a = labelled(1, &l);
        let b = labelled(2, &l);
        let child = crossover_at(&a, &b, 2, 1);
        assert_eq!(child.genome.conv, vec![a.genome.conv[0].clone(), a.genome.conv[1].clone(), b.genome.conv[2].clone()]);
        assert_eq!(child.genome.dense, vec![a.genome.dense[0].clone(), b.genome.dense[1].clone(), b.genome.dense[2].clone()]);
        assert_eq!(child.params.filters, vec![1, 1, 2]);
        assert_eq!(child.params.neurons, vec![101, 102, 102]);
        for seed in 0..20 {
            let same = crossover(&a, &a, &mut rng_for(seed, &[]));
            assert_eq!(same.genome, a.genome);
            assert_eq!(same.params, a.params);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn crossover_genes_come_from_one_parent(seed in any::<u64>()) {
            let l = SearchLimits::new(3, 2);
            let mut rng = rng_for(seed, &[]);
            let a = Candidate::new(random_genome(&l, &mut rng), ContinuousParams::midpoint(&l));
            let b = Candidate::new(random_genome(&l, &mut rng), ContinuousParams::midpoint(&l));
            let id1 = rng.random_range(1..=3);
            let id2 = rng.random_range(1..=2);
            let child = crossover_at(&a, &b, id1, id2);
            prop_assert!(validate(&child.genome, &l).is_ok());
            // repair may only switch layer 1 on
            let mut raw = child.genome.clone();
            for (i, g) in raw.conv.iter_mut().enumerate() {
                let src = if i < id1 { &a.genome.conv[i] } else { &b.genome.conv[i] };
                prop_assert_eq!(g.kernel_size, src.kernel_size);
                prop_assert_eq!(g.activation, src.activation);
                prop_assert_eq!(g.batch_norm, src.batch_norm);
                prop_assert_eq!(g.max_pool, src.max_pool);
                prop_assert!(g.exists == src.exists || i == 0 && g.exists);
            }
            for (i, g) in raw.dense.iter_mut().enumerate() {
                let src = if i < id2 { &a.genome.dense[i] } else { &b.genome.dense[i] };
                prop_assert_eq!(g.activation, src.activation);
                prop_assert_eq!(g.batch_norm, src.batch_norm);
                prop_assert_eq!(g.dropout, src.dropout);
                prop_assert!(g.exists == src.exists || i == 0 && g.exists);
            }
        }
    }

    #[test]
    fn mutation_changes_exactly_the_chosen_field() {
        let l = SearchLimits::new(3, 3);
        let mut g = labelled(1, &l).genome;
        g.conv[0].kernel_size = 3;
        mutate_field(&mut g, &l, LayerKind::Conv, 1, GeneField::KernelSize, &mut rng_for(0, &[]));
        assert_eq!(g.conv[0].kernel_size, 5);
        for seed in 0..30 {
            let before = g.dense[1].activation;
            let mut h = g.clone();
            mutate_field(&mut h, &l, LayerKind::Dense, 2, GeneField::Activation, &mut rng_for(seed, &[]));
            assert_ne!(h.dense[1].activation, before);
            assert!(Activation::ALL.contains(&h.dense[1].activation));
        }
    }

    #[test]
    fn mutation_closure() {
        let l = SearchLimits::new(3, 3);
        let mut rng = rng_for(11, &[]);
        let mut g = random_genome(&l, &mut rng);
        for _ in 0..20_000 {
            g = mutate(&g, &l, &mut rng);
            assert!(validate(&g, &l).is_ok());
        }
    }

    #[test]
    fn mutation_count_rounds_up() {
        assert_eq!(cfg(25, 4, 2, 1).mutation_count(), 5);
        assert_eq!(cfg(10, 4, 2, 1).mutation_count(), 2);
        assert_eq!(cfg(4, 2, 1, 1).mutation_count(), 1);
        assert_eq!(cfg(6, 2, 1, 1).mutation_count(), 2);
    }

    fn surrogate(l: &SearchLimits) -> SurrogateBackend {
        let target = Genome {
            conv: vec![
                ConvLayerGene { exists: true, kernel_size: 5, activation: Activation::Relu, batch_norm: true, max_pool: false };
                l.max_conv
            ],
            dense: vec![
                DenseLayerGene { exists: true, activation: Activation::Tanh, batch_norm: false, dropout: true };
                l.max_dense
            ],
        };
        let counts = ContinuousParams { filters: vec![40; l.max_conv], neurons: vec![700; l.max_dense] };
        SurrogateBackend(SurrogateSpec::with_relative_widths(l, target, counts, 0.1))
    }

    #[test]
    fn one_generation_of_four() {
        let l = SearchLimits::new(2, 2);
        let c = GaConfig { n_m: 4, t: 2, r: 1, d: 1, generations: 1, ..GaConfig::default() };
        let b = BiGanConfig { m: 3, ..BiGanConfig::default() };
        let h = evolve(&c, &l, &surrogate(&l), &b, 5).unwrap();
        assert_eq!(h.records.len(), 1);
        assert_eq!(h.records[0].candidates.len(), 4);
        assert_eq!(h.records[0].evaluations, 4 + 2 * 3);
        assert_eq!(h.total_evaluations, 10);
    }

    #[test]
    fn runs_are_reproducible_and_well_formed() {
        let l = SearchLimits::new(3, 3);
        let c = GaConfig { n_m: 8, generations: 6, ..GaConfig::default() };
        let b = BiGanConfig { m: 4, ..BiGanConfig::default() };
        let h1 = evolve(&c, &l, &surrogate(&l), &b, 42).unwrap();
        let h2 = evolve(&c, &l, &surrogate(&l), &b, 42).unwrap();
        assert_eq!(h1.to_jsonl().unwrap(), h2.to_jsonl().unwrap());
        assert_ne!(h1.to_jsonl().unwrap(), evolve(&c, &l, &surrogate(&l), &b, 43).unwrap().to_jsonl().unwrap());
        for (i, r) in h1.records.iter().enumerate() {
            assert_eq!(r.generation, i + 1);
            assert_eq!(r.candidates.len(), 8);
            assert_eq!(r.evaluations, 8 + 2 * 4);
            assert!(r.candidates.iter().all(|c| validate(&c.genome, &l).is_ok() && c.params.within(&l)));
        }
        assert!(h1.records.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
        let back = RunHistory {
            records: RunHistory::records_from_jsonl(&h1.to_jsonl().unwrap()).unwrap(),
            ..h1.clone()
        };
        assert_eq!(back.to_jsonl().unwrap(), h1.to_jsonl().unwrap());
    }

    #[test]
    fn evaluation_budget_stops_at_generation_boundary() {
        let l = SearchLimits::new(2, 2);
        let c = GaConfig { n_m: 6, t: 3, r: 1, d: 1, generations: 1000, budget_evals: Some(100), ..GaConfig::default() };
        let b = BiGanConfig { m: 2, ..BiGanConfig::default() };
        let h = evolve(&c, &l, &surrogate(&l), &b, 1).unwrap();
        // 10 per generation: stops as soon as 100 are spent
        assert_eq!(h.total_evaluations, 100);
        let tight = GaConfig { budget_evals: Some(95), ..c };
        let h = evolve(&tight, &l, &surrogate(&l), &b, 1).unwrap();
        assert!(h.total_evaluations >= 95 && h.total_evaluations < 95 + 10);
    }

    #[test]
    fn breeding_replaces_every_parent() {
        let l = SearchLimits::new(2, 2);
        let c = GaConfig { n_m: 6, t: 3, r: 1, d: 1, ..GaConfig::default() };
        let backend = surrogate(&l);
        let mut rng = rng_for(3, &[]);
        let mut pop: Vec<Candidate> = (0..6)
            .map(|_| Candidate::new(random_genome(&l, &mut rng), ContinuousParams::midpoint(&l)))
            .collect();
        evaluate_population(&mut pop, &backend, 0, 1);
        let source = CountSource::BiGan(BiGanConfig::default());
        let next = breed(&pop, &c, &l, &source, &mut rng).unwrap();
        assert_eq!(next.len(), 6);
        assert!(next.iter().all(|c| c.fitness.is_none()));

        let elite = GaConfig { elitism: true, ..c };
        let next = breed(&pop, &elite, &l, &source, &mut rng).unwrap();
        let best = pop.iter().map(Candidate::accuracy).fold(0.0, f64::max);
        assert_eq!(next[0].accuracy(), best);
        assert!(next[1..].iter().all(|c| c.fitness.is_none()));
    }

    #[test]
    fn elitism_makes_best_non_decreasing() {
        let l = SearchLimits::new(2, 2);
        let c = GaConfig { n_m: 6, t: 3, r: 1, d: 1, generations: 15, elitism: true, ..GaConfig::default() };
        let h = evolve(&c, &l, &surrogate(&l), &BiGanConfig { m: 2, ..BiGanConfig::default() }, 9).unwrap();
        assert!(h.records.windows(2).all(|w| w[1].best_fitness >= w[0].best_fitness));
        assert!(h.records[1..].iter().all(|r| r.evaluations == 5 + 4));
    }

    #[test]
    fn config_checks() {
        assert!(GaConfig::default().check().is_ok());
        assert!(cfg(1, 1, 1, 0).check().is_err());
        assert!(cfg(10, 1, 1, 1).check().is_err());
        assert!(GaConfig { mutation_fraction: 1.5, ..GaConfig::default() }.check().is_err());
    }
}
