//! Two-generator adversarial optimizer for the integer filter and neuron
//! counts.
//!
//! Each iteration scores `m` proposals from each generator, labels the one
//! with the higher mean fitness as the better generator, trains the
//! discriminator to tell the two apart and moves the worse generator toward
//! what the discriminator believes the better one produces.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{ContinuousParams, SearchLimits};

const LEAKY_SLOPE: f64 = 0.01;
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiGanConfig {
    pub noise_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Proposals scored per generator per iteration.
    pub m: usize,
    /// Step sizes. The objectives saturate quickly, so much smaller rates
    /// leave the generators nearly still over a few hundred iterations.
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub probe_size: usize,
}

impl Default for BiGanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 16,
            gen_hidden: vec![64, 64],
            disc_hidden: vec![64, 32],
            m: 100,
            gen_lr: 1.0,
            disc_lr: 1.0,
            probe_size: 16,
        }
    }
}

impl BiGanConfig {
    /// Defaults for trained fitness, where every proposal costs a training run.
    pub fn for_trained_fitness() -> Self {
        Self {
            m: 8,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.noise_dim == 0 {
            problems.push("noise_dim must be positive");
        }
        if self.m == 0 {
            problems.push("m must be at least 1");
        }
        if self.probe_size == 0 {
            problems.push("probe_size must be positive");
        }
        if !(self.gen_lr > 0.0 && self.disc_lr > 0.0) {
            problems.push("learning rates must be positive");
        }
        if self.gen_hidden.iter().chain(&self.disc_hidden).any(|&h| h == 0) {
            problems.push("hidden layer sizes must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenseLayer {
    inputs: usize,
    outputs: usize,
    /// Row-major `[outputs, inputs]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OutputAct {
    Tanh,
    /// Raw logit; the discriminator applies the logistic function itself.
    Linear,
}

/// Fully connected net with leaky-ReLU hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    layers: Vec<DenseLayer>,
}

struct MlpTrace {
    /// Input to each layer, then the final output.
    activations: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpWeights {
    /// Uniform in `±sqrt(1 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (1.0 / w[0] as f64).sqrt();
                DenseLayer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn trace(&self, x: &[f64], out_act: OutputAct) -> MlpTrace {
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    layer.bias[o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            let a = z
                .iter()
                .map(|&v| match (li == last, out_act) {
                    (true, OutputAct::Tanh) => v.tanh(),
                    (true, OutputAct::Linear) => v,
                    _ if v > 0.0 => v,
                    _ => LEAKY_SLOPE * v,
                })
                .collect();
            pre.push(z);
            activations.push(a);
        }
        MlpTrace { activations, pre }
    }

    /// Accumulates `scale · ∂/∂θ` into `grads` given `dout = ∂L/∂output`
    /// and returns `∂L/∂input`.
    fn backward(&self, trace: &MlpTrace, dout: &[f64], out_act: OutputAct, grads: &mut MlpWeights, scale: f64) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = dout.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let z = &trace.pre[li];
            let y = &trace.activations[li + 1];
            for o in 0..layer.outputs {
                let d = match (li == last, out_act) {
                    (true, OutputAct::Tanh) => 1.0 - y[o] * y[o],
                    (true, OutputAct::Linear) => 1.0,
                    _ if z[o] > 0.0 => 1.0,
                    _ => LEAKY_SLOPE,
                };
                delta[o] *= d;
            }
            let input = &trace.activations[li];
            let g = &mut grads.layers[li];
            let mut dinput = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                g.bias[o] += scale * delta[o];
                let row = o * layer.inputs;
                for i in 0..layer.inputs {
                    g.weights[row + i] += scale * delta[o] * input[i];
                    dinput[i] += layer.weights[row + i] * delta[o];
                }
            }
            delta = dinput;
        }
        delta
    }

    fn shape(&self) -> Vec<usize> {
        std::iter::once(self.input_len()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    /// `self += step · grads`
    fn add_scaled(&mut self, grads: &MlpWeights, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w += step * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b += step * d);
        }
    }
}

/// Hidden layers leaky ReLU, output tanh: every component lies in (-1, 1).
pub fn generator_forward(g: &MlpWeights, z: &[f64]) -> Vec<f64> {
    g.trace(z, OutputAct::Tanh).activations.pop().unwrap()
}

/// Probability that `g_raw` came from the better generator.
pub fn discriminator_forward(d: &MlpWeights, g_raw: &[f64]) -> f64 {
    sigmoid(d.trace(g_raw, OutputAct::Linear).activations.pop().unwrap()[0])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = -softplus(-x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Maps each raw component from (-1, 1) onto its integer bound range:
/// `round(raw · (max - min) / 2 + (max + min) / 2)`, clamped.
pub fn rescale(raw: &[f64], bounds: &[(u32, u32)]) -> Vec<u32> {
    raw.iter()
        .zip(bounds)
        .map(|(&r, &(lo, hi))| {
            let (lo_f, hi_f) = (lo as f64, hi as f64);
            let v = (r * (hi_f - lo_f) / 2.0 + (hi_f + lo_f) / 2.0).round();
            v.clamp(lo_f, hi_f) as u32
        })
        .collect()
}

pub fn count_bounds(limits: &SearchLimits) -> Vec<(u32, u32)> {
    (0..limits.count_len()).map(|i| limits.count_bounds(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorLabel {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
}

impl GeneratorLabel {
    pub fn other(self) -> Self {
        match self {
            Self::First => Self::Second,
            Self::Second => Self::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiGanState {
    pub version: u32,
    pub g1: MlpWeights,
    pub g2: MlpWeights,
    pub disc: MlpWeights,
    pub better: GeneratorLabel,
    pub equal_streak: u32,
    pub probe_noise: Vec<Vec<f64>>,
    pub bounds: Vec<(u32, u32)>,
    pub iterations: u64,
    pub reinits: u64,
}

/// What happened in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub acc1: f64,
    pub acc2: f64,
    pub better: GeneratorLabel,
    /// Discriminator objective before its step.
    pub d_objective: f64,
    /// Worse generator's objective before its step; absent when the step
    /// was skipped because the generators agreed on the probe batch.
    pub g_objective: Option<f64>,
    pub reinitialized: bool,
    pub evaluations: usize,
}

fn noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl BiGanState {
    pub fn new<R: Rng + ?Sized>(cfg: &BiGanConfig, limits: &SearchLimits, rng: &mut R) -> Result<Self> {
        cfg.check()?;
        limits.check()?;
        let out = limits.count_len();
        let gen_dims = generator_dims(cfg, out);
        let disc_dims: Vec<usize> = std::iter::once(out).chain(cfg.disc_hidden.iter().copied()).chain([1]).collect();
        let g1 = MlpWeights::init(&gen_dims, rng);
        let g2 = MlpWeights::init(&gen_dims, rng);
        let disc = MlpWeights::init(&disc_dims, rng);
        let probe_noise = (0..cfg.probe_size).map(|_| noise(cfg.noise_dim, rng)).collect();
        Ok(Self {
            version: STATE_VERSION,
            g1,
            g2,
            disc,
            better: GeneratorLabel::First,
            equal_streak: 0,
            probe_noise,
            bounds: count_bounds(limits),
            iterations: 0,
            reinits: 0,
        })
    }

    pub fn generator(&self, label: GeneratorLabel) -> &MlpWeights {
        match label {
            GeneratorLabel::First => &self.g1,
            GeneratorLabel::Second => &self.g2,
        }
    }

    fn generator_mut(&mut self, label: GeneratorLabel) -> &mut MlpWeights {
        match label {
            GeneratorLabel::First => &mut self.g1,
            GeneratorLabel::Second => &mut self.g2,
        }
    }

    fn noise_dim(&self) -> usize {
        self.g1.input_len()
    }

    /// Rescaled outputs of one generator over the probe batch.
    pub fn probe_counts(&self, label: GeneratorLabel) -> Vec<Vec<u32>> {
        let g = self.generator(label);
        self.probe_noise
            .iter()
            .map(|z| rescale(&generator_forward(g, z), &self.bounds))
            .collect()
    }

    /// Mean rescaled (real-valued) probe output of the better generator.
    pub fn mean_probe_output(&self) -> Vec<f64> {
        let probes = self.probe_counts(self.better);
        let n = probes.len() as f64;
        (0..self.bounds.len())
            .map(|j| probes.iter().map(|p| p[j] as f64).sum::<f64>() / n)
            .collect()
    }

    /// Tracks how many consecutive checks found both generators agreeing on
    /// every probe vector; on the second such check the worse generator is
    /// re-drawn. Returns whether the generators currently agree and whether
    /// a re-initialization happened.
    pub fn reinit_if_stuck<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (bool, bool) {
        let equal = self.probe_counts(GeneratorLabel::First) == self.probe_counts(GeneratorLabel::Second);
        if !equal {
            self.equal_streak = 0;
            return (false, false);
        }
        self.equal_streak += 1;
        if self.equal_streak >= 2 {
            let dims = self.g1.shape();
            *self.generator_mut(self.better.other()) = MlpWeights::init(&dims, rng);
            self.equal_streak = 0;
            self.reinits += 1;
            return (true, true);
        }
        (true, false)
    }

    /// Fresh noise through the better generator.
    pub fn propose_params<R: Rng + ?Sized>(&self, limits: &SearchLimits, rng: &mut R) -> ContinuousParams {
        let z = noise(self.noise_dim(), rng);
        let raw = generator_forward(self.generator(self.better), &z);
        ContinuousParams::from_flat(limits, &rescale(&raw, &self.bounds))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(text)?;
        if state.version != STATE_VERSION {
            return Err(Error::Parse(format!(
                "bigan state version {} not supported (expected {STATE_VERSION})",
                state.version
            )));
        }
        Ok(state)
    }
}

fn generator_dims(cfg: &BiGanConfig, out: usize) -> Vec<usize> {
    std::iter::once(cfg.noise_dim).chain(cfg.gen_hidden.iter().copied()).chain([out]).collect()
}

/// `mean[ln D(a) + ln(1 - D(b))]` over paired raw outputs.
pub fn discriminator_objective(d: &MlpWeights, better: &[Vec<f64>], worse: &[Vec<f64>]) -> f64 {
    let logit = |x: &[f64]| d.trace(x, OutputAct::Linear).activations.pop().unwrap()[0];
    let sum_a: f64 = better.iter().map(|x| log_sigmoid(logit(x))).sum::<f64>() / better.len() as f64;
    let sum_b: f64 = worse.iter().map(|x| log_sigmoid(-logit(x))).sum::<f64>() / worse.len() as f64;
    sum_a + sum_b
}

/// `mean ln(1 - D(G(z)))` over a noise batch.
pub fn generator_objective(g: &MlpWeights, d: &MlpWeights, noise: &[Vec<f64>]) -> f64 {
    noise
        .iter()
        .map(|z| {
            let x = generator_forward(g, z);
            log_sigmoid(-d.trace(&x, OutputAct::Linear).activations.pop().unwrap()[0])
        })
        .sum::<f64>()
        / noise.len() as f64
}

/// Gradient of [`discriminator_objective`] with respect to the discriminator.
fn discriminator_gradient(d: &MlpWeights, better: &[Vec<f64>], worse: &[Vec<f64>]) -> MlpWeights {
    let mut grads = MlpWeights::zeros(&d.shape());
    for (set, label) in [(better, 1.0), (worse, 0.0)] {
        let scale = 1.0 / set.len() as f64;
        for x in set {
            let trace = d.trace(x, OutputAct::Linear);
            let p = sigmoid(trace.activations.last().unwrap()[0]);
            // d/dl ln σ(l) = 1 - p, d/dl ln(1 - σ(l)) = -p
            d.backward(&trace, &[label - p], OutputAct::Linear, &mut grads, scale);
        }
    }
    grads
}

/// Gradient of [`generator_objective`] with respect to the generator.
fn generator_gradient(g: &MlpWeights, d: &MlpWeights, noise: &[Vec<f64>]) -> MlpWeights {
    let mut g_grads = MlpWeights::zeros(&g.shape());
    let mut scratch = MlpWeights::zeros(&d.shape());
    let scale = 1.0 / noise.len() as f64;
    for z in noise {
        let g_trace = g.trace(z, OutputAct::Tanh);
        let x = g_trace.activations.last().unwrap();
        let d_trace = d.trace(x, OutputAct::Linear);
        let p = sigmoid(d_trace.activations.last().unwrap()[0]);
        let dx = d.backward(&d_trace, &[-p], OutputAct::Linear, &mut scratch, 0.0);
        g.backward(&g_trace, &dx, OutputAct::Tanh, &mut g_grads, scale);
    }
    g_grads
}

/// One ascent step for the discriminator on the labelled batches, then
/// (unless `skip_worse`) one descent step for the worse generator on its
/// noise batch. Returns both objectives measured before their steps.
fn adversarial_update(
    state: &mut BiGanState,
    a_raw: &[Vec<f64>],
    b_raw: &[Vec<f64>],
    b_noise: &[Vec<f64>],
    cfg: &BiGanConfig,
    skip_worse: bool,
) -> (f64, Option<f64>) {
    let d_objective = discriminator_objective(&state.disc, a_raw, b_raw);
    let d_grads = discriminator_gradient(&state.disc, a_raw, b_raw);
    state.disc.add_scaled(&d_grads, cfg.disc_lr);
    if skip_worse {
        return (d_objective, None);
    }
    let b = state.better.other();
    let g = state.generator(b);
    let objective = generator_objective(g, &state.disc, b_noise);
    let grads = generator_gradient(g, &state.disc, b_noise);
    state.generator_mut(b).add_scaled(&grads, -cfg.gen_lr);
    (d_objective, Some(objective))
}

/// One round of scoring, relabelling and adversarial updates.
///
/// `fitness_of(params, k)` scores one proposal; `k` runs over `0..2m`
/// (first generator's proposals first) so callers can derive independent
/// seeds. Non-finite scores count as 0.
pub fn bigan_iteration<F, R>(
    state: &mut BiGanState,
    limits: &SearchLimits,
    fitness_of: F,
    cfg: &BiGanConfig,
    rng: &mut R,
) -> IterationRecord
where
    F: Fn(&ContinuousParams, usize) -> f64 + Sync,
    R: Rng + ?Sized,
{
    let (equal, reinitialized) = state.reinit_if_stuck(rng);
    let dim = state.noise_dim();
    let z1: Vec<Vec<f64>> = (0..cfg.m).map(|_| noise(dim, rng)).collect();
    let z2: Vec<Vec<f64>> = (0..cfg.m).map(|_| noise(dim, rng)).collect();
    let raw1: Vec<Vec<f64>> = z1.iter().map(|z| generator_forward(&state.g1, z)).collect();
    let raw2: Vec<Vec<f64>> = z2.iter().map(|z| generator_forward(&state.g2, z)).collect();

    let proposals: Vec<ContinuousParams> = raw1
        .iter()
        .chain(&raw2)
        .map(|r| ContinuousParams::from_flat(limits, &rescale(r, &state.bounds)))
        .collect();
    let scores: Vec<f64> = proposals
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let s = fitness_of(p, k);
            if s.is_finite() {
                s
            } else {
                0.0
            }
        })
        .collect();
    let acc1 = scores[..cfg.m].iter().sum::<f64>() / cfg.m as f64;
    let acc2 = scores[cfg.m..].iter().sum::<f64>() / cfg.m as f64;
    if acc1 > acc2 {
        state.better = GeneratorLabel::First;
    } else if acc2 > acc1 {
        state.better = GeneratorLabel::Second;
    }
    let (a_raw, b_raw, b_noise) = match state.better {
        GeneratorLabel::First => (&raw1, &raw2, &z2),
        GeneratorLabel::Second => (&raw2, &raw1, &z1),
    };

    // While the generators agree the worse one is left alone, so agreement
    // can persist into the next check and trigger a re-draw.
    let skip_worse = equal && !reinitialized;
    let (d_objective, g_objective) = adversarial_update(state, a_raw, b_raw, b_noise, cfg, skip_worse);
    state.iterations += 1;

    IterationRecord {
        acc1,
        acc2,
        better: state.better,
        d_objective,
        g_objective,
        reinitialized,
        evaluations: 2 * cfg.m,
    }
}
