//! Fitness functions and the data they consume.
//!
//! Two backends implement [`FitnessBackend`]: [`TrainedBackend`] builds and
//! trains the candidate's network, [`SurrogateBackend`] scores it
//! analytically against a known target so optimizer behaviour can be
//! checked exactly and cheaply.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{Candidate, ContinuousParams, Genome, SearchLimits};
use crate::seed::SearchRng;
use crate::tinynet::{self, Tensor, TrainConfig};

/// Outcome of scoring one candidate.
///
/// Wall time is kept in memory only so that serialized histories are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub accuracy: f64,
    #[serde(default)]
    pub epochs_run: usize,
    /// Validation cross-entropy at the best epoch (trained fitness) or
    /// `1 - score` (surrogate). Absent when the candidate could not be built.
    #[serde(default)]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl FitnessReport {
    pub fn failed(diagnostic: impl Into<String>) -> Self {
        Self {
            accuracy: 0.0,
            epochs_run: 0,
            loss: None,
            diagnostic: Some(diagnostic.into()),
            wall_time: 0.0,
        }
    }
}

/// Anything that can score a candidate. `seed` selects the rng stream for
/// that one evaluation, so results do not depend on evaluation order.
pub trait FitnessBackend: Sync {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> FitnessReport;
}

/// One split of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn view(&self) -> (&Tensor, &[usize]) {
        (&self.inputs, &self.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    /// Held-out split; absent for IDX files, which are only split train/val.
    pub test: Option<Split>,
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn check(&self) -> Result<()> {
        for (name, split) in [("train", Some(&self.train)), ("val", Some(&self.val)), ("test", self.test.as_ref())] {
            let Some(split) = split else { continue };
            if split.is_empty() {
                return Err(Error::Dataset(format!("{name} split is empty")));
            }
            if let Some(&bad) = split.labels.iter().find(|&&l| l >= self.n_classes) {
                return Err(Error::InvalidLabel {
                    label: bad,
                    n_classes: self.n_classes,
                });
            }
            if split.inputs.shape[1..] != self.input_shape[..] || split.inputs.rows() != split.len() {
                return Err(Error::Dataset(format!("{name} split shape {:?} mismatch", split.inputs.shape)));
            }
        }
        Ok(())
    }
}

/// Which split the reported fitness is measured on. Validation accuracy is
/// the default; `Train` scores on the data the network was fit to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessSplit {
    #[default]
    Val,
    Train,
}

/// Builds, trains and scores a candidate. Never fails: build or training
/// errors produce accuracy 0 with a diagnostic.
pub fn evaluate_trained<R: Rng + ?Sized>(
    candidate: &Candidate,
    dataset: &Dataset,
    cfg: &TrainConfig,
    split: FitnessSplit,
    rng: &mut R,
) -> FitnessReport {
    let start = Instant::now();
    let mut report = match train_candidate(candidate, dataset, cfg, split, rng) {
        Ok(out) => FitnessReport {
            accuracy: out.best_val_accuracy,
            epochs_run: out.epochs_run,
            loss: Some(out.best_val_loss),
            diagnostic: None,
            wall_time: 0.0,
        },
        Err(e) => FitnessReport::failed(e.to_string()),
    };
    report.wall_time = start.elapsed().as_secs_f64();
    report
}

fn train_candidate<R: Rng + ?Sized>(
    candidate: &Candidate,
    dataset: &Dataset,
    cfg: &TrainConfig,
    split: FitnessSplit,
    rng: &mut R,
) -> Result<tinynet::TrainOutcome> {
    let net = tinynet::build_network(
        &candidate.genome,
        &candidate.params,
        &dataset.input_shape,
        dataset.n_classes,
        cfg.dropout_rate,
        rng,
    )?;
    let scored = match split {
        FitnessSplit::Val => dataset.val.view(),
        FitnessSplit::Train => dataset.train.view(),
    };
    tinynet::train_with_early_stop(net, dataset.train.view(), scored, cfg, rng)
}

#[derive(Debug, Clone)]
pub struct TrainedBackend {
    pub dataset: Dataset,
    pub train: TrainConfig,
    pub split: FitnessSplit,
}

impl FitnessBackend for TrainedBackend {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> FitnessReport {
        let mut rng = SearchRng::seed_from_u64(seed);
        evaluate_trained(candidate, &self.dataset, &self.train, self.split, &mut rng)
    }
}

/// Analytic fitness with a known optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub target_genome: Genome,
    pub target_counts: ContinuousParams,
    /// One width per count slot, `[filters.., neurons..]`.
    pub widths: Vec<f64>,
    #[serde(default = "default_w_cont")]
    pub w_cont: f64,
    #[serde(default = "default_w_disc")]
    pub w_disc: f64,
}

fn default_w_cont() -> f64 {
    0.7
}

fn default_w_disc() -> f64 {
    0.3
}

impl SurrogateSpec {
    /// Widths set to `fraction` of each slot's bound range.
    pub fn with_relative_widths(
        limits: &SearchLimits,
        target_genome: Genome,
        target_counts: ContinuousParams,
        fraction: f64,
    ) -> Self {
        let widths = (0..limits.count_len())
            .map(|i| {
                let (lo, hi) = limits.count_bounds(i);
                fraction * (hi - lo) as f64
            })
            .collect();
        Self {
            target_genome,
            target_counts,
            widths,
            w_cont: default_w_cont(),
            w_disc: default_w_disc(),
        }
    }

    pub fn check(&self, limits: &SearchLimits) -> Result<()> {
        let mut problems = Vec::new();
        if (self.w_cont + self.w_disc - 1.0).abs() > 1e-9 {
            problems.push(format!("surrogate weights sum to {}, not 1", self.w_cont + self.w_disc));
        }
        if self.w_cont < 0.0 || self.w_disc < 0.0 {
            problems.push("surrogate weights must be non-negative".into());
        }
        if self.widths.len() != limits.count_len() {
            problems.push(format!("surrogate needs {} widths, got {}", limits.count_len(), self.widths.len()));
        }
        if self.widths.iter().any(|w| !(*w > 0.0)) {
            problems.push("surrogate widths must be positive".into());
        }
        if let Err(v) = crate::genome::validate(&self.target_genome, limits) {
            problems.push(format!("surrogate target genome invalid: {}", v[0]));
        }
        if self.target_counts.filters.len() != limits.max_conv || self.target_counts.neurons.len() != limits.max_dense {
            problems.push("surrogate target counts have the wrong length".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `w_cont · exp(-mean over active layers of ((count - target) / width)²)
///  + w_disc · (fraction of discrete gene fields equal to the target)`.
pub fn surrogate_fitness(candidate: &Candidate, spec: &SurrogateSpec) -> f64 {
    let g = &candidate.genome;
    let t = &spec.target_genome;
    let c = g.conv.len();

    let mut sq = 0.0;
    let mut active = 0usize;
    for (i, _) in g.active_conv() {
        let d = (candidate.params.filters[i] as f64 - spec.target_counts.filters[i] as f64) / spec.widths[i];
        sq += d * d;
        active += 1;
    }
    for (i, _) in g.active_dense() {
        let d = (candidate.params.neurons[i] as f64 - spec.target_counts.neurons[i] as f64) / spec.widths[c + i];
        sq += d * d;
        active += 1;
    }
    let cont = if active == 0 { 0.0 } else { (-sq / active as f64).exp() };

    let mut matched = 0usize;
    let mut fields = 0usize;
    for (a, b) in g.conv.iter().zip(&t.conv) {
        matched += usize::from(a.exists == b.exists)
            + usize::from(a.kernel_size == b.kernel_size)
            + usize::from(a.activation == b.activation)
            + usize::from(a.batch_norm == b.batch_norm)
            + usize::from(a.max_pool == b.max_pool);
        fields += 5;
    }
    for (a, b) in g.dense.iter().zip(&t.dense) {
        matched += usize::from(a.exists == b.exists)
            + usize::from(a.activation == b.activation)
            + usize::from(a.batch_norm == b.batch_norm)
            + usize::from(a.dropout == b.dropout);
        fields += 4;
    }
    let disc = if fields == 0 { 0.0 } else { matched as f64 / fields as f64 };
    (spec.w_cont * cont + spec.w_disc * disc).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct SurrogateBackend(pub SurrogateSpec);

impl FitnessBackend for SurrogateBackend {
    fn evaluate(&self, candidate: &Candidate, _seed: u64) -> FitnessReport {
        let score = surrogate_fitness(candidate, &self.0);
        FitnessReport {
            accuracy: score,
            epochs_run: 0,
            loss: Some(1.0 - score),
            diagnostic: None,
            wall_time: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two Gaussian clouds; linearly separable.
    Blobs,
    /// Hollow rings against filled discs at random positions.
    Rings,
    /// Horizontal against vertical bars at random positions.
    Bars,
}

/// Deterministic two-class dataset, split 60/20/20 with alternating labels
/// so each split is balanced within one sample.
pub fn make_synthetic_dataset(kind: SyntheticKind, n_samples: usize, input_shape: &[usize], seed: u64) -> Result<Dataset> {
    if n_samples < 10 {
        return Err(Error::Dataset(format!("need at least 10 samples, got {n_samples}")));
    }
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Dataset(format!("invalid shape {input_shape:?}")));
    }
    let (h, w) = match (kind, input_shape) {
        (SyntheticKind::Blobs, _) => (0, 0),
        (_, &[1, h, w]) | (_, &[h, w]) if h >= 6 && w >= 6 => (h, w),
        _ => {
            return Err(Error::Dataset(format!(
                "{kind:?} needs a single-channel image shape of at least 6x6, got {input_shape:?}"
            )))
        }
    };
    let features: usize = input_shape.iter().product();
    let mut rng = SearchRng::seed_from_u64(seed);
    // Blob direction: a random ±1 pattern scaled to unit length.
    let direction: Vec<f64> = (0..features)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 } / (features as f64).sqrt())
        .collect();

    let mut values = Vec::with_capacity(n_samples * features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % 2;
        let sample = match kind {
            SyntheticKind::Blobs => {
                let sign = if label == 0 { -1.0 } else { 1.0 };
                direction
                    .iter()
                    .map(|d| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        3.0 * sign * d + 0.5 * z / (features as f64).sqrt() * 2.0
                    })
                    .collect()
            }
            SyntheticKind::Rings => ring_image(&mut rng, h, w, label == 0),
            SyntheticKind::Bars => bar_image(&mut rng, h, w, label == 0),
        };
        values.extend(sample);
        labels.push(label);
    }
    let n_train = n_samples * 3 / 5;
    let n_val = (n_samples - n_train) / 2;
    let split = |from: usize, to: usize| Split {
        inputs: Tensor {
            shape: std::iter::once(to - from).chain(input_shape.iter().copied()).collect(),
            values: values[from * features..to * features].to_vec(),
        },
        labels: labels[from..to].to_vec(),
    };
    let ds = Dataset {
        train: split(0, n_train),
        val: split(n_train, n_train + n_val),
        test: Some(split(n_train + n_val, n_samples)),
        input_shape: input_shape.to_vec(),
        n_classes: 2,
    };
    ds.check()?;
    Ok(ds)
}

fn noisy_canvas<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.15 * z
        })
        .collect()
}

/// Ring outline (`hollow`) or filled disc of matching radius; total ink is
/// equalized so brightness alone does not separate the classes.
fn ring_image<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, hollow: bool) -> Vec<f64> {
    let mut img = noisy_canvas(rng, h, w);
    let max_r = ((h.min(w) as f64) / 2.0 - 1.0).clamp(1.5, 3.5);
    let r: f64 = rng.random_range(1.5..=max_r);
    let cy: f64 = rng.random_range(r..(h as f64 - 1.0 - r).max(r + 1e-9));
    let cx: f64 = rng.random_range(r..(w as f64 - 1.0 - r).max(r + 1e-9));
    let contrast: f64 = rng.random_range(0.6..1.4);
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let on = if hollow { (d - r).abs() <= 0.6 } else { d <= r + 0.6 };
            if on {
                mask[y * w + x] = 1.0;
            }
        }
    }
    let ink: f64 = mask.iter().sum::<f64>().max(1.0);
    let level = contrast * 12.0 / ink;
    for (p, m) in img.iter_mut().zip(&mask) {
        *p += m * level.min(1.5);
    }
    img
}

fn bar_image<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, horizontal: bool) -> Vec<f64> {
    let mut img = noisy_canvas(rng, h, w);
    let contrast: f64 = rng.random_range(0.6..1.4);
    let (long, short) = if horizontal { (w, h) } else { (h, w) };
    let len = rng.random_range(3.max(long / 3)..=long.max(4) - 1);
    let start = rng.random_range(0..=long - len);
    let at = rng.random_range(0..short);
    for i in start..start + len {
        let (y, x) = if horizontal { (at, i) } else { (i, at) };
        img[y * w + x] += contrast;
    }
    img
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

/// Reads an MNIST-style IDX image/label pair. Pixels are scaled to [0, 1];
/// the first `1 - val_fraction` of the (limited) samples train, the rest
/// validate.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>, val_fraction: f64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Dataset(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES,
        });
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS,
        });
    }
    let n_img = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_lab = be_u32(&lab, 4, labels_path)? as usize;
    let pixels = rows * cols;
    if img.len() < 16 + n_img * pixels {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            detail: format!("{} image bytes declared, {} present", n_img * pixels, img.len() - 16),
        });
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            detail: format!("{n_lab} labels declared, {} present", lab.len() - 8),
        });
    }
    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_train = n - n_val;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Dataset(format!("{n} samples cannot be split with val_fraction {val_fraction}")));
    }
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let values: Vec<f64> = img[16..16 + n * pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let split = |from: usize, to: usize| Split {
        inputs: Tensor {
            shape: vec![to - from, 1, rows, cols],
            values: values[from * pixels..to * pixels].to_vec(),
        },
        labels: labels[from..to].to_vec(),
    };
    Ok(Dataset {
        train: split(0, n_train),
        val: split(n_train, n),
        test: None,
        input_shape: vec![1, rows, cols],
        n_classes,
    })
}

/// Shuffled copy of a split; used by callers that want a different sample
/// order without touching the stored dataset.
pub fn shuffled(split: &Split, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..split.len()).collect();
    idx.shuffle(&mut SearchRng::seed_from_u64(seed));
    Split {
        inputs: split.inputs.select_rows(&idx),
        labels: idx.iter().map(|&i| split.labels[i]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{enumerate_genomes, random_genome, validate, Activation, ConvLayerGene, DenseLayerGene};
    use crate::seed::rng_for;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use std::io::Write;

    fn target(limits: &SearchLimits) -> (Genome, ContinuousParams) {
        let g = Genome {
            conv: (0..limits.max_conv)
                .map(|i| ConvLayerGene {
                    exists: i == 0,
                    kernel_size: 5,
                    activation: Activation::LeakyRelu,
                    batch_norm: false,
                    max_pool: true,
                })
                .collect(),
            dense: (0..limits.max_dense)
                .map(|_| DenseLayerGene {
                    exists: true,
                    activation: Activation::Tanh,
                    batch_norm: true,
                    dropout: false,
                })
                .collect(),
        };
        let p = ContinuousParams {
            filters: vec![80; limits.max_conv],
            neurons: vec![601; limits.max_dense],
        };
        (g, p)
    }

    #[test]
    fn surrogate_identity_and_one_width_offset() {
        let l = SearchLimits::new(3, 3);
        let (g, p) = target(&l);
        let spec = SurrogateSpec::with_relative_widths(&l, g.clone(), p.clone(), 0.1);
        let c = Candidate::new(g.clone(), p.clone());
        assert_eq!(surrogate_fitness(&c, &spec), 1.0);

        let mut spec = spec;
        spec.widths = vec![10.0; 6];
        let off = ContinuousParams {
            filters: p.filters.iter().map(|f| f + 10).collect(),
            neurons: p.neurons.iter().map(|n| n - 10).collect(),
        };
        let score = surrogate_fitness(&Candidate::new(g, off), &spec);
        let expected = 0.7 * (-1f64).exp() + 0.3;
        assert!((score - expected).abs() < 1e-12);
        assert!((score - 0.5575).abs() < 1e-4);
    }

    #[test]
    fn surrogate_argmax_is_target_by_enumeration() {
        let l = SearchLimits::new(1, 1);
        let (g, p) = target(&l);
        let spec = SurrogateSpec::with_relative_widths(&l, g.clone(), p.clone(), 0.1);
        let filters: Vec<u32> = (0..8).map(|i| 16 + 32 * i).collect();
        let neurons: Vec<u32> = (0..8).map(|i| 101 + 500 * i).collect();
        assert!(filters.contains(&80) && neurons.contains(&601));
        let mut best = (f64::MIN, None);
        for genome in enumerate_genomes(&l) {
            for &f in &filters {
                for &n in &neurons {
                    let c = Candidate::new(
                        genome.clone(),
                        ContinuousParams {
                            filters: vec![f],
                            neurons: vec![n],
                        },
                    );
                    let s = surrogate_fitness(&c, &spec);
                    if s > best.0 {
                        best = (s, Some(c));
                    }
                }
            }
        }
        let winner = best.1.unwrap();
        assert_eq!(best.0, 1.0);
        assert_eq!(winner.genome, g);
        assert_eq!(winner.params, p);
    }

    proptest! {
        #[test]
        fn surrogate_is_pure_and_bounded(seed in any::<u64>()) {
            let l = SearchLimits::new(3, 2);
            let (g, p) = target(&l);
            let spec = SurrogateSpec::with_relative_widths(&l, g, p, 0.05);
            let mut rng = rng_for(seed, &[]);
            let genome = random_genome(&l, &mut rng);
            let params = ContinuousParams {
                filters: (0..3).map(|_| rng.random_range(1..=256)).collect(),
                neurons: (0..2).map(|_| rng.random_range(10..=4000)).collect(),
            };
            let c = Candidate::new(genome, params);
            let a = surrogate_fitness(&c, &spec);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, surrogate_fitness(&c, &spec));
        }
    }

    #[test]
    fn surrogate_spec_checks() {
        let l = SearchLimits::new(2, 2);
        let (g, p) = target(&l);
        let mut spec = SurrogateSpec::with_relative_widths(&l, g, p, 0.1);
        assert!(spec.check(&l).is_ok());
        spec.w_cont = 0.8;
        assert!(spec.check(&l).is_err());
        spec.w_cont = 0.7;
        spec.widths[0] = 0.0;
        assert!(spec.check(&l).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic_dataset(SyntheticKind::Blobs, 200, &[16], 7).unwrap();
        let b = make_synthetic_dataset(SyntheticKind::Blobs, 200, &[16], 7).unwrap();
        assert_eq!(a, b);
        for kind in [SyntheticKind::Blobs, SyntheticKind::Rings, SyntheticKind::Bars] {
            let shape: &[usize] = if kind == SyntheticKind::Blobs { &[1, 4, 4] } else { &[1, 12, 12] };
            let d = make_synthetic_dataset(kind, 101, shape, 3).unwrap();
            for s in [&d.train, &d.val, d.test.as_ref().unwrap()] {
                let ones = s.labels.iter().filter(|&&l| l == 1).count() as i64;
                assert!((2 * ones - s.len() as i64).abs() <= 1);
            }
            assert_eq!(d.train.len() + d.val.len() + d.test.as_ref().unwrap().len(), 101);
        }
        assert!(make_synthetic_dataset(SyntheticKind::Rings, 100, &[16], 1).is_err());
        assert!(make_synthetic_dataset(SyntheticKind::Blobs, 9, &[16], 1).is_err());
    }

    fn small_candidate() -> Candidate {
        Candidate::new(
            Genome {
                conv: vec![ConvLayerGene {
                    exists: true,
                    kernel_size: 3,
                    activation: Activation::Relu,
                    batch_norm: false,
                    max_pool: false,
                }],
                dense: vec![DenseLayerGene {
                    exists: true,
                    activation: Activation::Relu,
                    batch_norm: false,
                    dropout: false,
                }],
            },
            ContinuousParams {
                filters: vec![2],
                neurons: vec![8],
            },
        )
    }

    #[test]
    fn trained_fitness_on_blobs() {
        let d = make_synthetic_dataset(SyntheticKind::Blobs, 300, &[1, 4, 4], 11).unwrap();
        let mut rng = rng_for(1, &[]);
        let r = evaluate_trained(&small_candidate(), &d, &TrainConfig::default(), FitnessSplit::Val, &mut rng);
        assert!(r.accuracy >= 0.9, "{r:?}");
        assert!(r.diagnostic.is_none());
    }

    #[test]
    fn untrained_fitness_is_near_chance() {
        let d = make_synthetic_dataset(SyntheticKind::Rings, 500, &[1, 12, 12], 12).unwrap();
        assert_eq!(d.val.len(), 100);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let mut rng = rng_for(2, &[]);
        let r = evaluate_trained(&small_candidate(), &d, &cfg, FitnessSplit::Val, &mut rng);
        assert_eq!(r.epochs_run, 0);
        assert!((r.accuracy - 0.5).abs() <= 0.15, "{r:?}");
    }

    #[test]
    fn unbuildable_candidate_scores_zero() {
        let d = make_synthetic_dataset(SyntheticKind::Blobs, 50, &[1, 2, 2], 1).unwrap();
        let mut rng = rng_for(3, &[]);
        let r = evaluate_trained(&small_candidate(), &d, &TrainConfig::default(), FitnessSplit::Val, &mut rng);
        assert_eq!(r.accuracy, 0.0);
        assert!(r.diagnostic.unwrap().contains("smaller than kernel"));
        assert!(validate(&small_candidate().genome, &SearchLimits::new(1, 1)).is_ok());
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        v
    }

    fn idx_labels(n: u32) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_LABELS, n] {
            v.extend(x.to_be_bytes());
        }
        v.extend((0..n).map(|i| (i % 3) as u8));
        v
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_images(120, 4, 4));
        let lab = write(dir.path(), "lab", &idx_labels(120));
        let d = load_idx(&img, &lab, Some(100), 0.2).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (80, 20));
        assert_eq!(d.input_shape, vec![1, 4, 4]);
        assert_eq!(d.n_classes, 3);
        assert_eq!(d.train.inputs.values[1], 1.0 / 255.0);
        assert!(d.train.inputs.values.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut bad = idx_images(10, 4, 4);
        bad[3] = 0x02;
        let bad = write(dir.path(), "bad", &bad);
        let e = load_idx(&bad, &lab, None, 0.2).unwrap_err();
        assert!(matches!(e, Error::BadMagic { .. }) && e.to_string().contains("bad magic"));

        let short = write(dir.path(), "short", &idx_labels(100));
        let e = load_idx(&img, &short, None, 0.2).unwrap_err();
        assert!(matches!(e, Error::CountMismatch { .. }) && e.to_string().contains("count mismatch"));

        let mut trunc = idx_images(120, 4, 4);
        trunc.truncate(100);
        let trunc = write(dir.path(), "trunc", &trunc);
        assert!(matches!(load_idx(&trunc, &lab, None, 0.2), Err(Error::Truncated { .. })));
    }
}
