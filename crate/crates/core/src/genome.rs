//! Discrete architecture encoding: per-layer gene blocks for up to `C`
//! convolutional and `D` dense layers, plus the integer filter / neuron
//! counts that ride alongside each genome.
//!
//! Every gene keeps a legal value even when its layer is switched off, so
//! crossover and mutation are total functions over fixed-length vectors.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::FitnessReport;

/// Number of mutable fields in a conv gene block.
pub const CONV_FIELDS: usize = 5;
/// Number of mutable fields in a dense gene block.
pub const DENSE_FIELDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvLayerGene {
    pub exists: bool,
    pub kernel_size: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DenseLayerGene {
    pub exists: bool,
    pub activation: Activation,
    pub batch_norm: bool,
    pub dropout: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub conv: Vec<ConvLayerGene>,
    pub dense: Vec<DenseLayerGene>,
}

impl Genome {
    pub fn active_conv(&self) -> impl Iterator<Item = (usize, &ConvLayerGene)> {
        self.conv.iter().enumerate().filter(|(_, g)| g.exists)
    }

    pub fn active_dense(&self) -> impl Iterator<Item = (usize, &DenseLayerGene)> {
        self.dense.iter().enumerate().filter(|(_, g)| g.exists)
    }

    /// Forces layer 1 on for any layer kind that has no active layer.
    pub fn repair(&mut self) {
        if !self.conv.iter().any(|g| g.exists) {
            if let Some(first) = self.conv.first_mut() {
                first.exists = true;
            }
        }
        if !self.dense.iter().any(|g| g.exists) {
            if let Some(first) = self.dense.first_mut() {
                first.exists = true;
            }
        }
    }
}

/// Size of the search space and the choice sets each gene draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchLimits {
    #[serde(rename = "C")]
    pub max_conv: usize,
    #[serde(rename = "D")]
    pub max_dense: usize,
    pub neuron_bounds: (u32, u32),
    pub filter_bounds: (u32, u32),
    #[serde(default = "default_kernel_choices")]
    pub kernel_choices: Vec<usize>,
    #[serde(default = "default_activation_choices")]
    pub activation_choices: Vec<Activation>,
}

fn default_kernel_choices() -> Vec<usize> {
    vec![3, 5]
}

fn default_activation_choices() -> Vec<Activation> {
    Activation::ALL.to_vec()
}

impl Default for SearchLimits {
    fn default() -> Self {
        Self::new(3, 3)
    }
}

impl SearchLimits {
    /// Table-default choice sets with `c` conv and `d` dense slots,
    /// neurons in [10, 4000] and filters in [1, 256].
    pub fn new(c: usize, d: usize) -> Self {
        Self {
            max_conv: c,
            max_dense: d,
            neuron_bounds: (10, 4000),
            filter_bounds: (1, 256),
            kernel_choices: default_kernel_choices(),
            activation_choices: default_activation_choices(),
        }
    }

    pub fn with_neuron_bounds(mut self, lo: u32, hi: u32) -> Self {
        self.neuron_bounds = (lo, hi);
        self
    }

    pub fn with_filter_bounds(mut self, lo: u32, hi: u32) -> Self {
        self.filter_bounds = (lo, hi);
        self
    }

    pub fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.max_conv == 0 {
            problems.push("C must be at least 1".to_string());
        }
        if self.max_dense == 0 {
            problems.push("D must be at least 1".to_string());
        }
        for (name, (lo, hi)) in [
            ("neuron_bounds", self.neuron_bounds),
            ("filter_bounds", self.filter_bounds),
        ] {
            if lo < 1 {
                problems.push(format!("{name}: minimum must be >= 1"));
            }
            if lo >= hi {
                problems.push(format!("{name}: minimum {lo} must be below maximum {hi}"));
            }
        }
        if self.kernel_choices.is_empty() || self.kernel_choices.iter().any(|&k| k == 0) {
            problems.push("kernel_choices must be non-empty positive sizes".to_string());
        }
        if self.activation_choices.is_empty() {
            problems.push("activation_choices must be non-empty".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Bounds for output slot `i` of a count vector laid out as
    /// `[filters..C, neurons..D]`.
    pub fn count_bounds(&self, slot: usize) -> (u32, u32) {
        if slot < self.max_conv {
            self.filter_bounds
        } else {
            self.neuron_bounds
        }
    }

    pub fn count_len(&self) -> usize {
        self.max_conv + self.max_dense
    }
}

/// Integer filter counts (one per potential conv layer) and neuron counts
/// (one per potential dense layer).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContinuousParams {
    pub filters: Vec<u32>,
    pub neurons: Vec<u32>,
}

impl ContinuousParams {
    /// Midpoint of every bound; used as a placeholder before counts are assigned.
    pub fn midpoint(limits: &SearchLimits) -> Self {
        let mid = |(lo, hi): (u32, u32)| (lo + hi) / 2;
        Self {
            filters: vec![mid(limits.filter_bounds); limits.max_conv],
            neurons: vec![mid(limits.neuron_bounds); limits.max_dense],
        }
    }

    /// Builds from a flat `[filters.., neurons..]` vector.
    pub fn from_flat(limits: &SearchLimits, flat: &[u32]) -> Self {
        assert_eq!(flat.len(), limits.count_len(), "count vector length");
        Self {
            filters: flat[..limits.max_conv].to_vec(),
            neurons: flat[limits.max_conv..].to_vec(),
        }
    }

    pub fn flat(&self) -> Vec<u32> {
        self.filters.iter().chain(&self.neurons).copied().collect()
    }

    pub fn within(&self, limits: &SearchLimits) -> bool {
        let in_bounds = |v: u32, (lo, hi): (u32, u32)| v >= lo && v <= hi;
        self.filters.len() == limits.max_conv
            && self.neurons.len() == limits.max_dense
            && self.filters.iter().all(|&f| in_bounds(f, limits.filter_bounds))
            && self.neurons.iter().all(|&n| in_bounds(n, limits.neuron_bounds))
    }
}

/// The unit of evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub genome: Genome,
    pub params: ContinuousParams,
    #[serde(default)]
    pub fitness: Option<FitnessReport>,
}

impl Candidate {
    pub fn new(genome: Genome, params: ContinuousParams) -> Self {
        Self {
            genome,
            params,
            fitness: None,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.fitness.as_ref().map_or(0.0, |f| f.accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Dense,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
        })
    }
}

/// Individual gene fields. `Count` only exists in the baseline slot space,
/// where the filter / neuron count is itself a gene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneField {
    Exists,
    KernelSize,
    Activation,
    BatchNorm,
    MaxPool,
    Dropout,
    Count,
}

const CONV_ORDER: [GeneField; 6] = [
    GeneField::Exists,
    GeneField::KernelSize,
    GeneField::Activation,
    GeneField::BatchNorm,
    GeneField::MaxPool,
    GeneField::Count,
];

const DENSE_ORDER: [GeneField; 5] = [
    GeneField::Exists,
    GeneField::Activation,
    GeneField::BatchNorm,
    GeneField::Dropout,
    GeneField::Count,
];

impl fmt::Display for GeneField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneField::Exists => "exists",
            GeneField::KernelSize => "kernel_size",
            GeneField::Activation => "activation",
            GeneField::BatchNorm => "batch_norm",
            GeneField::MaxPool => "max_pool",
            GeneField::Dropout => "dropout",
            GeneField::Count => "count",
        })
    }
}

/// Position of one mutable parameter. `layer` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotDescriptor {
    pub kind: LayerKind,
    pub layer: usize,
    pub field: GeneField,
}

/// Which flat parameter vector a slot index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSpace {
    /// `5C + 4D` genome fields.
    Genome,
    /// `6C + 5D`: genome fields plus one count gene per layer block.
    WithCounts,
}

impl SlotSpace {
    fn widths(self) -> (usize, usize) {
        match self {
            SlotSpace::Genome => (CONV_FIELDS, DENSE_FIELDS),
            SlotSpace::WithCounts => (CONV_FIELDS + 1, DENSE_FIELDS + 1),
        }
    }

    pub fn slot_count(self, limits: &SearchLimits) -> usize {
        let (cw, dw) = self.widths();
        cw * limits.max_conv + dw * limits.max_dense
    }

    /// Maps a 1-based slot index to its descriptor. Conv blocks come first,
    /// each contributing its fields in gene order, then dense blocks.
    pub fn locate(self, limits: &SearchLimits, index: usize) -> Result<SlotDescriptor> {
        let total = self.slot_count(limits);
        if index == 0 || index > total {
            return Err(Error::SlotOutOfRange { index, total });
        }
        let (cw, dw) = self.widths();
        let i = index - 1;
        let conv_span = cw * limits.max_conv;
        Ok(if i < conv_span {
            SlotDescriptor {
                kind: LayerKind::Conv,
                layer: i / cw + 1,
                field: CONV_ORDER[i % cw],
            }
        } else {
            let j = i - conv_span;
            SlotDescriptor {
                kind: LayerKind::Dense,
                layer: j / dw + 1,
                field: DENSE_ORDER[j % dw],
            }
        })
    }
}

/// `5·C + 4·D`
pub fn param_slot_count(limits: &SearchLimits) -> usize {
    SlotSpace::Genome.slot_count(limits)
}

pub fn locate_slot(limits: &SearchLimits, index: usize) -> Result<SlotDescriptor> {
    SlotSpace::Genome.locate(limits, index)
}

pub fn random_genome<R: Rng + ?Sized>(limits: &SearchLimits, rng: &mut R) -> Genome {
    let conv = (0..limits.max_conv)
        .map(|_| ConvLayerGene {
            exists: rng.random(),
            kernel_size: *limits.kernel_choices.choose(rng).expect("kernel choices"),
            activation: *limits.activation_choices.choose(rng).expect("activation choices"),
            batch_norm: rng.random(),
            max_pool: rng.random(),
        })
        .collect();
    let dense = (0..limits.max_dense)
        .map(|_| DenseLayerGene {
            exists: rng.random(),
            activation: *limits.activation_choices.choose(rng).expect("activation choices"),
            batch_norm: rng.random(),
            dropout: rng.random(),
        })
        .collect();
    let mut genome = Genome { conv, dense };
    genome.repair();
    genome
}

/// One broken invariant. `layer` is 1-based; `None` for genome-wide problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: LayerKind,
    pub layer: Option<usize>,
    pub field: Option<GeneField>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.field) {
            (Some(l), Some(field)) => write!(f, "{} {} {}: {}", self.kind, l, field, self.message),
            _ => f.write_str(&self.message),
        }
    }
}

pub fn validate(genome: &Genome, limits: &SearchLimits) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let whole = |kind, message: String| Violation {
        kind,
        layer: None,
        field: None,
        message,
    };
    if genome.conv.len() != limits.max_conv {
        out.push(whole(
            LayerKind::Conv,
            format!("expected {} conv genes, found {}", limits.max_conv, genome.conv.len()),
        ));
    }
    if genome.dense.len() != limits.max_dense {
        out.push(whole(
            LayerKind::Dense,
            format!("expected {} dense genes, found {}", limits.max_dense, genome.dense.len()),
        ));
    }
    for (i, g) in genome.conv.iter().enumerate() {
        if !limits.kernel_choices.contains(&g.kernel_size) {
            out.push(Violation {
                kind: LayerKind::Conv,
                layer: Some(i + 1),
                field: Some(GeneField::KernelSize),
                message: format!("kernel size {} not in {:?}", g.kernel_size, limits.kernel_choices),
            });
        }
        if !limits.activation_choices.contains(&g.activation) {
            out.push(Violation {
                kind: LayerKind::Conv,
                layer: Some(i + 1),
                field: Some(GeneField::Activation),
                message: format!("activation {} not allowed", g.activation),
            });
        }
    }
    for (i, g) in genome.dense.iter().enumerate() {
        if !limits.activation_choices.contains(&g.activation) {
            out.push(Violation {
                kind: LayerKind::Dense,
                layer: Some(i + 1),
                field: Some(GeneField::Activation),
                message: format!("activation {} not allowed", g.activation),
            });
        }
    }
    if !genome.conv.iter().any(|g| g.exists) {
        out.push(whole(LayerKind::Conv, "no active conv layer".into()));
    }
    if !genome.dense.iter().any(|g| g.exists) {
        out.push(whole(LayerKind::Dense, "no active dense layer".into()));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Enumerates every genome of the limits' choice sets, including those with
/// no active layers. Only practical for tiny `C`/`D`.
pub fn enumerate_genomes(limits: &SearchLimits) -> Vec<Genome> {
    let mut conv_blocks = Vec::new();
    for exists in [false, true] {
        for &kernel_size in &limits.kernel_choices {
            for &activation in &limits.activation_choices {
                for batch_norm in [false, true] {
                    for max_pool in [false, true] {
                        conv_blocks.push(ConvLayerGene {
                            exists,
                            kernel_size,
                            activation,
                            batch_norm,
                            max_pool,
                        });
                    }
                }
            }
        }
    }
    let mut dense_blocks = Vec::new();
    for exists in [false, true] {
        for &activation in &limits.activation_choices {
            for batch_norm in [false, true] {
                for dropout in [false, true] {
                    dense_blocks.push(DenseLayerGene {
                        exists,
                        activation,
                        batch_norm,
                        dropout,
                    });
                }
            }
        }
    }
    let convs = cartesian(&conv_blocks, limits.max_conv);
    let denses = cartesian(&dense_blocks, limits.max_dense);
    let mut out = Vec::with_capacity(convs.len() * denses.len());
    for c in &convs {
        for d in &denses {
            out.push(Genome {
                conv: c.clone(),
                dense: d.clone(),
            });
        }
    }
    out
}

fn cartesian<T: Clone>(items: &[T], len: usize) -> Vec<Vec<T>> {
    let mut acc: Vec<Vec<T>> = vec![Vec::new()];
    for _ in 0..len {
        acc = acc
            .into_iter()
            .flat_map(|prefix| {
                items.iter().map(move |it| {
                    let mut v = prefix.clone();
                    v.push(it.clone());
                    v
                })
            })
            .collect();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_genome(limits: &SearchLimits) -> Genome {
        Genome {
            conv: vec![
                ConvLayerGene {
                    exists: true,
                    kernel_size: 3,
                    activation: Activation::Relu,
                    batch_norm: false,
                    max_pool: true,
                };
                limits.max_conv
            ],
            dense: vec![
                DenseLayerGene {
                    exists: true,
                    activation: Activation::Tanh,
                    batch_norm: true,
                    dropout: false,
                };
                limits.max_dense
            ],
        }
    }

    #[test]
    fn slot_counts() {
        assert_eq!(param_slot_count(&SearchLimits::new(3, 3)), 27);
        assert_eq!(param_slot_count(&SearchLimits::new(1, 1)), 9);
        assert_eq!(param_slot_count(&SearchLimits::new(5, 2)), 33);
        assert_eq!(SlotSpace::WithCounts.slot_count(&SearchLimits::new(3, 3)), 33);
    }

    #[test]
    fn locate_examples() {
        let l = SearchLimits::new(3, 3);
        let s = locate_slot(&l, 1).unwrap();
        assert_eq!((s.kind, s.layer, s.field), (LayerKind::Conv, 1, GeneField::Exists));
        let s = locate_slot(&l, 16).unwrap();
        assert_eq!((s.kind, s.layer, s.field), (LayerKind::Dense, 1, GeneField::Exists));
        let s = locate_slot(&l, 27).unwrap();
        assert_eq!((s.kind, s.layer, s.field), (LayerKind::Dense, 3, GeneField::Dropout));
        let s = locate_slot(&l, 7).unwrap();
        assert_eq!((s.kind, s.layer, s.field), (LayerKind::Conv, 2, GeneField::KernelSize));
        assert!(matches!(locate_slot(&l, 0), Err(Error::SlotOutOfRange { .. })));
        assert!(matches!(locate_slot(&l, 28), Err(Error::SlotOutOfRange { .. })));
    }

    #[test]
    fn locate_is_bijective() {
        for space in [SlotSpace::Genome, SlotSpace::WithCounts] {
            for (c, d) in [(1, 1), (3, 3), (5, 2), (2, 4)] {
                let l = SearchLimits::new(c, d);
                let n = space.slot_count(&l);
                let all: std::collections::HashSet<_> =
                    (1..=n).map(|i| space.locate(&l, i).unwrap()).collect();
                assert_eq!(all.len(), n);
                let conv = all.iter().filter(|s| s.kind == LayerKind::Conv).count();
                assert_eq!(conv, space.widths().0 * c);
            }
        }
    }

    #[test]
    fn single_slot_limits_force_existence() {
        let l = SearchLimits::new(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = random_genome(&l, &mut rng);
            assert!(g.conv[0].exists && g.dense[0].exists);
        }
    }

    #[test]
    fn random_genomes_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (c, d) in [(1, 1), (3, 3), (5, 2)] {
            let l = SearchLimits::new(c, d);
            for _ in 0..20_000 {
                let g = random_genome(&l, &mut rng);
                assert_eq!(validate(&g, &l), Ok(()));
            }
        }
    }

    #[test]
    fn activation_frequencies_are_uniform() {
        // Chi-square over 4 categories per slot, 3 dof; 16.27 is the 0.001 quantile.
        let l = SearchLimits::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut counts = vec![[0usize; 4]; 6];
        for _ in 0..n {
            let g = random_genome(&l, &mut rng);
            let acts = g.conv.iter().map(|c| c.activation).chain(g.dense.iter().map(|d| d.activation));
            for (slot, a) in acts.enumerate() {
                counts[slot][Activation::ALL.iter().position(|x| *x == a).unwrap()] += 1;
            }
        }
        for slot in counts {
            let expected = n as f64 / 4.0;
            let chi2: f64 = slot.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            assert!(chi2 < 16.27, "chi2 {chi2}");
            for o in slot {
                assert!((o as f64 / n as f64 - 0.25).abs() < 0.02);
            }
        }
    }

    #[test]
    fn validate_reports_named_violations() {
        let l = SearchLimits::new(3, 3);
        assert_eq!(validate(&full_genome(&l), &l), Ok(()));

        let mut g = full_genome(&l);
        for c in &mut g.conv {
            c.exists = false;
        }
        let v = validate(&g, &l).unwrap_err();
        assert!(v.iter().any(|v| v.message == "no active conv layer"));

        let mut g = full_genome(&l);
        g.conv[1].kernel_size = 4;
        let v = validate(&g, &l).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].layer, Some(2));
        assert_eq!(v[0].field, Some(GeneField::KernelSize));
        assert!(v[0].to_string().contains("conv 2 kernel_size"));
    }

    #[test]
    fn genome_space_size_single_layer() {
        let l = SearchLimits::new(1, 1);
        let all = enumerate_genomes(&l);
        // 2·2·4·2·2 conv blocks × 2·4·2·2 dense blocks
        assert_eq!(all.len(), 2048);
        assert_eq!(all.iter().filter(|g| validate(g, &l).is_ok()).count(), 512);
    }

    #[test]
    fn limits_check() {
        assert!(SearchLimits::new(3, 3).check().is_ok());
        assert!(SearchLimits::new(0, 3).check().is_err());
        assert!(SearchLimits::new(3, 3).with_neuron_bounds(0, 10).check().is_err());
        assert!(SearchLimits::new(3, 3).with_filter_bounds(8, 8).check().is_err());
    }

    #[test]
    fn json_shape_uses_domain_names() {
        let l = SearchLimits::new(1, 1);
        let c = Candidate::new(full_genome(&l), ContinuousParams::midpoint(&l));
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["genome"]["conv"][0]["kernel_size"], 3);
        assert_eq!(v["genome"]["conv"][0]["max_pool"], true);
        assert_eq!(v["genome"]["dense"][0]["activation"], "tanh");
        assert_eq!(v["params"]["neurons"][0], 2005);
        let l = serde_json::to_value(&l).unwrap();
        assert_eq!(l["C"], 1);
        let back: Candidate = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }
}
