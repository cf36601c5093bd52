//! Finite-difference gradient checks over a matrix of layer combinations.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::genome::Activation;
use crate::seed::{derive, SearchRng};
use crate::tinynet::{grad_check_with, Mode, Network, NetworkSpec, SpecBuilder, Tensor};

pub const TOLERANCE: f64 = 1e-4;
/// Largest share of weights that may be skipped for sitting near a kink.
pub const MAX_KINK_FRACTION: f64 = 0.25;
pub const BATCH_NORM_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Body {
    Dense,
    Conv,
    ConvPool,
    TwoConvPool,
}

/// One network to check.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub spec: NetworkSpec,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub weights: usize,
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.kinks_skipped as f64 <= MAX_KINK_FRACTION * self.weights as f64
    }
}

/// 32 small networks: four layouts × four activations × batch norm on/off.
/// Dropout alternates so half of the networks include it.
pub fn gradcheck_matrix() -> Vec<GradCheckCase> {
    let mut cases = Vec::new();
    for body in [Body::Dense, Body::Conv, Body::ConvPool, Body::TwoConvPool] {
        for (a, &act) in Activation::ALL.iter().enumerate() {
            for bn in [false, true] {
                let dropout = (a + bn as usize) % 2 == 1;
                let next = Activation::ALL[(a + 1) % Activation::ALL.len()];
                let input: &[usize] = if body == Body::Dense { &[5] } else { &[2, 6, 6] };
                let mut b = SpecBuilder::new(input, 3).expect("valid input shape");
                match body {
                    Body::Dense => {
                        b.dense(6, act, bn, dropout).expect("dense layer");
                    }
                    Body::Conv => {
                        b.conv(3, 3, act, bn, false).expect("conv layer");
                    }
                    Body::ConvPool => {
                        b.conv(3, 5, act, bn, true).expect("conv layer");
                    }
                    Body::TwoConvPool => {
                        b.conv(2, 3, act, bn, true).expect("conv layer");
                        b.conv(3, 3, next, false, false).expect("conv layer");
                    }
                }
                if body != Body::Dense {
                    b.dense(4, next, bn, dropout).expect("dense layer");
                }
                let name = format!(
                    "{}+{}{}{}",
                    match body {
                        Body::Dense => "dense",
                        Body::Conv => "conv",
                        Body::ConvPool => "conv_pool",
                        Body::TwoConvPool => "conv_pool+conv",
                    },
                    act,
                    if bn { "+batch_norm" } else { "" },
                    if dropout { "+dropout" } else { "" },
                );
                cases.push(GradCheckCase {
                    name,
                    spec: b.finish(),
                    batch_norm: bn,
                });
            }
        }
    }
    cases
}

fn random_batch(rng: &mut SearchRng, shape: &[usize], n: usize) -> Tensor {
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len: usize = full.iter().product();
    Tensor::new(full, (0..len).map(|_| StandardNormal.sample(rng)).collect()).expect("consistent batch shape")
}

/// Checks every matrix case in training mode (batch statistics, fixed
/// dropout mask). With `corrupt`, every analytic gradient entry is shifted
/// first; every row should then fail.
pub fn run_gradcheck(seed: u64, corrupt: bool) -> Result<Vec<GradCheckRow>> {
    gradcheck_matrix()
        .into_iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = SearchRng::seed_from_u64(derive(seed, &[i as u64]));
            let classes = case.spec.n_classes;
            let inputs = random_batch(&mut rng, &case.spec.input_shape, 6);
            let labels: Vec<usize> = (0..6).map(|k| k % classes).collect();
            let net = Network::init(case.spec, &mut rng);
            let mode = Mode::Training { seed: derive(seed, &[i as u64, 1]) };
            let report = grad_check_with(&net, &inputs, &labels, mode, EPS, |g| {
                if corrupt {
                    g.0.iter_mut().flatten().for_each(|v| *v += 0.1);
                }
            })?;
            Ok(GradCheckRow {
                name: case.name,
                weights: report.weights_checked,
                kinks_skipped: report.kinks_skipped,
                max_rel_error: report.max_rel_error,
                tolerance: if case.batch_norm { BATCH_NORM_TOLERANCE } else { TOLERANCE },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::LayerSpec;

    #[test]
    fn matrix_covers_every_layer_type() {
        let cases = gradcheck_matrix();
        assert!(cases.len() >= 20);
        let has = |f: fn(&LayerSpec) -> bool| cases.iter().any(|c| c.spec.layers.iter().any(f));
        assert!(has(|l| matches!(l, LayerSpec::Conv { .. })));
        assert!(has(|l| matches!(l, LayerSpec::BatchNorm { .. })));
        assert!(has(|l| matches!(l, LayerSpec::MaxPool { .. })));
        assert!(has(|l| matches!(l, LayerSpec::Dropout { .. })));
        assert!(has(|l| matches!(l, LayerSpec::Flatten { .. })));
        for a in Activation::ALL {
            assert!(cases.iter().any(|c| c.spec.layers.contains(&LayerSpec::Activation(a))));
        }
        let names: std::collections::HashSet<_> = cases.iter().map(|c| &c.name).collect();
        assert_eq!(names.len(), cases.len());
    }

    #[test]
    fn every_case_passes_and_corruption_fails() {
        let rows = run_gradcheck(0, false).unwrap();
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
        let bad = run_gradcheck(0, true).unwrap();
        assert!(bad.iter().all(|r| !r.passed()));
    }
}
