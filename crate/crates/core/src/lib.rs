//! Architecture and width search for small classifiers.
//!
//! A genetic algorithm evolves the discrete layer genes ([`genome`]) while a
//! two-generator adversarial optimizer ([`bigan`]) proposes the integer
//! filter and neuron counts. Candidates are scored either by actually
//! training them ([`tinynet`] through [`evaluator`]) or by an analytic
//! surrogate with a known optimum. [`baselines`] provides the GA-only and
//! random-search comparisons and [`harness`] drives complete runs.

pub mod baselines;
pub mod bigan;
pub mod error;
pub mod evaluator;
pub mod ga;
pub mod genome;
pub mod harness;
pub mod seed;
pub mod tinynet;

pub use error::{Error, Result};
pub use evaluator::{Dataset, FitnessBackend, FitnessReport, SurrogateSpec};
pub use ga::{GaConfig, GenerationRecord, RunHistory};
pub use genome::{Activation, Candidate, ContinuousParams, Genome, SearchLimits};
