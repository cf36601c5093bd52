//! Per-layer listing of a run's best candidate, and its inverse.
//!
//! ```text
//! method: proposed
//! seed: 3
//! accuracy: 0.912345
//! C1: on, kernel 5, relu, batch_norm no, max_pool yes, filters 80
//! C2: off, kernel 3, tanh, batch_norm no, max_pool no, filters 12
//! D1: on, leaky_relu, batch_norm no, dropout yes, neurons 601
//! ```
//!
//! Switched-off layers are listed too so the full candidate can be rebuilt.

use std::fmt::Write as _;
use std::path::Path;

use super::output::{read_history, read_summary};
use crate::error::{Error, Result};
use crate::ga::RunHistory;
use crate::genome::{Activation, Candidate, ContinuousParams, ConvLayerGene, DenseLayerGene, Genome};

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn format_listing(method: &str, seed: u64, candidate: &Candidate) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method: {method}");
    let _ = writeln!(out, "seed: {seed}");
    let _ = writeln!(out, "accuracy: {:.6}", candidate.accuracy());
    for (i, (g, f)) in candidate.genome.conv.iter().zip(&candidate.params.filters).enumerate() {
        let _ = writeln!(
            out,
            "C{}: {}, kernel {}, {}, batch_norm {}, max_pool {}, filters {f}",
            i + 1,
            if g.exists { "on" } else { "off" },
            g.kernel_size,
            g.activation,
            yes_no(g.batch_norm),
            yes_no(g.max_pool),
        );
    }
    for (i, (g, n)) in candidate.genome.dense.iter().zip(&candidate.params.neurons).enumerate() {
        let _ = writeln!(
            out,
            "D{}: {}, {}, batch_norm {}, dropout {}, neurons {n}",
            i + 1,
            if g.exists { "on" } else { "off" },
            g.activation,
            yes_no(g.batch_norm),
            yes_no(g.dropout),
        );
    }
    out
}

fn bad(line: &str, why: &str) -> Error {
    Error::Parse(format!("listing line `{line}`: {why}"))
}

fn flag(line: &str, field: Option<&str>, name: &str) -> Result<bool> {
    match field.and_then(|f| f.strip_prefix(name)).map(str::trim) {
        Some("yes") => Ok(true),
        Some("no") => Ok(false),
        _ => Err(bad(line, &format!("expected `{name} yes|no`"))),
    }
}

fn number<T: std::str::FromStr>(line: &str, field: Option<&str>, name: &str) -> Result<T> {
    field
        .and_then(|f| f.strip_prefix(name))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(line, &format!("expected `{name} <number>`")))
}

fn activation(line: &str, field: Option<&str>) -> Result<Activation> {
    field
        .and_then(Activation::from_name)
        .ok_or_else(|| bad(line, "unknown activation"))
}

/// Rebuilds the genome and counts from a listing. Fitness is not restored.
pub fn parse_listing(text: &str) -> Result<Candidate> {
    let mut conv = Vec::new();
    let mut dense = Vec::new();
    for line in text.lines().map(str::trim) {
        let Some((tag, rest)) = line.split_once(':') else { continue };
        let (kind, index) = tag.split_at(tag.len().min(1));
        let Ok(index) = index.parse::<usize>() else { continue };
        let fields: Vec<&str> = rest.split(',').map(str::trim).collect();
        let f = |i: usize| fields.get(i).copied();
        let on = match f(0) {
            Some("on") => true,
            Some("off") => false,
            _ => return Err(bad(line, "expected `on` or `off`")),
        };
        match kind {
            "C" => {
                let gene = ConvLayerGene {
                    exists: on,
                    kernel_size: number(line, f(1), "kernel")?,
                    activation: activation(line, f(2))?,
                    batch_norm: flag(line, f(3), "batch_norm")?,
                    max_pool: flag(line, f(4), "max_pool")?,
                };
                conv.push((index, gene, number::<u32>(line, f(5), "filters")?));
            }
            "D" => {
                let gene = DenseLayerGene {
                    exists: on,
                    activation: activation(line, f(1))?,
                    batch_norm: flag(line, f(2), "batch_norm")?,
                    dropout: flag(line, f(3), "dropout")?,
                };
                dense.push((index, gene, number::<u32>(line, f(4), "neurons")?));
            }
            _ => continue,
        }
    }
    for (what, idx) in [("C", conv.iter().map(|c| c.0).collect::<Vec<_>>()), ("D", dense.iter().map(|d| d.0).collect())] {
        if idx.is_empty() || idx.iter().enumerate().any(|(i, &j)| j != i + 1) {
            return Err(Error::Parse(format!("listing {what} layers must be numbered 1, 2, ... in order")));
        }
    }
    let genome = Genome {
        conv: conv.iter().map(|c| c.1).collect(),
        dense: dense.iter().map(|d| d.1).collect(),
    };
    let params = ContinuousParams {
        filters: conv.iter().map(|c| c.2).collect(),
        neurons: dense.iter().map(|d| d.2).collect(),
    };
    Ok(Candidate::new(genome, params))
}

/// Listing of the best candidate stored in a run directory.
pub fn report_run(dir: &Path) -> Result<String> {
    let records = read_history(dir)?;
    let summary = read_summary(dir)?;
    let (method, seed) = summary.map_or(("unknown".to_string(), 0), |s| (s.method, s.seed));
    let mut history = RunHistory::new(method, seed);
    history.records = records;
    let best = history
        .best_candidate()
        .ok_or_else(|| Error::NoHistory(dir.to_path_buf()))?;
    Ok(format_listing(&history.method, history.seed, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{sample_counts, BaselineVariant};
    use crate::genome::{random_genome, SearchLimits};
    use crate::harness::config::Method;
    use crate::harness::search;
    use crate::harness::tests::tiny_config;
    use crate::seed::rng_for;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    proptest! {
        #[test]
        fn listing_parses_back_to_the_candidate(seed in any::<u64>(), c in 1usize..5, d in 1usize..5) {
            let limits = SearchLimits::new(c, d);
            let mut rng = rng_for(seed, &[]);
            let cand = Candidate::new(random_genome(&limits, &mut rng), sample_counts(&BaselineVariant::large_set(), &limits, &mut rng));
            let parsed = parse_listing(&format_listing("proposed", seed, &cand)).unwrap();
            prop_assert_eq!(parsed, cand);
        }
    }

    #[test]
    fn listing_shows_every_layer() {
        let limits = SearchLimits::new(3, 2);
        let mut rng = rng_for(1, &[]);
        let cand = Candidate::new(random_genome(&limits, &mut rng), sample_counts(&BaselineVariant::small_set(), &limits, &mut rng));
        let text = format_listing("small_set", 1, &cand);
        for tag in ["C1:", "C2:", "C3:", "D1:", "D2:", "method: small_set", "seed: 1", "accuracy:"] {
            assert!(text.contains(tag), "{tag} missing from\n{text}");
        }
    }

    #[test]
    fn malformed_listings_are_rejected() {
        assert!(parse_listing("").is_err());
        assert!(parse_listing("C1: on, kernel 3, relu, batch_norm no, max_pool no, filters 4").is_err());
        let bad_act = "C1: on, kernel 3, swish, batch_norm no, max_pool no, filters 4\nD1: on, relu, batch_norm no, dropout no, neurons 9";
        assert!(parse_listing(bad_act).is_err());
        let gap = "C2: on, kernel 3, relu, batch_norm no, max_pool no, filters 4\nD1: on, relu, batch_norm no, dropout no, neurons 9";
        assert!(parse_listing(gap).is_err());
    }

    #[test]
    fn report_lists_the_best_candidate_of_a_run() {
        let cfg = tiny_config(Method::SmallSet);
        let dir = tempfile::tempdir().unwrap();
        let h = search(&cfg, dir.path()).unwrap();
        let text = report_run(dir.path()).unwrap();
        assert!(text.starts_with("method: small_set\nseed: 3\n"));
        let best = h.best_candidate().unwrap();
        let parsed = parse_listing(&text).unwrap();
        assert_eq!((parsed.genome, parsed.params), (best.genome.clone(), best.params.clone()));

        let empty = tempfile::tempdir().unwrap();
        let err = report_run(empty.path()).unwrap_err();
        assert!(err.to_string().starts_with("no history found"));
    }
}
