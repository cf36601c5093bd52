//! Equal-budget head-to-head runs over several seeds.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::{run_method, Backend};
use crate::error::{Error, Result};
use crate::ga::RunHistory;

/// One line of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub seed: u64,
    pub best_fitness: f64,
    pub evals: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub methods: Vec<Method>,
    pub rows: Vec<CompareRow>,
    /// Evaluation counts the median table reports at; empty for time-only budgets.
    pub checkpoints: Vec<usize>,
    /// `medians[c][m]`: median best fitness of `methods[m]` at `checkpoints[c]`,
    /// with one extra final row for the full budget.
    pub medians: Vec<Vec<f64>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Best fitness a run reached within the shared evaluation budget, or over
/// the whole run when only a time budget is set.
fn scored(history: &RunHistory, evals: Option<usize>) -> f64 {
    evals.map_or_else(|| history.best_fitness(), |b| history.best_at_evals(b))
}

/// Runs every method on seeds `cfg.seed .. cfg.seed + seeds` against one
/// shared fitness backend.
pub fn compare(cfg: &RunConfig, methods: &[Method], seeds: usize) -> Result<Comparison> {
    if methods.len() < 2 {
        return Err(Error::Config("compare needs at least two methods".into()));
    }
    if methods.iter().collect::<HashSet<_>>().len() != methods.len() {
        return Err(Error::Config("compare methods must be distinct".into()));
    }
    if seeds == 0 {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let backend = Backend::from_config(cfg)?;
    let budget = cfg.budget.evals;
    let checkpoints: Vec<usize> = match budget {
        Some(b) => {
            let mut c: Vec<usize> = [b / 10, b / 4, b / 2].into_iter().filter(|&c| c > 0).collect();
            c.dedup();
            c
        }
        None => Vec::new(),
    };

    let mut rows = Vec::new();
    let mut per_method: Vec<Vec<RunHistory>> = vec![Vec::new(); methods.len()];
    for (mi, &method) in methods.iter().enumerate() {
        for k in 0..seeds as u64 {
            let seed = cfg.seed + k;
            let history = run_method(cfg, method, backend.inner.as_ref(), seed)?;
            rows.push(CompareRow {
                method,
                seed,
                best_fitness: scored(&history, budget),
                evals: history.total_evaluations,
                seconds: history.total_seconds,
            });
            per_method[mi].push(history);
        }
    }

    let mut medians: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|&c| {
            per_method
                .iter()
                .map(|runs| median(&runs.iter().map(|h| h.best_at_evals(c)).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    medians.push(
        per_method
            .iter()
            .map(|runs| median(&runs.iter().map(|h| scored(h, budget)).collect::<Vec<_>>()))
            .collect(),
    );
    Ok(Comparison {
        methods: methods.to_vec(),
        rows,
        checkpoints,
        medians,
    })
}

impl Comparison {
    /// Scores of `method` in seed order.
    pub fn scores(&self, method: Method) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.best_fitness).collect()
    }

    /// Seeds on which `a` scored at least as well as `b`.
    pub fn wins(&self, a: Method, b: Method) -> usize {
        self.scores(a).iter().zip(self.scores(b)).filter(|(x, y)| **x >= *y).count()
    }

    /// Checkpoint rows, methods across, as in a results table.
    pub fn median_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>10}", "evals");
        for m in &self.methods {
            let _ = write!(out, " {:>10}", m.name());
        }
        out.push('\n');
        let labels = self
            .checkpoints
            .iter()
            .map(|c| c.to_string())
            .chain(std::iter::once("final".to_string()));
        for (label, row) in labels.zip(&self.medians) {
            let _ = write!(out, "{label:>10}");
            for v in row {
                let _ = write!(out, " {v:>10.4}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `comparison.csv` and `medians.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("medians.csv"))?;
        let mut header = vec!["evals".to_string()];
        header.extend(self.methods.iter().map(|m| m.name().to_string()));
        w.write_record(&header)?;
        let labels = self
            .checkpoints
            .iter()
            .map(|c| c.to_string())
            .chain(std::iter::once("final".to_string()));
        for (label, row) in labels.zip(&self.medians) {
            let mut rec = vec![label];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests::tiny_config;

    #[test]
    fn median_of_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn one_row_per_method_and_seed() {
        let cfg = tiny_config(Method::Proposed);
        let cmp = compare(&cfg, &[Method::Proposed, Method::Random], 3).unwrap();
        assert_eq!(cmp.rows.len(), 6);
        assert_eq!(cmp.scores(Method::Random).len(), 3);
        assert_eq!(cmp.rows[0].seed, cfg.seed);
        assert_eq!(cmp.checkpoints, [6, 15, 30]);
        assert_eq!(cmp.medians.len(), 4);
        for row in &cmp.medians {
            assert_eq!(row.len(), 2);
        }
        assert_eq!(cmp.medians[3][1], median(&cmp.scores(Method::Random)));
        assert!(cmp.wins(Method::Proposed, Method::Random) <= 3);

        let table = cmp.median_table();
        assert!(table.lines().next().unwrap().contains("proposed"));
        assert!(table.contains("final"));

        let dir = tempfile::tempdir().unwrap();
        cmp.write(dir.path()).unwrap();
        let mut rdr = csv::Reader::from_path(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(rdr.headers().unwrap(), vec!["method", "seed", "best_fitness", "evals", "seconds"]);
        let back: Vec<CompareRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back[5].method, Method::Random);
        assert!(dir.path().join("medians.csv").is_file());
    }

    #[test]
    fn rejects_degenerate_requests() {
        let cfg = tiny_config(Method::Proposed);
        assert!(compare(&cfg, &[Method::Proposed], 2).is_err());
        assert!(compare(&cfg, &[Method::Random, Method::Random], 2).is_err());
        assert!(compare(&cfg, &[Method::Proposed, Method::Random], 0).is_err());
    }
}
