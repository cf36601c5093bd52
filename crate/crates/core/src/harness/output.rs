//! Files written for each run.
//!
//! * `history.jsonl`: one [`GenerationRecord`] per line, free of timings so
//!   reruns are byte-identical.
//! * `summary.json`: [`RunSummary`], including the config snapshot.
//! * `curves.csv`: `elapsed_seconds, generation, best_fitness, mean_fitness, mean_loss`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::evaluator::SurrogateSpec;
use crate::ga::{GenerationRecord, RunHistory};
use crate::genome::Candidate;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    pub generations: usize,
    pub total_evaluations: usize,
    pub total_seconds: f64,
    pub best_fitness: f64,
    pub best_candidate: Option<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_target: Option<SurrogateSpec>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    elapsed_seconds: f64,
    generation: usize,
    best_fitness: f64,
    mean_fitness: f64,
    mean_loss: Option<f64>,
}

pub fn write_run(dir: &Path, cfg: &RunConfig, history: &RunHistory, surrogate: Option<&SurrogateSpec>) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(HISTORY_FILE), history.to_jsonl()?)?;

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        method: history.method.clone(),
        seed: history.seed,
        generations: history.records.len(),
        total_evaluations: history.total_evaluations,
        total_seconds: history.total_seconds,
        best_fitness: history.best_fitness(),
        best_candidate: history.best_candidate().cloned(),
        surrogate_target: surrogate.cloned(),
        config: cfg.clone(),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;

    let mut w = csv::Writer::from_path(dir.join(CURVES_FILE))?;
    for r in &history.records {
        w.serialize(CurveRow {
            elapsed_seconds: r.elapsed_seconds,
            generation: r.generation,
            best_fitness: r.best_fitness,
            mean_fitness: r.mean_fitness,
            mean_loss: r.mean_loss,
        })?;
    }
    w.flush()?;
    Ok(summary)
}

/// Generation records of a finished run. A missing or empty history is
/// reported as [`Error::NoHistory`].
pub fn read_history(dir: &Path) -> Result<Vec<GenerationRecord>> {
    let path = dir.join(HISTORY_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NoHistory(dir.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let records = RunHistory::records_from_jsonl(&text)?;
    if records.is_empty() {
        return Err(Error::NoHistory(dir.to_path_buf()));
    }
    Ok(records)
}

pub fn read_summary(dir: &Path) -> Result<Option<RunSummary>> {
    match fs::read_to_string(dir.join(SUMMARY_FILE)) {
        Ok(t) => serde_json::from_str(&t)
            .map(Some)
            .map_err(|e| Error::Parse(format!("{}: {e}", dir.join(SUMMARY_FILE).display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Method;
    use crate::harness::tests::tiny_config;
    use crate::harness::{run_method, Backend};

    #[test]
    fn files_describe_the_run() {
        let cfg = tiny_config(Method::Random);
        let backend = Backend::from_config(&cfg).unwrap();
        let h = run_method(&cfg, Method::Random, backend.inner.as_ref(), cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = write_run(dir.path(), &cfg, &h, backend.surrogate.as_ref()).unwrap();

        let mut back = RunHistory::new(h.method.clone(), h.seed);
        back.records = read_history(dir.path()).unwrap();
        assert_eq!(back.to_jsonl().unwrap(), h.to_jsonl().unwrap());
        assert_eq!(read_summary(dir.path()).unwrap().unwrap(), summary);
        assert_eq!(summary.config, cfg);
        assert_eq!(summary.best_fitness, h.best_fitness());
        assert!(summary.surrogate_target.is_some());

        let mut rdr = csv::Reader::from_path(dir.path().join(CURVES_FILE)).unwrap();
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["elapsed_seconds", "generation", "best_fitness", "mean_fitness", "mean_loss"]);
        let rows: Vec<CurveRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows.len(), h.records.len());
        for w in rows.windows(2) {
            assert!(w[1].elapsed_seconds >= w[0].elapsed_seconds);
            // random search reports its running best
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
    }

    #[test]
    fn missing_or_empty_history_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_history(dir.path()), Err(Error::NoHistory(_))));
        fs::write(dir.path().join(HISTORY_FILE), "").unwrap();
        assert!(matches!(read_history(dir.path()), Err(Error::NoHistory(_))));
        fs::write(dir.path().join(HISTORY_FILE), "{not json\n").unwrap();
        assert!(matches!(read_history(dir.path()), Err(Error::Parse(_))));
        assert!(read_summary(dir.path()).unwrap().is_none());
    }
}
