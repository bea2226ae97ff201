//! Scenario runs and their on-disk artifacts.

pub mod compare;
pub mod engine;
pub mod record;

use std::path::Path;

use thiserror::Error;

use crate::scenario::{ScenarioConfig, ScenarioError};

pub use compare::{compare, ComparisonReport};
pub use engine::Simulation;

pub const THROUGHPUT_FILE: &str = "throughput.csv";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    InvalidScenario(#[from] ScenarioError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run output in {0}: {1}")]
    Malformed(String, String),
    #[error("runs are of different scenarios: {0} differ")]
    MismatchedScenarios(String),
}

/// Everything a run writes, held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub throughput_csv: String,
    pub timeline_csv: String,
    pub summary: String,
    pub scenario_json: String,
}

impl RunArtifacts {
    pub fn write_to(&self, out_dir: &Path) -> Result<(), HarnessError> {
        let io = |path: &Path, source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
        for (name, body) in [
            (THROUGHPUT_FILE, &self.throughput_csv),
            (TIMELINE_FILE, &self.timeline_csv),
            (SUMMARY_FILE, &self.summary),
            (SCENARIO_FILE, &self.scenario_json),
        ] {
            let path = out_dir.join(name);
            std::fs::write(&path, body).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

/// Runs a validated scenario to completion.
pub fn run_config(cfg: &ScenarioConfig) -> Result<(Simulation, RunArtifacts), HarnessError> {
    cfg.validate()?;
    let mut sim = Simulation::new(cfg.clone())?;
    sim.run();
    let end = sim.end();
    let rec = sim.recorder();
    let artifacts = RunArtifacts {
        throughput_csv: rec.throughput_csv(),
        timeline_csv: rec.timeline_csv(),
        summary: rec.summary(cfg, end),
        scenario_json: cfg.to_json(),
    };
    Ok((sim, artifacts))
}

/// Loads a scenario file, applies `key=value` overrides, runs it and writes
/// the artifacts into `out_dir`.
pub fn run_scenario(
    path: &Path,
    out_dir: &Path,
    overrides: &[String],
) -> Result<RunArtifacts, HarnessError> {
    let mut cfg = ScenarioConfig::load(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    let (_, artifacts) = run_config(&cfg)?;
    artifacts.write_to(out_dir)?;
    Ok(artifacts)
}
