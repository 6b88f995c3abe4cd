use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{RunState, RECALL_KS};
use crate::error::Result;
use crate::gallery::{average_recall, GallerySet};
use crate::sessions::SessionPlan;

pub const METRICS_HEADER: [&str; 7] = ["session", "setup", "method", "r_at_1", "r_at_2", "r_at_4", "accuracy"];

/// Mean loss values over one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub epoch: usize,
    pub total: f64,
    pub l_c: f64,
    pub l_m: f64,
    pub l_d: f64,
    pub batches: usize,
    pub validation_r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    /// Recall at 1, 2, 4.
    pub recall: Vec<f64>,
    pub accuracy: f64,
    pub selected_epoch: usize,
    pub validation_r1: Option<f64>,
    pub train_items: usize,
    pub validation_items: usize,
    pub test_queries: usize,
    pub gallery_size: usize,
    pub replay_size: usize,
    pub epochs: Vec<LossSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setup: String,
    pub method: String,
    pub seed: u64,
    pub sessions: Vec<SessionMetrics>,
    /// Average over sessions of recall at 1, 2, 4.
    pub average_recall: Vec<f64>,
    pub gallery_hashes: Vec<(usize, String)>,
    pub config: RunConfig,
    pub wall_seconds: f64,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(
        config: &RunConfig,
        plan: &SessionPlan,
        sessions: Vec<SessionMetrics>,
        gallery: &GallerySet,
        wall_seconds: f64,
    ) -> Result<Self> {
        let mut average = Vec::with_capacity(RECALL_KS.len());
        for i in 0..RECALL_KS.len() {
            let per: Vec<f64> = sessions.iter().map(|s| s.recall[i]).collect();
            average.push(average_recall(&per)?);
        }
        Ok(RunReport {
            setup: plan.setup.name().to_string(),
            method: config.method.name().to_string(),
            seed: config.seed,
            sessions,
            average_recall: average,
            gallery_hashes: gallery.block_hashes(),
            config: config.clone(),
            wall_seconds,
            notes: vec!["constant learning rate; no cosine schedule".to_string()],
        })
    }

    pub fn ar_at_1(&self) -> f64 {
        self.average_recall[0]
    }

    /// Per-session rows; floats printed with the shortest round-trip form so
    /// identical runs give identical bytes.
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        for s in &self.sessions {
            w.write_record([
                s.session.to_string(),
                self.setup.clone(),
                self.method.clone(),
                s.recall[0].to_string(),
                s.recall[1].to_string(),
                s.recall[2].to_string(),
                s.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
    }
}

/// Writes `metrics.csv`, `summary.json` and `checkpoint.json` into `dir`.
pub fn write_outputs(dir: &Path, report: &RunReport, state: &RunState) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), report.metrics_csv()?)?;
    let mut f = fs::File::create(dir.join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(report)?.as_bytes())?;
    f.write_all(b"\n")?;
    state.checkpoint().save(&dir.join("checkpoint.json"))?;
    Ok(())
}
