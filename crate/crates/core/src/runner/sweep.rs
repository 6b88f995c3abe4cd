use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{LossToggles, Method, RunConfig};
use super::train::run_experiment;
use crate::error::Result;

/// One configuration of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub method: Method,
    pub toggles: LossToggles,
}

impl AblationRow {
    pub fn new(name: &str, method: Method, toggles: LossToggles) -> Self {
        AblationRow { name: name.to_string(), method, toggles }
    }
}

/// Loss ablations followed by the two reference methods.
pub fn ablation_rows() -> Vec<AblationRow> {
    let on = LossToggles::default();
    vec![
        AblationRow::new("lc", Method::Cvs, LossToggles::NONE),
        AblationRow::new("lc+lm", Method::Cvs, LossToggles { use_d: false, ..on }),
        AblationRow::new("lc+ld_no_replay", Method::Cvs, LossToggles { use_m: false, use_replay_data: false, ..on }),
        AblationRow::new("lc+ld", Method::Cvs, LossToggles { use_m: false, ..on }),
        AblationRow::new("full", Method::Cvs, on),
        AblationRow::new("finetune", Method::Finetune, LossToggles::NONE),
        AblationRow::new("joint", Method::Joint, LossToggles::NONE),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub seeds: Vec<u64>,
    /// AR@1 per seed, aligned with `seeds`.
    pub ar_at_1: Vec<f64>,
    pub mean_ar_at_1: f64,
    pub mean_ar_at_2: f64,
    pub mean_ar_at_4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub wall_seconds: f64,
}

impl SweepReport {
    pub fn row(&self, name: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "seeds", "ar_at_1", "ar_at_2", "ar_at_4"])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.seeds.len().to_string(),
                r.mean_ar_at_1.to_string(),
                r.mean_ar_at_2.to_string(),
                r.mean_ar_at_4.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
    }
}

/// Runs every row for every seed. Runs are independent, so they execute in
/// parallel without affecting results.
pub fn run_sweep(base: &RunConfig, rows: &[AblationRow], seeds: &[u64]) -> Result<SweepReport> {
    let started = std::time::Instant::now();
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let results: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let mut cfg = base.clone();
            cfg.method = rows[r].method;
            cfg.toggles = rows[r].toggles;
            cfg.seed = seed;
            cfg.output_dir = None;
            Ok(run_experiment(&cfg)?.average_recall)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = seeds.len().max(1) as f64;
    let out = rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let per: &[Vec<f64>] = &results[r * seeds.len()..(r + 1) * seeds.len()];
            let mean = |i: usize| per.iter().map(|v| v[i]).sum::<f64>() / n;
            SweepRow {
                name: row.name.clone(),
                seeds: seeds.to_vec(),
                ar_at_1: per.iter().map(|v| v[0]).collect(),
                mean_ar_at_1: mean(0),
                mean_ar_at_2: mean(1),
                mean_ar_at_4: mean(2),
            }
        })
        .collect();
    Ok(SweepReport { rows: out, wall_seconds: started.elapsed().as_secs_f64() })
}
