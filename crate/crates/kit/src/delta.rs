//! Delta-error analysis over the checkpoints of a finished run.

use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use ramp_core::checkpoint;
use ramp_core::evaluation::{estimate_delta_terms, DeltaEstimatorConfig};
use ramp_core::{Bounds, Mlp};

use crate::run::{list_checkpoints, load_data, run_config, RunManifest, DELTA_FILE};

/// One row per epoch, estimated from the checkpoints of that epoch and the
/// one before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub epoch: usize,
    pub variance: f64,
    pub bias: f64,
    pub tau_bar: f64,
    pub tau_bar_sq: f64,
    pub predicted_diff: f64,
    pub beta: f64,
    pub m: usize,
}

pub fn delta_analysis(run_dir: &Path) -> Result<Vec<DeltaRow>> {
    let cfg = run_config(run_dir)?;
    let (train, eval) = load_data(&cfg)?;
    let ckpts = list_checkpoints(run_dir)?;
    if ckpts.len() < 2 {
        bail!("delta analysis needs at least two checkpoints in {}", run_dir.display());
    }
    let models: Vec<(usize, Mlp)> = ckpts
        .iter()
        .map(|(e, p)| Ok((*e, checkpoint::load(p)?)))
        .collect::<Result<_>>()?;
    let specs = cfg.eval_specs();
    let mut rows = Vec::with_capacity(models.len() - 1);
    for w in models.windows(2) {
        let est = DeltaEstimatorConfig {
            minibatch_size: cfg.delta_minibatch,
            draws: cfg.delta_draws,
            beta: cfg.gp.beta,
            finite_m: cfg.delta_finite_m,
            seed: ramp_core::rng::derive_seed(cfg.seed, &[w[1].0 as u64, 0xde]),
        };
        let snaps = [w[0].1.clone(), w[1].1.clone()];
        let r = estimate_delta_terms(&snaps, &eval, &train, &specs, Bounds::UNIT, &est)?;
        rows.push(DeltaRow {
            epoch: w[1].0,
            variance: r.variance,
            bias: r.bias,
            tau_bar: r.tau_bar(),
            tau_bar_sq: r.tau_bar_sq,
            predicted_diff: r.predicted_diff,
            beta: r.beta,
            m: r.m,
        });
    }
    let body: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    fs::write(run_dir.join(DELTA_FILE), body)?;
    if let Ok(mut manifest) = RunManifest::load(run_dir) {
        if !manifest.artifacts.iter().any(|a| a == DELTA_FILE) {
            manifest.artifacts.push(DELTA_FILE.to_string());
            manifest.save(run_dir)?;
        }
    }
    Ok(rows)
}

pub fn read_delta_rows(run_dir: &Path) -> Result<Vec<DeltaRow>> {
    let text = fs::read_to_string(run_dir.join(DELTA_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
