//! Run orchestration and the on-disk layout of a run directory:
//!
//! ```text
//! <out_dir>/<name>/
//!   config.txt            canonical config
//!   metrics.jsonl         one line per epoch, deterministic
//!   timing.jsonl          wall-clock seconds per epoch
//!   checkpoints/epoch_XXXX.ckpt
//!   final.ckpt
//!   report.json           final robustness report on the eval split
//!   manifest.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ramp_core::checkpoint;
use ramp_core::data::{load_idx_dataset, make_synthetic};
use ramp_core::evaluation::evaluate_robustness;
use ramp_core::training::{run_plan, EpochRecord, Phase, Probe};
use ramp_core::{AttackNorm, Bounds, Dataset, Method, Mlp, RobustReport};

use crate::config::{DataSource, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const CKPT_DIR: &str = "checkpoints";
pub const DELTA_FILE: &str = "delta_terms.jsonl";

/// Full dataset split into train and eval parts.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let full: Dataset = match &cfg.data.source {
        DataSource::Synthetic(spec) => make_synthetic(spec)?,
        DataSource::Idx { images, labels, limit } => load_idx_dataset(images, labels, *limit)
            .with_context(|| format!("loading IDX data {} / {}", images.display(), labels.display()))?,
    };
    Ok(full.split(cfg.data.eval_fraction, cfg.data.seed)?)
}

pub fn init_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Mlp> {
    let mut sizes = vec![data.dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(data.num_classes());
    Ok(Mlp::init(&sizes, cfg.init_seed())?)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Epoch number encoded in a checkpoint file name.
pub fn checkpoint_epoch(path: &Path) -> Option<usize> {
    path.file_name()?
        .to_str()?
        .strip_prefix("epoch_")?
        .strip_suffix(".ckpt")?
        .parse()
        .ok()
}

/// Checkpoints of a run, sorted by epoch.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(run_dir.join(CKPT_DIR))
        .with_context(|| format!("listing checkpoints of {}", run_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| checkpoint_epoch(&p).map(|e| (e, p)))
        .collect();
    out.sort();
    Ok(out)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub phase: Phase,
    pub method: Method,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub clean_acc: Option<f64>,
    pub l1_acc: Option<f64>,
    pub l2_acc: Option<f64>,
    pub linf_acc: Option<f64>,
    pub union_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gp_kept_layers: Option<usize>,
}

impl From<&EpochRecord> for MetricsLine {
    fn from(r: &EpochRecord) -> Self {
        let acc = |n| r.probe.as_ref().map(|p: &RobustReport| p.acc(n));
        Self {
            epoch: r.epoch,
            phase: r.phase,
            method: r.method,
            learning_rate: r.learning_rate,
            train_loss: r.train_loss,
            clean_acc: r.clean_acc(),
            l1_acc: acc(AttackNorm::L1),
            l2_acc: acc(AttackNorm::L2),
            linf_acc: acc(AttackNorm::Linf),
            union_acc: r.union_acc(),
            gp_kept_layers: r.gp.map(|g| g.kept_layers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingLine {
    pub epoch: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub data: u64,
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub method: Method,
    pub seeds: Seeds,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(run_dir.join(MANIFEST_FILE))
            .with_context(|| format!("reading manifest of {}", run_dir.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::write(run_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// What a finished run returns besides the files it wrote.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<EpochRecord>,
    pub report: RobustReport,
    pub model: Mlp,
}

/// Trains according to `cfg` and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let started = unix_now();
    let run_dir = cfg.run_dir();
    fs::create_dir_all(run_dir.join(CKPT_DIR)).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.canonical())?;

    let (train, eval) = load_data(cfg)?;
    let plan = cfg.plan(train.dim())?;
    let model = init_model(cfg, &train)?;
    let mut artifacts = vec![CONFIG_FILE.to_string()];
    let first = format!("{CKPT_DIR}/{}", checkpoint_name(0));
    checkpoint::save(&model, run_dir.join(&first))?;
    artifacts.push(first);

    let probe_set = eval.take(cfg.data.probe_size.min(eval.len()));
    let eval_specs = cfg.eval_specs();
    let probe = Probe {
        data: &probe_set,
        specs: &eval_specs,
        batch_size: cfg.eval_batch_size,
    };
    let mut metrics = BufWriter::new(File::create(run_dir.join(METRICS_FILE))?);
    let mut timing = BufWriter::new(File::create(run_dir.join(TIMING_FILE))?);
    let total = plan.epochs + plan.nt_warmup_epochs;
    let mut ckpts = Vec::new();
    let (model, records) = run_plan(&plan, model, &train, Some(&probe), |rec, m| {
        writeln!(
            metrics,
            "{}",
            serde_json::to_string(&MetricsLine::from(rec)).expect("metrics serialize")
        )?;
        writeln!(
            timing,
            "{}",
            serde_json::to_string(&TimingLine {
                epoch: rec.epoch,
                seconds: rec.seconds
            })
            .expect("timing serializes")
        )?;
        let due = cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0;
        if due || rec.epoch == total {
            let rel = format!("{CKPT_DIR}/{}", checkpoint_name(rec.epoch));
            checkpoint::save(m, run_dir.join(&rel))?;
            ckpts.push(rel);
        }
        Ok(())
    })?;
    metrics.flush()?;
    timing.flush()?;
    artifacts.extend([METRICS_FILE.to_string(), TIMING_FILE.to_string()]);
    artifacts.extend(ckpts);

    checkpoint::save(&model, run_dir.join(FINAL_CKPT))?;
    let report = evaluate_robustness(&model, &eval, &eval_specs, Bounds::UNIT, cfg.eval_batch_size)?;
    fs::write(run_dir.join(REPORT_FILE), report.to_json_line() + "\n")?;
    artifacts.extend([
        FINAL_CKPT.to_string(),
        REPORT_FILE.to_string(),
        MANIFEST_FILE.to_string(),
    ]);

    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        method: cfg.method,
        seeds: Seeds {
            run: cfg.seed,
            data: cfg.data.seed,
            init: cfg.init_seed(),
        },
        started_unix: started,
        finished_unix: unix_now(),
        artifacts,
    };
    manifest.save(&run_dir)?;
    Ok(RunOutcome {
        run_dir,
        manifest,
        records,
        report,
        model,
    })
}

/// Evaluates a checkpoint on the eval split of `cfg`'s data.
pub fn evaluate_checkpoint(ckpt: &Path, cfg: &ExperimentConfig) -> Result<RobustReport> {
    let model: Mlp = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (_, eval) = load_data(cfg)?;
    Ok(evaluate_robustness(
        &model,
        &eval,
        &cfg.eval_specs(),
        Bounds::UNIT,
        cfg.eval_batch_size,
    )?)
}

/// Reloads the canonical config stored in a run directory.
pub fn run_config(run_dir: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(run_dir.join(CONFIG_FILE))
        .with_context(|| format!("reading {}", run_dir.join(CONFIG_FILE).display()))?;
    ExperimentConfig::from_text(&text, None)
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsLine>> {
    let text = fs::read_to_string(run_dir.join(METRICS_FILE))
        .with_context(|| format!("reading metrics of {}", run_dir.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad metrics line {l:?}")))
        .collect()
}

pub fn read_report(run_dir: &Path) -> Result<RobustReport> {
    let text = fs::read_to_string(run_dir.join(REPORT_FILE))
        .with_context(|| format!("reading report of {}", run_dir.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Run identifier used in figure data: the run directory's name.
pub fn run_id(run_dir: &Path) -> String {
    run_dir
        .file_name()
        .map_or_else(|| run_dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}
