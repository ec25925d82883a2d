//! Line-oriented `section.key = value` experiment configs.
//!
//! Blank lines and lines starting with `#` are ignored. The canonical form
//! sorts entries and normalizes spacing; its SHA-256 is the config hash.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use ramp_core::attacks::DEFAULT_L1_SPARSITY;
use ramp_core::data::{SyntheticKind, SyntheticSpec};
use ramp_core::geometry::select_key_pair;
use ramp_core::optim::SgdConfig;
use ramp_core::rng::derive_seed;
use ramp_core::training::{RampConfig, RandMode};
use ramp_core::{
    AttackKind, AttackNorm, AttackSpec, Bounds, GpConfig, GpVariant, KeyPair, Method, PairingKind, PairingLossConfig,
    TrainPlan,
};

/// Environment variable that replaces `run.seed` and `data.seed`.
pub const SEED_ENV: &str = "RAMP_KIT_SEED";

/// Parsed key-value text, keyed by `(section, key)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvConfig {
    entries: BTreeMap<(String, String), String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `section.key = value`, got {line:?}", n + 1))?;
            let (section, key) = lhs
                .trim()
                .split_once('.')
                .ok_or_else(|| anyhow!("line {}: key {:?} has no section prefix", n + 1, lhs.trim()))?;
            let (section, key) = (section.trim().to_string(), key.trim().to_string());
            if section.is_empty() || key.is_empty() || key.contains('.') {
                bail!("line {}: malformed key {:?}", n + 1, lhs.trim());
            }
            if entries
                .insert((section.clone(), key.clone()), value.trim().to_string())
                .is_some()
            {
                bail!("line {}: duplicate key `{key}` in section [{section}]", n + 1);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.entries
            .insert((section.to_string(), key.to_string()), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.keys().map(|(s, k)| (s.as_str(), k.as_str()))
    }

    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .map(|((s, k), v)| format!("{s}.{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`KvConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn required(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| anyhow!("missing required key `{key}` in section [{section}]"))
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| anyhow!("[{section}] {key} = {v:?}: {e}")),
        }
    }

    fn parsed_required<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.required(section, key)?;
        v.parse().map_err(|e| anyhow!("[{section}] {key} = {v:?}: {e}"))
    }
}

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("run", &["name", "out_dir", "seed", "checkpoint_every"]),
    (
        "data",
        &[
            "kind",
            "n",
            "dim",
            "noise",
            "classes",
            "seed",
            "eval_fraction",
            "probe_size",
            "images",
            "labels",
            "limit",
        ],
    ),
    ("model", &["hidden"]),
    (
        "train",
        &[
            "method",
            "epochs",
            "warmup_epochs",
            "batch_size",
            "lr",
            "momentum",
            "weight_decay",
            "lr_drop_at",
            "lr_drop_factor",
            "at_norm",
            "rand_mode",
            "norms",
        ],
    ),
    (
        "attack",
        &["kind", "steps", "eps_l1", "eps_l2", "eps_linf", "l1_sparsity"],
    ),
    ("eval", &["steps", "kind", "batch_size"]),
    ("ramp", &["lambda", "pairing", "detach_target", "key_pair"]),
    ("gp", &["beta", "variant"]),
    ("delta", &["minibatch_size", "draws", "finite_m"]),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub eval_fraction: f64,
    /// Held-out samples evaluated after every epoch.
    pub probe_size: usize,
    pub seed: u64,
}

/// Per-norm radii.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radii {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl Radii {
    /// Defaults per data tier. The synthetic values were chosen so that the
    /// three threat models disagree on features in [0, 1]; the IDX values
    /// are the customary 28×28 digit radii.
    pub fn tier_default(source: &DataSource) -> Self {
        match source {
            DataSource::Synthetic(s) if s.kind == SyntheticKind::Moons && s.dim <= 2 => Radii {
                l1: 0.15,
                l2: 0.12,
                linf: 0.1,
            },
            DataSource::Synthetic(_) => Radii {
                l1: 0.5,
                l2: 0.25,
                linf: 0.1,
            },
            DataSource::Idx { .. } => Radii {
                l1: 10.0,
                l2: 2.0,
                linf: 0.3,
            },
        }
    }

    pub fn get(&self, norm: AttackNorm) -> f64 {
        match norm {
            AttackNorm::L1 => self.l1,
            AttackNorm::L2 => self.l2,
            AttackNorm::Linf => self.linf,
        }
    }
}

/// Key pair setting: an explicit ordered pair, or the volume heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyPairChoice {
    Fixed(KeyPair),
    Auto,
}

/// Shipped key pair: the override used for the standard radii.
pub const DEFAULT_KEY_PAIR: KeyPair = KeyPair {
    q: AttackNorm::Linf,
    r: AttackNorm::L1,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kv: KvConfig,
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Write `checkpoints/epoch_XXXX.ckpt` every this many epochs (0: only
    /// the initial and last ones).
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub method: Method,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub lr_drop_at: Option<f64>,
    pub lr_drop_factor: f64,
    pub at_norm: AttackNorm,
    pub rand_mode: RandMode,
    pub train_norms: Vec<AttackNorm>,
    pub attack_kind: AttackKind,
    pub attack_steps: usize,
    pub radii: Radii,
    pub l1_sparsity: f64,
    pub eval_steps: usize,
    pub eval_kind: AttackKind,
    pub eval_batch_size: usize,
    pub pairing: PairingLossConfig,
    pub key_pair: KeyPairChoice,
    pub gp: GpConfig,
    pub delta_minibatch: usize,
    pub delta_draws: usize,
    pub delta_finite_m: bool,
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| anyhow!("{p:?}: {e}")))
        .collect()
}

impl ExperimentConfig {
    /// Parses `path`, applying `seed_override` (normally from
    /// [`SEED_ENV`]) to the run and data seeds. Relative IDX paths are
    /// resolved against the config's directory.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut kv = KvConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(base) = path.parent() {
            for key in ["images", "labels"] {
                if let Some(v) = kv.get("data", key) {
                    let p = Path::new(v);
                    if p.is_relative() {
                        let joined = base.join(p).to_string_lossy().into_owned();
                        kv.set("data", key, joined);
                    }
                }
            }
        }
        Self::from_kv(kv, seed_override)
    }

    pub fn from_text(text: &str, seed_override: Option<u64>) -> Result<Self> {
        Self::from_kv(KvConfig::parse(text)?, seed_override)
    }

    pub fn from_kv(mut kv: KvConfig, seed_override: Option<u64>) -> Result<Self> {
        for (section, key) in kv.keys() {
            let known = KNOWN_KEYS
                .iter()
                .find(|(s, _)| *s == section)
                .ok_or_else(|| anyhow!("unknown section [{section}]"))?;
            if !known.1.contains(&key) {
                bail!("unknown key `{key}` in section [{section}]");
            }
        }
        if let Some(s) = seed_override {
            kv.set("run", "seed", s.to_string());
            kv.set("data", "seed", s.to_string());
        }

        let seed: u64 = kv.parsed("run", "seed", 0)?;
        let data_seed: u64 = kv.parsed("data", "seed", seed)?;
        let kind = kv.required("data", "kind")?.to_ascii_lowercase();
        let source = if kind == "idx" {
            DataSource::Idx {
                images: PathBuf::from(kv.required("data", "images")?),
                labels: PathBuf::from(kv.required("data", "labels")?),
                limit: kv.get("data", "limit").map(str::parse).transpose()?,
            }
        } else {
            let kind: SyntheticKind = kind.parse()?;
            DataSource::Synthetic(SyntheticSpec {
                kind,
                n: kv.parsed("data", "n", 1000)?,
                dim: kv.parsed("data", "dim", if kind == SyntheticKind::Moons { 2 } else { 10 })?,
                noise: kv.parsed("data", "noise", if kind == SyntheticKind::Moons { 0.15 } else { 2.0 })?,
                classes: kv.parsed("data", "classes", if kind == SyntheticKind::Moons { 2 } else { 4 })?,
                seed: data_seed,
            })
        };
        let radii_default = Radii::tier_default(&source);
        let radii = Radii {
            l1: kv.parsed("attack", "eps_l1", radii_default.l1)?,
            l2: kv.parsed("attack", "eps_l2", radii_default.l2)?,
            linf: kv.parsed("attack", "eps_linf", radii_default.linf)?,
        };
        for norm in AttackNorm::ALL {
            let e = radii.get(norm);
            if !(e.is_finite() && e > 0.0) {
                bail!("[attack] eps_{norm} must be positive, got {e}");
            }
        }
        let data = DataConfig {
            source,
            eval_fraction: kv.parsed("data", "eval_fraction", 0.25)?,
            probe_size: kv.parsed("data", "probe_size", 200)?,
            seed: data_seed,
        };

        let lr_drop_at = match kv.get("train", "lr_drop_at") {
            None => Some(0.875),
            Some("none") => None,
            Some(v) => Some(v.parse().map_err(|e| anyhow!("[train] lr_drop_at = {v:?}: {e}"))?),
        };
        let key_pair = match kv.get("ramp", "key_pair") {
            None => KeyPairChoice::Fixed(DEFAULT_KEY_PAIR),
            Some("auto") => KeyPairChoice::Auto,
            Some(v) => KeyPairChoice::Fixed(v.parse()?),
        };
        let hidden = match kv.get("model", "hidden") {
            None => vec![64, 64],
            Some(v) => parse_list(v)?,
        };
        let cfg = Self {
            name: kv.parsed("run", "name", "run".to_string())?,
            out_dir: PathBuf::from(kv.get("run", "out_dir").unwrap_or("runs")),
            seed,
            checkpoint_every: kv.parsed("run", "checkpoint_every", 1)?,
            data,
            hidden,
            method: kv.parsed_required("train", "method")?,
            epochs: kv.parsed_required("train", "epochs")?,
            warmup_epochs: kv.parsed("train", "warmup_epochs", 0)?,
            batch_size: kv.parsed("train", "batch_size", 32)?,
            sgd: SgdConfig {
                learning_rate: kv.parsed("train", "lr", 0.05)?,
                momentum: kv.parsed("train", "momentum", 0.9)?,
                weight_decay: kv.parsed("train", "weight_decay", 5e-4)?,
                seed,
            },
            lr_drop_at,
            lr_drop_factor: kv.parsed("train", "lr_drop_factor", 0.1)?,
            at_norm: kv.parsed("train", "at_norm", AttackNorm::Linf)?,
            rand_mode: kv.parsed("train", "rand_mode", RandMode::Sat)?,
            train_norms: match kv.get("train", "norms") {
                None => AttackNorm::ALL.to_vec(),
                Some(v) => parse_list(v)?,
            },
            attack_kind: kv.parsed("attack", "kind", AttackKind::ApgdLite)?,
            attack_steps: kv.parsed("attack", "steps", 10)?,
            radii,
            l1_sparsity: kv.parsed("attack", "l1_sparsity", DEFAULT_L1_SPARSITY)?,
            eval_steps: kv.parsed("eval", "steps", 20)?,
            eval_kind: kv.parsed("eval", "kind", AttackKind::ApgdLite)?,
            eval_batch_size: kv.parsed("eval", "batch_size", 256)?,
            pairing: PairingLossConfig {
                lambda: kv.parsed("ramp", "lambda", 2.0)?,
                kind: kv.parsed("ramp", "pairing", PairingKind::Kl)?,
                detach_target: kv.parsed("ramp", "detach_target", true)?,
            },
            key_pair,
            gp: GpConfig {
                beta: kv.parsed("gp", "beta", 0.5)?,
                variant: kv.parsed("gp", "variant", GpVariant::Cosine)?,
            },
            delta_minibatch: kv.parsed("delta", "minibatch_size", 64)?,
            delta_draws: kv.parsed("delta", "draws", 4)?,
            delta_finite_m: kv.parsed("delta", "finite_m", false)?,
            kv,
        };
        if cfg.hidden.contains(&0) {
            bail!("[model] hidden sizes must be positive");
        }
        if cfg.attack_steps == 0 || cfg.eval_steps == 0 {
            bail!("[attack] steps and [eval] steps must be at least 1");
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        self.kv.hash()
    }

    pub fn canonical(&self) -> String {
        self.kv.canonical()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x1417])
    }

    pub fn key_pair(&self, dim: usize) -> KeyPair {
        match self.key_pair {
            KeyPairChoice::Fixed(p) => p,
            KeyPairChoice::Auto => select_key_pair(self.radii.l1, self.radii.l2, self.radii.linf, dim, None),
        }
    }

    fn spec(&self, norm: AttackNorm, steps: usize, kind: AttackKind, tag: u64) -> AttackSpec {
        AttackSpec::new(norm, self.radii.get(norm), steps, kind)
            .with_l1_sparsity(self.l1_sparsity)
            .with_seed(derive_seed(self.seed, &[tag, norm as u64]))
    }

    /// Attacks used by the trainers.
    pub fn train_specs(&self) -> Vec<AttackSpec> {
        self.train_norms
            .iter()
            .map(|&n| self.spec(n, self.attack_steps, self.attack_kind, 0x7a))
            .collect()
    }

    /// One attack per norm for evaluation.
    pub fn eval_specs(&self) -> Vec<AttackSpec> {
        AttackNorm::ALL
            .iter()
            .map(|&n| self.spec(n, self.eval_steps, self.eval_kind, 0xe7))
            .collect()
    }

    pub fn plan(&self, dim: usize) -> Result<TrainPlan> {
        let plan = TrainPlan {
            method: self.method,
            epochs: self.epochs,
            nt_warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            specs: self.train_specs(),
            at_norm: self.at_norm,
            ramp: RampConfig {
                pairing: self.pairing,
                key_pair: self.key_pair(dim),
            },
            gp: self.gp,
            rand_mode: self.rand_mode,
            sgd: self.sgd,
            lr_drop_at: self.lr_drop_at,
            lr_drop_factor: self.lr_drop_factor,
            bounds: Bounds::UNIT,
            seed: self.seed,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Reads [`SEED_ENV`] if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not a u64"))?,
        )),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow!("{SEED_ENV}: {e}")),
    }
}
