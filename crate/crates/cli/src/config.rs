//! Experiment configuration: a TOML file whose every field can be
//! overridden by a flag of the same name.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use natstream_core::learners::{BaseInit, DEFAULT_BUFFER_CAPACITY, DEFAULT_SHRINKAGE};
use natstream_core::replay::DEFAULT_CAPACITY;
use natstream_core::stream::DEFAULT_EXPERIENCE_SIZE;
use natstream_core::{LearnerConfig, LearnerKind, MemoryPolicy, TrainHyper};
use serde::{Deserialize, Serialize};

/// Raised for anything wrong with the configuration itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ShuffledBalanced,
    OrderedBalanced,
    OrderedUnbalanced,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::ShuffledBalanced, Regime::OrderedBalanced, Regime::OrderedUnbalanced];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::ShuffledBalanced => "shuffled-balanced",
            Regime::OrderedBalanced => "ordered-balanced",
            Regime::OrderedUnbalanced => "ordered-unbalanced",
        }
    }
}

impl FromStr for Regime {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| config_err(format!("unknown regime '{s}'")))
    }
}

/// A memory policy or `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyChoice {
    None,
    Reservoir,
    Random,
    Cbrs,
    Gss,
}

impl PolicyChoice {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyChoice::None => "none",
            PolicyChoice::Reservoir => "reservoir",
            PolicyChoice::Random => "random",
            PolicyChoice::Cbrs => "cbrs",
            PolicyChoice::Gss => "gss",
        }
    }

    pub fn memory_policy(&self) -> Option<MemoryPolicy> {
        match self {
            PolicyChoice::None => None,
            PolicyChoice::Reservoir => Some(MemoryPolicy::Reservoir),
            PolicyChoice::Random => Some(MemoryPolicy::Random),
            PolicyChoice::Cbrs => Some(MemoryPolicy::Cbrs),
            PolicyChoice::Gss => Some(MemoryPolicy::Gss),
        }
    }
}

impl FromStr for PolicyChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        if s == "none" {
            return Ok(PolicyChoice::None);
        }
        let p: MemoryPolicy = s.parse().map_err(|e: natstream_core::Error| config_err(e.to_string()))?;
        Ok(match p {
            MemoryPolicy::Reservoir => PolicyChoice::Reservoir,
            MemoryPolicy::Random => PolicyChoice::Random,
            MemoryPolicy::Cbrs => PolicyChoice::Cbrs,
            MemoryPolicy::Gss => PolicyChoice::Gss,
        })
    }
}

fn default_experience_size() -> usize {
    DEFAULT_EXPERIENCE_SIZE
}

fn default_memory_capacity() -> usize {
    DEFAULT_CAPACITY
}

fn default_slda_epsilon() -> f64 {
    DEFAULT_SHRINKAGE
}

fn default_true() -> bool {
    true
}

fn default_base_init() -> BaseInit {
    BaseInit::FirstExperience
}

fn default_exstream_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

fn default_regime() -> Regime {
    Regime::OrderedUnbalanced
}

fn default_policy() -> PolicyChoice {
    PolicyChoice::None
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Generate the stream from a named preset.
    #[serde(default)]
    pub preset: Option<String>,
    /// Seed for the preset generator; defaults to `seed`.
    #[serde(default)]
    pub stream_seed: Option<u64>,
    /// Load the stream from manifests instead.
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    pub learner: LearnerKind,
    #[serde(default = "default_policy")]
    pub policy: PolicyChoice,
    #[serde(default = "default_experience_size")]
    pub experience_size: usize,
    #[serde(default = "default_memory_capacity")]
    pub memory_capacity: usize,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_slda_epsilon")]
    pub slda_epsilon: f64,
    #[serde(default = "default_true")]
    pub slda_plastic: bool,
    #[serde(default = "default_base_init")]
    pub slda_base_init: BaseInit,
    #[serde(default = "default_exstream_capacity")]
    pub exstream_capacity: usize,
    #[serde(default)]
    pub hyper: TrainHyper,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// A config with defaults for everything except the mandatory fields.
    pub fn new(preset: &str, learner: LearnerKind, policy: PolicyChoice, regime: Regime, seed: u64) -> Self {
        Self {
            preset: Some(preset.to_string()),
            stream_seed: None,
            train_manifest: None,
            test_manifest: None,
            regime,
            learner,
            policy,
            experience_size: DEFAULT_EXPERIENCE_SIZE,
            memory_capacity: DEFAULT_CAPACITY,
            hidden: None,
            slda_epsilon: DEFAULT_SHRINKAGE,
            slda_plastic: true,
            slda_base_init: BaseInit::FirstExperience,
            exstream_capacity: DEFAULT_BUFFER_CAPACITY,
            hyper: TrainHyper::default(),
            seed,
            out_dir: default_out_dir(),
        }
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("reading config {}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("in {}", path.display())))
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            kind: self.learner,
            policy: self.policy.memory_policy(),
            memory_capacity: self.memory_capacity,
            hidden: self.hidden,
            slda_epsilon: self.slda_epsilon,
            slda_plastic: self.slda_plastic,
            slda_base_init: self.slda_base_init,
            exstream_capacity: self.exstream_capacity,
            hyper: self.hyper.clone(),
        }
    }

    /// Checks everything that can be checked without touching the stream.
    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.preset, &self.train_manifest, &self.test_manifest) {
            (Some(_), None, None) => {}
            (None, Some(_), Some(_)) => {}
            _ => {
                return Err(config_err(
                    "give either `preset` or both `train_manifest` and `test_manifest`",
                ))
            }
        }
        if let Some(p) = &self.preset {
            natstream_core::preset_profile(p).map_err(|e| config_err(e.to_string()))?;
        }
        if self.experience_size == 0 {
            return Err(config_err("experience_size must be positive"));
        }
        self.learner_config().validate().map_err(|e| config_err(e.to_string()))
    }

    /// Directory-safe cell name, e.g. `sgd-random-ordered-balanced-s3`.
    pub fn cell_name(&self) -> String {
        format!("{}-{}-{}-s{}", self.learner.name(), self.policy.name(), self.regime.name(), self.seed)
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> anyhow::Result<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &o.$field {
                    self.$field = v.clone();
                }
            };
            ($field:ident, some) => {
                if let Some(v) = &o.$field {
                    self.$field = Some(v.clone());
                }
            };
            (hyper $field:ident) => {
                if let Some(v) = &o.$field {
                    self.hyper.$field = v.clone();
                }
            };
        }
        if o.preset.is_some() {
            self.train_manifest = None;
            self.test_manifest = None;
        }
        if o.train_manifest.is_some() || o.test_manifest.is_some() {
            self.preset = None;
        }
        set!(preset, some);
        set!(stream_seed, some);
        set!(train_manifest, some);
        set!(test_manifest, some);
        if let Some(r) = &o.regime {
            self.regime = r.parse()?;
        }
        if let Some(l) = &o.learner {
            self.learner = l.parse().map_err(|e: natstream_core::Error| config_err(e.to_string()))?;
        }
        if let Some(p) = &o.policy {
            self.policy = p.parse()?;
        }
        set!(experience_size);
        set!(memory_capacity);
        set!(hidden, some);
        set!(slda_epsilon);
        set!(slda_plastic);
        if let Some(b) = &o.slda_base_init {
            self.slda_base_init = match b.as_str() {
                "first-experience" => BaseInit::FirstExperience,
                "none" => BaseInit::None,
                other => return Err(config_err(format!("unknown slda_base_init '{other}'"))),
            };
        }
        set!(exstream_capacity);
        set!(hyper lr);
        set!(hyper replay_k);
        set!(hyper replay_with_replacement);
        set!(hyper temperature);
        set!(hyper lambda);
        set!(hyper teacher_refresh);
        set!(hyper exstream_passes);
        set!(hyper batch_size);
        set!(hyper gss_candidates);
        set!(seed);
        set!(out_dir);
        Ok(())
    }

    /// Builds a config from an optional file plus flags; the seed and learner
    /// must come from one of the two.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(path) => Self::load(path)?,
            None => {
                let learner = o.learner.as_deref().ok_or_else(|| config_err("missing `learner`"))?;
                let seed = o.seed.ok_or_else(|| config_err("missing `seed` (there is no default seed)"))?;
                let learner = learner.parse().map_err(|e: natstream_core::Error| config_err(e.to_string()))?;
                let mut c = Self::new("openloris-like", learner, PolicyChoice::None, default_regime(), seed);
                c.preset = None;
                c
            }
        };
        cfg.apply_overrides(o)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Command-line flags mirroring [`ExperimentConfig`].
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub stream_seed: Option<u64>,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub experience_size: Option<usize>,
    #[arg(long)]
    pub memory_capacity: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub slda_epsilon: Option<f64>,
    #[arg(long)]
    pub slda_plastic: Option<bool>,
    #[arg(long)]
    pub slda_base_init: Option<String>,
    #[arg(long)]
    pub exstream_capacity: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub replay_k: Option<usize>,
    #[arg(long)]
    pub replay_with_replacement: Option<bool>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub teacher_refresh: Option<usize>,
    #[arg(long)]
    pub exstream_passes: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gss_candidates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Axes of a grid; each list defaults to the base config's single value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default)]
    pub learners: Vec<LearnerKind>,
    #[serde(default)]
    pub policies: Vec<PolicyChoice>,
    #[serde(default)]
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// A grid file: a `[grid]` table plus the usual experiment fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    #[serde(default)]
    pub grid: GridAxes,
    #[serde(flatten)]
    pub base: toml::Table,
}

impl GridAxes {
    /// Expands the axes around `base`. Learners that cannot use a memory
    /// policy only get `none`.
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let learners = or(&self.learners, base.learner);
        let policies = or(&self.policies, base.policy);
        let regimes = or(&self.regimes, base.regime);
        let seeds = or(&self.seeds, base.seed);
        let mut out: Vec<ExperimentConfig> = Vec::new();
        for &learner in &learners {
            for &policy in &policies {
                let policy = if learner == LearnerKind::Sgd { policy } else { PolicyChoice::None };
                for &regime in &regimes {
                    for &seed in &seeds {
                        let cfg = ExperimentConfig {
                            learner,
                            policy,
                            regime,
                            seed,
                            ..base.clone()
                        };
                        if !out.iter().any(|c| c.cell_name() == cfg.cell_name()) {
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

impl GridFile {
    pub fn load(path: &Path) -> anyhow::Result<(GridAxes, ExperimentConfig)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("reading grid {}", path.display())))?;
        let file: GridFile = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = ExperimentConfig::from_toml(&toml::to_string(&file.base).map_err(|e| config_err(e.to_string()))?)?;
        Ok((file.grid, base))
    }
}
