//! `key = value` run configuration with `[model]`, `[diffusion]`, `[gates]`,
//! `[prune]` and `[run]` sections.

use std::path::{Path, PathBuf};

use ecoprune_core::denoiser::DenoiserConfig;
use ecoprune_core::diffusion::SamplerMode;
use ecoprune_core::gates::GateConfig;
use ecoprune_core::trainer::{Engine, PruneConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub sampler: SamplerMode,
    pub gates: GateConfig<f64>,
    pub prune: PruneConfig<f64>,
    /// Diffusion steps used while learning the mask; defaults to `model.steps`.
    pub prune_steps_t: Option<usize>,
    /// Conditions mask learning draws from; empty means all of them.
    pub prune_conditions: Vec<usize>,
    pub run: RunSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_mean_scale: f64,
    pub data_noise_std: f64,
    pub base_steps: usize,
    pub base_batch_size: usize,
    pub base_lr: f64,
    /// Samples per condition for `sample` and `eval`.
    pub n_samples: usize,
    /// Conditions for `sample` and `eval`; empty means all of them.
    pub conditions: Vec<usize>,
    pub profile_steps: Vec<usize>,
    pub profile_repeats: usize,
    pub gate_curve_deltas: Vec<f64>,
    pub gate_curve_draws: usize,
    /// Adds wall-clock columns to reports, which makes them non-reproducible.
    pub timing: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data_mean_scale: 1.0,
            data_noise_std: 0.5,
            base_steps: 2000,
            base_batch_size: 8,
            base_lr: 1e-3,
            n_samples: 8,
            conditions: Vec::new(),
            profile_steps: vec![2, 4, 8, 16, 32],
            profile_repeats: 1,
            gate_curve_deltas: vec![0.05, 2.0],
            gate_curve_draws: 10_000,
            timing: false,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            sampler: SamplerMode::Deterministic,
            gates: GateConfig::default(),
            prune: PruneConfig::default(),
            prune_steps_t: None,
            prune_conditions: Vec::new(),
            run: RunSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut stochastic = false;
        let mut sampler_seed = 0u64;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    msg: format!("unterminated section header `{content}`"),
                })?;
                if !matches!(name, "model" | "diffusion" | "gates" | "prune" | "run") {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "key outside of any section".into(),
                });
            }
            let v = Value { line, key, raw: value };
            let unknown = || ConfigError::UnknownKey {
                line,
                section: section.clone(),
                key: key.to_string(),
            };
            match (section.as_str(), key) {
                ("model", "d_model") => cfg.model.d_model = v.parse()?,
                ("model", "n_heads") => cfg.model.n_heads = v.parse()?,
                ("model", "d_ff") => cfg.model.d_ff = v.parse()?,
                ("model", "n_blocks") => cfg.model.n_blocks = v.parse()?,
                ("model", "seq_len") => cfg.model.seq_len = v.parse()?,
                ("model", "n_conditions") => cfg.model.n_conditions = v.parse()?,
                ("diffusion", "steps") => cfg.model.steps = v.parse()?,
                ("diffusion", "sampler") => {
                    stochastic = match value {
                        "deterministic" => false,
                        "stochastic_shared" => true,
                        _ => return Err(v.bad("expected deterministic or stochastic_shared")),
                    }
                }
                ("diffusion", "sampler_seed") => sampler_seed = v.parse()?,
                ("gates", "alpha") => cfg.gates.alpha = v.parse()?,
                ("gates", "zeta") => cfg.gates.zeta = v.parse()?,
                ("gates", "gamma") => cfg.gates.gamma = v.parse()?,
                ("gates", "delta") => cfg.gates.delta = v.parse()?,
                ("gates", "beta_stretch") => cfg.gates.beta_stretch = v.parse()?,
                ("prune", "beta_reg") => cfg.prune.beta_reg = v.parse()?,
                ("prune", "lr_attn") => cfg.prune.lr_attn = v.parse()?,
                ("prune", "lr_ffn") => cfg.prune.lr_ffn = v.parse()?,
                ("prune", "steps") => cfg.prune.steps = v.parse()?,
                ("prune", "batch_size") => cfg.prune.batch_size = v.parse()?,
                ("prune", "weight_decay") => cfg.prune.weight_decay = v.parse()?,
                ("prune", "engine") => {
                    cfg.prune.engine = match value {
                        "naive" => Engine::Naive,
                        "checkpointed" => Engine::Checkpointed,
                        _ => return Err(v.bad("expected naive or checkpointed")),
                    }
                }
                ("prune", "t_train") => cfg.prune_steps_t = Some(v.parse()?),
                ("prune", "conditions") => cfg.prune_conditions = v.list()?,
                ("run", "seed") => cfg.run.seed = v.parse()?,
                ("run", "out_dir") => cfg.run.out_dir = PathBuf::from(value),
                ("run", "data_mean_scale") => cfg.run.data_mean_scale = v.parse()?,
                ("run", "data_noise_std") => cfg.run.data_noise_std = v.parse()?,
                ("run", "base_steps") => cfg.run.base_steps = v.parse()?,
                ("run", "base_batch_size") => cfg.run.base_batch_size = v.parse()?,
                ("run", "base_lr") => cfg.run.base_lr = v.parse()?,
                ("run", "n_samples") => cfg.run.n_samples = v.parse()?,
                ("run", "conditions") => cfg.run.conditions = v.list()?,
                ("run", "profile_steps") => cfg.run.profile_steps = v.list()?,
                ("run", "profile_repeats") => cfg.run.profile_repeats = v.parse()?,
                ("run", "gate_curve_deltas") => cfg.run.gate_curve_deltas = v.list()?,
                ("run", "gate_curve_draws") => cfg.run.gate_curve_draws = v.parse()?,
                ("run", "timing") => cfg.run.timing = v.parse()?,
                _ => return Err(unknown()),
            }
        }
        cfg.sampler = if stochastic {
            SamplerMode::StochasticShared { seed: sampler_seed }
        } else {
            SamplerMode::Deterministic
        };
        cfg.prune.sampler = cfg.sampler;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: ecoprune_core::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        self.gates.validate().map_err(invalid)?;
        self.prune.validate().map_err(invalid)?;
        if self.prune.steps == 0 {
            // Zero steps is a valid no-op for the library but never what a run wants.
            log::warn!("prune.steps = 0: learn-mask will return the initial lambda");
        }
        let t = self.mask_steps();
        if t == 0 || t > self.model.steps {
            return Err(ConfigError::Invalid(format!(
                "prune.t_train must be in [1, {}], got {t}",
                self.model.steps
            )));
        }
        for &y in self.prune_conditions.iter().chain(&self.run.conditions) {
            if y >= self.model.n_conditions {
                return Err(ConfigError::Invalid(format!(
                    "condition {y} out of range [0, {})",
                    self.model.n_conditions
                )));
            }
        }
        if self.run.n_samples == 0 || self.run.base_batch_size == 0 || self.run.profile_repeats == 0 {
            return Err(ConfigError::Invalid(
                "n_samples, base_batch_size and profile_repeats must be at least 1".into(),
            ));
        }
        if self.run.profile_steps.contains(&0) {
            return Err(ConfigError::Invalid("profile_steps entries must be at least 1".into()));
        }
        if self.run.gate_curve_deltas.iter().any(|&d| d <= 0.0) {
            return Err(ConfigError::Invalid("gate_curve_deltas must be > 0".into()));
        }
        Ok(())
    }

    pub fn mask_steps(&self) -> usize {
        self.prune_steps_t.unwrap_or(self.model.steps)
    }

    pub fn mask_conditions(&self) -> Vec<usize> {
        or_all(&self.prune_conditions, self.model.n_conditions)
    }

    pub fn eval_conditions(&self) -> Vec<usize> {
        or_all(&self.run.conditions, self.model.n_conditions)
    }
}

fn or_all(list: &[usize], n: usize) -> Vec<usize> {
    if list.is_empty() {
        (0..n).collect()
    } else {
        list.to_vec()
    }
}

struct Value<'a> {
    line: usize,
    key: &'a str,
    raw: &'a str,
}

impl Value<'_> {
    fn bad(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.key.to_string(),
            msg: msg.into(),
        }
    }

    fn parse<T: std::str::FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw.parse().map_err(|e: T::Err| self.bad(format!("`{}`: {e}", self.raw)))
    }

    fn list<T: std::str::FromStr>(&self) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw.is_empty() {
            return Ok(Vec::new());
        }
        self.raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: T::Err| self.bad(format!("`{}`: {e}", s.trim())))
            })
            .collect()
    }
}
