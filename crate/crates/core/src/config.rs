//! Flat `key = value` configuration with `--key=value` overrides. Key
//! names follow the hyperparameter tables verbatim (mask_ratio,
//! noise_scale, denoise_weight, warmup_steps, force_weight, ...), so a
//! config file reads like the tables do.

use crate::encoder2d::PeKind;
use crate::encoder3d::EncoderConfig;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse { line: usize, message: String },
    UnknownKey(String),
    BadValue { key: String, value: String, want: &'static str },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse { line, message } => write!(f, "config line {line}: {message}"),
            Self::UnknownKey(k) => write!(f, "unknown config key {k:?}"),
            Self::BadValue { key, value, want } => {
                write!(f, "config key {key:?}: cannot parse {value:?} as {want}")
            }
            Self::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every tunable in one place. Defaults mirror the pretraining and
/// finetuning hyperparameter tables; desk-scale runs override sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // model
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub k_rbf: usize,
    pub d_cut: f64,
    pub pe_width: usize,
    pub pe_heads: usize,
    pub pe_layers: usize,
    pub pe_kind: String, // "retrans" | "rwse"
    pub rwse_steps: usize,
    pub dec_layers: usize,
    // masking / noise
    pub mask_ratio: f64,
    pub noise_scale: f64,
    pub denoise_weight: f64,
    // optimization
    pub batch_size: usize,
    pub accumulate_grad_batches: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub weight_decay: f64,
    // finetuning
    pub force_weight: f64,
    pub energy_weight: f64,
    pub ema_alpha_y: f64,
    pub ema_alpha_dy: f64,
    pub force_fd_step: f64,
    // toggles
    pub augmentation: bool,
    pub srd_enabled: bool,
    pub distill_enabled: bool,
    pub no_3d_attention: bool,
    pub no_update_layer: bool,
    pub decoder_structure_dependent: bool,
    pub encoder_frozen: bool,
    // corpus generation
    pub gen_count: usize,
    pub gen_natoms_min: usize,
    pub gen_natoms_max: usize,
    pub gen_label: String, // "none" | "atom_count"
    // bookkeeping
    pub seed: u64,
    pub log_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d_model: 256,
            heads: 8,
            layers: 12,
            k_rbf: 64,
            d_cut: 5.0,
            pe_width: 64,
            pe_heads: 4,
            pe_layers: 12,
            pe_kind: "retrans".into(),
            rwse_steps: 16,
            dec_layers: 2,
            mask_ratio: 0.25,
            noise_scale: 0.04,
            denoise_weight: 0.1,
            batch_size: 128,
            accumulate_grad_batches: 2,
            lr_init: 5e-5,
            lr_min: 1e-6,
            warmup_steps: 10_000,
            max_steps: 100_000,
            weight_decay: 1e-16,
            force_weight: 0.8,
            energy_weight: 0.2,
            ema_alpha_y: 0.05,
            ema_alpha_dy: 1.0,
            force_fd_step: 1e-3,
            gen_count: 100,
            gen_natoms_min: 5,
            gen_natoms_max: 12,
            gen_label: "none".into(),
            augmentation: true,
            srd_enabled: true,
            distill_enabled: true,
            no_3d_attention: false,
            no_update_layer: false,
            decoder_structure_dependent: false,
            encoder_frozen: false,
            seed: 0,
            log_every: 1,
        }
    }
}

impl Config {
    /// A small configuration for quick runs and tests.
    pub fn desk() -> Self {
        Config {
            d_model: 32,
            heads: 4,
            layers: 3,
            k_rbf: 16,
            pe_width: 16,
            pe_heads: 2,
            pe_layers: 2,
            rwse_steps: 8,
            dec_layers: 2,
            batch_size: 8,
            accumulate_grad_batches: 1,
            lr_init: 1e-3,
            warmup_steps: 50,
            max_steps: 2_000,
            ..Config::default()
        }
    }

    pub fn parse_file_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected key = value, got {t:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_map(map)?;
        Ok(cfg)
    }

    pub fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn u(key: &str, v: &str) -> Result<usize, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: v.into(),
                want: "unsigned integer",
            })
        }
        fn f(key: &str, v: &str) -> Result<f64, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: v.into(),
                want: "float",
            })
        }
        fn b(key: &str, v: &str) -> Result<bool, ConfigError> {
            match v {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    want: "boolean",
                }),
            }
        }
        match key {
            "d_model" => self.d_model = u(key, value)?,
            "heads" => self.heads = u(key, value)?,
            "layers" => self.layers = u(key, value)?,
            "k_rbf" => self.k_rbf = u(key, value)?,
            "d_cut" => self.d_cut = f(key, value)?,
            "pe_width" => self.pe_width = u(key, value)?,
            "pe_heads" => self.pe_heads = u(key, value)?,
            "pe_layers" => self.pe_layers = u(key, value)?,
            "pe_kind" => self.pe_kind = value.to_string(),
            "rwse_steps" => self.rwse_steps = u(key, value)?,
            "dec_layers" => self.dec_layers = u(key, value)?,
            "mask_ratio" => self.mask_ratio = f(key, value)?,
            "noise_scale" => self.noise_scale = f(key, value)?,
            "denoise_weight" => self.denoise_weight = f(key, value)?,
            "batch_size" => self.batch_size = u(key, value)?,
            "accumulate_grad_batches" => self.accumulate_grad_batches = u(key, value)?,
            "lr_init" => self.lr_init = f(key, value)?,
            "lr_min" => self.lr_min = f(key, value)?,
            "warmup_steps" => self.warmup_steps = u(key, value)?,
            "max_steps" => self.max_steps = u(key, value)?,
            "weight_decay" => self.weight_decay = f(key, value)?,
            "force_weight" => self.force_weight = f(key, value)?,
            "energy_weight" => self.energy_weight = f(key, value)?,
            "ema_alpha_y" => self.ema_alpha_y = f(key, value)?,
            "ema_alpha_dy" => self.ema_alpha_dy = f(key, value)?,
            "force_fd_step" => self.force_fd_step = f(key, value)?,
            "gen_count" => self.gen_count = u(key, value)?,
            "gen_natoms_min" => self.gen_natoms_min = u(key, value)?,
            "gen_natoms_max" => self.gen_natoms_max = u(key, value)?,
            "gen_label" => self.gen_label = value.to_string(),
            "augmentation" => self.augmentation = b(key, value)?,
            "srd_enabled" => self.srd_enabled = b(key, value)?,
            "distill_enabled" => self.distill_enabled = b(key, value)?,
            "no_3d_attention" => self.no_3d_attention = b(key, value)?,
            "no_update_layer" => self.no_update_layer = b(key, value)?,
            "decoder_structure_dependent" => self.decoder_structure_dependent = b(key, value)?,
            "encoder_frozen" => self.encoder_frozen = b(key, value)?,
            "seed" => {
                self.seed = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    want: "u64",
                })?
            }
            "log_every" => self.log_every = u(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "mask_ratio must be in (0,1), got {}",
                self.mask_ratio
            )));
        }
        if self.lr_min > self.lr_init {
            return Err(ConfigError::Invalid(format!(
                "lr_min {} exceeds lr_init {}",
                self.lr_min, self.lr_init
            )));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("denoise_weight", self.denoise_weight),
            ("weight_decay", self.weight_decay),
            ("force_weight", self.force_weight),
            ("energy_weight", self.energy_weight),
        ] {
            if v < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.pe_width % self.pe_heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "pe_width {} not divisible by pe_heads {}",
                self.pe_width, self.pe_heads
            )));
        }
        if !(3..=32).contains(&self.gen_natoms_min)
            || !(3..=32).contains(&self.gen_natoms_max)
            || self.gen_natoms_min > self.gen_natoms_max
        {
            return Err(ConfigError::Invalid(format!(
                "gen_natoms range [{}, {}] must lie within [3, 32]",
                self.gen_natoms_min, self.gen_natoms_max
            )));
        }
        if self.gen_label != "none" && self.gen_label != "atom_count" {
            return Err(ConfigError::Invalid(format!(
                "gen_label must be none or atom_count, got {:?}",
                self.gen_label
            )));
        }
        if self.pe_kind != "retrans" && self.pe_kind != "rwse" {
            return Err(ConfigError::Invalid(format!(
                "pe_kind must be retrans or rwse, got {:?}",
                self.pe_kind
            )));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            k_rbf: self.k_rbf,
            no_3d_attention: self.no_3d_attention,
            no_update_layer: self.no_update_layer,
        }
    }

    pub fn pe_kind(&self) -> PeKind {
        match self.pe_kind.as_str() {
            "rwse" => PeKind::Rwse { steps: self.rwse_steps },
            _ => PeKind::ReTrans2d,
        }
    }

    /// Serialize every field as `key = value`, suitable for a run-dir
    /// snapshot that reproduces the run.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        push("d_model", self.d_model.to_string());
        push("heads", self.heads.to_string());
        push("layers", self.layers.to_string());
        push("k_rbf", self.k_rbf.to_string());
        push("d_cut", self.d_cut.to_string());
        push("pe_width", self.pe_width.to_string());
        push("pe_heads", self.pe_heads.to_string());
        push("pe_layers", self.pe_layers.to_string());
        push("pe_kind", self.pe_kind.clone());
        push("rwse_steps", self.rwse_steps.to_string());
        push("dec_layers", self.dec_layers.to_string());
        push("mask_ratio", self.mask_ratio.to_string());
        push("noise_scale", self.noise_scale.to_string());
        push("denoise_weight", self.denoise_weight.to_string());
        push("batch_size", self.batch_size.to_string());
        push("accumulate_grad_batches", self.accumulate_grad_batches.to_string());
        push("lr_init", self.lr_init.to_string());
        push("lr_min", self.lr_min.to_string());
        push("warmup_steps", self.warmup_steps.to_string());
        push("max_steps", self.max_steps.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("force_weight", self.force_weight.to_string());
        push("energy_weight", self.energy_weight.to_string());
        push("ema_alpha_y", self.ema_alpha_y.to_string());
        push("ema_alpha_dy", self.ema_alpha_dy.to_string());
        push("force_fd_step", self.force_fd_step.to_string());
        push("gen_count", self.gen_count.to_string());
        push("gen_natoms_min", self.gen_natoms_min.to_string());
        push("gen_natoms_max", self.gen_natoms_max.to_string());
        push("gen_label", self.gen_label.clone());
        push("augmentation", self.augmentation.to_string());
        push("srd_enabled", self.srd_enabled.to_string());
        push("distill_enabled", self.distill_enabled.to_string());
        push("no_3d_attention", self.no_3d_attention.to_string());
        push("no_update_layer", self.no_update_layer.to_string());
        push("decoder_structure_dependent", self.decoder_structure_dependent.to_string());
        push("encoder_frozen", self.encoder_frozen.to_string());
        push("seed", self.seed.to_string());
        push("log_every", self.log_every.to_string());
        s
    }
}
