//! Run configuration: plain-text key=value files plus flag overrides,
//! validated field by field before any compute starts.

use std::fmt;
use std::path::{Path, PathBuf};

use advent_core::net::{FusionPolicy, NetworkSpec};
use advent_core::regularizers::ContrastConfig;
use advent_core::unfold::{AdamConfig, LossMode, RegConfig, TrainConfig};

use crate::CliError;

/// Which loss drives a run, mirroring the regularizer ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Plain cross-entropy.
    Ce,
    /// Cross-entropy plus fixed-weight regularizers.
    Vrs,
    /// The K-layer unfolded regularizers with learnable coefficients.
    Urs,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Vrs => "vrs",
            LossKind::Urs => "urs",
        })
    }
}

/// Everything one training run needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub classes: usize,
    /// Temporal window depth d.
    pub depth: usize,
    pub policy: FusionPolicy,
    pub gsm: bool,
    pub loss: LossKind,
    /// Fixed regularizer weights for the vrs arm.
    pub alpha: f64,
    pub gamma: f64,
    /// Unroll depth K for the urs arm.
    pub unroll: usize,
    /// Initial values of the learnable per-layer coefficients (urs arm).
    pub alpha0: f64,
    pub gamma0: f64,
    pub eta0: f64,
    pub temperature: f64,
    pub anchors: usize,
    pub positives: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Backbone channel width and stage count.
    pub width: usize,
    pub stages: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            train_manifest: PathBuf::from("data/manifest_train.txt"),
            val_manifest: None,
            classes: 8,
            depth: 2,
            policy: FusionPolicy::Fi,
            gsm: true,
            loss: LossKind::Urs,
            alpha: 0.1,
            gamma: 0.1,
            unroll: 5,
            alpha0: 0.1,
            gamma0: 0.1,
            eta0: 0.01,
            temperature: 0.1,
            anchors: 16,
            positives: 32,
            negatives: 32,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            width: 16,
            stages: 2,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn field_err(field: &str, reason: impl fmt::Display) -> CliError {
    CliError::Usage(format!("config field `{field}`: {reason}"))
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| field_err(field, format!("cannot parse `{value}`: {e}")))
}

fn parse_policy(field: &str, value: &str) -> Result<FusionPolicy, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "ce" => Ok(FusionPolicy::Ce),
        "fi" => Ok(FusionPolicy::Fi),
        other => Err(field_err(field, format!("expected ce or fi, got `{other}`"))),
    }
}

fn parse_switch(field: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(field_err(field, format!("expected on or off, got `{other}`"))),
    }
}

fn parse_loss(field: &str, value: &str) -> Result<LossKind, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "ce" | "ce-only" => Ok(LossKind::Ce),
        "vrs" => Ok(LossKind::Vrs),
        "urs" => Ok(LossKind::Urs),
        other => Err(field_err(
            field,
            format!("expected ce, vrs, or urs, got `{other}`"),
        )),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment from a config file or flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "train_manifest" => self.train_manifest = PathBuf::from(value),
            "val_manifest" => self.val_manifest = Some(PathBuf::from(value)),
            "classes" => self.classes = parse_field(key, value)?,
            "depth" => self.depth = parse_field(key, value)?,
            "policy" => self.policy = parse_policy(key, value)?,
            "gsm" => self.gsm = parse_switch(key, value)?,
            "loss" => self.loss = parse_loss(key, value)?,
            "alpha" => self.alpha = parse_field(key, value)?,
            "gamma" => self.gamma = parse_field(key, value)?,
            "unroll" => self.unroll = parse_field(key, value)?,
            "alpha0" => self.alpha0 = parse_field(key, value)?,
            "gamma0" => self.gamma0 = parse_field(key, value)?,
            "eta0" => self.eta0 = parse_field(key, value)?,
            "temperature" => self.temperature = parse_field(key, value)?,
            "anchors" => self.anchors = parse_field(key, value)?,
            "positives" => self.positives = parse_field(key, value)?,
            "negatives" => self.negatives = parse_field(key, value)?,
            "learning_rate" => self.learning_rate = parse_field(key, value)?,
            "weight_decay" => self.weight_decay = parse_field(key, value)?,
            "epochs" => self.epochs = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            "width" => self.width = parse_field(key, value)?,
            "stages" => self.stages = parse_field(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(CliError::Usage(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Loads `key = value` lines; '#' starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    number + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(2..=23).contains(&self.classes) {
            return Err(field_err("classes", "must be in [2, 23]"));
        }
        if self.depth < 1 {
            return Err(field_err("depth", "must be >= 1"));
        }
        if self.loss == LossKind::Urs && self.unroll > 16 {
            return Err(field_err("unroll", "must be <= 16"));
        }
        if self.temperature <= 0.0 {
            return Err(field_err("temperature", "must be > 0"));
        }
        if self.anchors < 1 || self.positives < 1 || self.negatives < 1 {
            return Err(field_err(
                "anchors/positives/negatives",
                "caps must be >= 1",
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(field_err("learning_rate", "must be > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(field_err("weight_decay", "must be >= 0"));
        }
        if self.epochs < 1 {
            return Err(field_err("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(field_err("batch_size", "must be >= 1"));
        }
        if self.width < 1 {
            return Err(field_err("width", "must be >= 1"));
        }
        if !(1..=6).contains(&self.stages) {
            return Err(field_err("stages", "must be in [1, 6]"));
        }
        if self.alpha < 0.0 || self.gamma < 0.0 {
            return Err(field_err("alpha/gamma", "must be >= 0"));
        }
        if self.alpha0 < 0.0 || self.gamma0 < 0.0 || self.eta0 < 0.0 {
            return Err(field_err("alpha0/gamma0/eta0", "must be >= 0"));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            policy: Some(self.policy),
            num_classes: self.classes,
            backbone_width: self.width,
            backbone_depth: self.stages,
            input_channels: 3,
        }
    }

    pub fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            max_anchors: self.anchors,
            max_positives: self.positives,
            max_negatives: self.negatives,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss_mode: match self.loss {
                LossKind::Ce => LossMode::CeOnly,
                LossKind::Vrs => LossMode::Vanilla {
                    alpha: self.alpha,
                    gamma: self.gamma,
                },
                LossKind::Urs => LossMode::Unfolded,
            },
            reg: RegConfig {
                contrast: self.contrast_config(),
                ..Default::default()
            },
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            alpha0: self.alpha0,
            gamma0: self.gamma0,
            eta0: self.eta0,
        }
    }

    /// The effective unroll depth: zero unless the urs loss is active.
    pub fn effective_unroll(&self) -> usize {
        if self.loss == LossKind::Urs {
            self.unroll
        } else {
            0
        }
    }

    /// Serializes the resolved config back to the key=value format, so a run
    /// directory can re-execute identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("data_root", self.data_root.display().to_string());
        push("train_manifest", self.train_manifest.display().to_string());
        if let Some(val) = &self.val_manifest {
            push("val_manifest", val.display().to_string());
        }
        push("classes", self.classes.to_string());
        push("depth", self.depth.to_string());
        push("policy", self.policy.to_string());
        push("gsm", if self.gsm { "on" } else { "off" }.to_string());
        push("loss", self.loss.to_string());
        push("alpha", self.alpha.to_string());
        push("gamma", self.gamma.to_string());
        push("unroll", self.unroll.to_string());
        push("alpha0", self.alpha0.to_string());
        push("gamma0", self.gamma0.to_string());
        push("eta0", self.eta0.to_string());
        push("temperature", self.temperature.to_string());
        push("anchors", self.anchors.to_string());
        push("positives", self.positives.to_string());
        push("negatives", self.negatives.to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("seed", self.seed.to_string());
        push("width", self.width.to_string());
        push("stages", self.stages.to_string());
        push("out_dir", self.out_dir.display().to_string());
        out
    }
}
