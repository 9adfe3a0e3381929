//! Single-file checkpoint container.
//!
//! A checkpoint is one safetensors archive holding every named weight
//! tensor, the unfold coefficients, and the optimizer moments, plus a JSON
//! manifest (network spec, unroll depth, RNG base seed, counters) embedded
//! as a u8 tensor under `__manifest__`. The file is self-describing: the
//! manifest says exactly which tensors to expect.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetworkSpec, SegModel};
use crate::unfold::{Adam, AdamConfig, TrainConfig, TrainState, UnfoldParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "__manifest__";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub network: NetworkSpec,
    pub unroll_depth: usize,
    pub base_seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub adam: AdamConfig,
    pub optimizer_step: u64,
    /// Whether the optimizer state covers the unfold coefficients.
    pub unfold_in_optimizer: bool,
    /// Names of the parameter tensors, in optimizer order.
    pub parameters: Vec<String>,
}

fn moment_names(param: &str) -> (String, String) {
    (format!("opt.m.{param}"), format!("opt.v.{param}"))
}

/// Writes the full training state to one file.
pub fn save(path: &Path, state: &TrainState, unfold_in_optimizer: bool) -> Result<()> {
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    let mut parameters = Vec::new();
    let mut push = |name: String, t: Tensor| {
        parameters.push(name.clone());
        tensors.insert(name, t);
    };
    for (name, var) in state.model.named_vars() {
        push(name, var.as_tensor().clone());
    }
    if unfold_in_optimizer {
        for (name, var) in state.unfold.named_vars() {
            push(name, var.as_tensor().clone());
        }
    } else {
        for (name, var) in state.unfold.named_vars() {
            tensors.insert(name, var.as_tensor().clone());
        }
    }
    for (name, (m, v)) in parameters
        .clone()
        .iter()
        .zip(state.optimizer.moments().iter())
    {
        let (m_name, v_name) = moment_names(name);
        tensors.insert(m_name, m.clone());
        tensors.insert(v_name, v.clone());
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        network: state.model.spec.clone(),
        unroll_depth: state.unfold.k(),
        base_seed: state.base_seed,
        epoch: state.epoch,
        step: state.step,
        adam: state.optimizer.config,
        optimizer_step: state.optimizer.step_count,
        unfold_in_optimizer,
        parameters,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    let n = manifest_bytes.len();
    tensors.insert(
        MANIFEST_KEY.to_string(),
        Tensor::from_vec(manifest_bytes, (n,), &Device::Cpu)?,
    );
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

/// Reads just the manifest from a checkpoint file.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint file not found: {}",
            path.display()
        )));
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    let blob = tensors
        .get(MANIFEST_KEY)
        .ok_or_else(|| Error::Checkpoint("missing embedded manifest".into()))?;
    let bytes = blob.to_dtype(DType::U8)?.to_vec1::<u8>()?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} not supported (expected {})",
            manifest.version, CHECKPOINT_VERSION
        )));
    }
    Ok(manifest)
}

/// Restores the full training state. The rebuilt state resumes bitwise
/// identically to an uninterrupted run in deterministic mode.
pub fn load(path: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;

    let model = SegModel::init(&manifest.network, 0)?;
    model.load_named(&tensors)?;
    let unfold = UnfoldParams::init(manifest.unroll_depth, 0.0, 0.0, 0.0, &Device::Cpu)?;
    for (name, var) in unfold.named_vars() {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        var.set(t)?;
    }

    let vars: Vec<&candle_core::Var> = {
        let mut named: HashMap<String, &candle_core::Var> = HashMap::new();
        // keep borrows alive over both maps
        let model_named = model.named_vars();
        let unfold_named = unfold.named_vars();
        for (n, v) in model_named.iter() {
            named.insert(n.clone(), v);
        }
        for (n, v) in unfold_named.iter() {
            named.insert(n.clone(), v);
        }
        manifest
            .parameters
            .iter()
            .map(|n| {
                named
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut optimizer = Adam::new(manifest.adam, &vars)?;
    let moments = manifest
        .parameters
        .iter()
        .map(|name| {
            let (m_name, v_name) = moment_names(name);
            let m = tensors
                .get(&m_name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{m_name}'")))?;
            let v = tensors
                .get(&v_name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{v_name}'")))?;
            Ok((m.clone(), v.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    optimizer.set_moments(moments, manifest.optimizer_step)?;

    let state = TrainState {
        model,
        unfold,
        optimizer,
        epoch: manifest.epoch,
        step: manifest.step,
        base_seed: manifest.base_seed,
    };
    Ok((state, manifest))
}

/// Convenience used by training loops: save under `dir/checkpoint.safetensors`.
pub fn default_path(dir: &Path) -> std::path::PathBuf {
    dir.join("checkpoint.safetensors")
}

/// True when `config` trains the unfold coefficients, which decides the
/// optimizer coverage recorded in the checkpoint.
pub fn unfold_in_optimizer(config: &TrainConfig) -> bool {
    matches!(config.loss_mode, crate::unfold::LossMode::Unfolded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{FusionPolicy, NetworkSpec};
    use crate::unfold::LossMode;

    fn small_state() -> TrainState {
        let spec = NetworkSpec {
            policy: Some(FusionPolicy::Ce),
            num_classes: 4,
            backbone_width: 4,
            backbone_depth: 2,
            input_channels: 3,
        };
        let model = SegModel::init(&spec, 7).unwrap();
        let config = TrainConfig {
            loss_mode: LossMode::Unfolded,
            ..Default::default()
        };
        TrainState::new(model, 2, &config, 7).unwrap()
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = default_path(dir.path());
        let state = small_state();
        save(&path, &state, true).unwrap();
        let (loaded, manifest) = load(&path).unwrap();
        assert_eq!(manifest.unroll_depth, 2);
        assert_eq!(manifest.base_seed, 7);
        for ((name_a, var_a), (name_b, var_b)) in state
            .model
            .named_vars()
            .iter()
            .zip(loaded.model.named_vars().iter())
        {
            assert_eq!(name_a, name_b);
            let a = var_a.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = var_b.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b);
        }
        let (alpha, gamma, eta) = loaded.unfold.values().unwrap();
        assert_eq!(alpha, vec![0.1, 0.1]);
        assert_eq!(gamma, vec![0.1, 0.1]);
        assert_eq!(eta, vec![0.01, 0.01]);
    }

    #[test]
    fn missing_file_is_a_clean_error() {
        let err = read_manifest(Path::new("/nonexistent/ckpt.safetensors")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
