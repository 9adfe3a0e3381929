//! K-layer unfolding of the two regularizers, plus the training step that
//! co-trains model weights and the per-layer coefficients.
//!
//! Each unroll layer applies one gradient-descent update to the prediction:
//! x^(k) = x^(k-1) - eta_k (alpha_k grad_BD + gamma_k grad_con), with the
//! closed-form regularizer gradients expressed as differentiable tensor
//! graphs so outer backpropagation reaches alpha, gamma, eta, and every
//! backbone weight. All math runs in f64.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::net::{softmax_classes, PredictionTensor, SegModel, Space};
use crate::pipeline::LsmWindow;
use crate::regularizers::{sample_contrast_indices, ContrastConfig, ContrastIndices};

/// Learnable per-layer coefficients {alpha, gamma, eta} for k = 1..K.
pub struct UnfoldParams {
    pub alpha: Vec<Var>,
    pub gamma: Vec<Var>,
    pub eta: Vec<Var>,
}

pub const DEFAULT_ALPHA0: f64 = 0.1;
pub const DEFAULT_GAMMA0: f64 = 0.1;
pub const DEFAULT_ETA0: f64 = 0.01;

impl UnfoldParams {
    pub fn init(k: usize, alpha0: f64, gamma0: f64, eta0: f64, device: &Device) -> Result<Self> {
        let scalars = |v: f64| -> Result<Vec<Var>> {
            (0..k)
                .map(|_| Ok(Var::from_tensor(&Tensor::new(v, device)?)?))
                .collect()
        };
        Ok(Self {
            alpha: scalars(alpha0)?,
            gamma: scalars(gamma0)?,
            eta: scalars(eta0)?,
        })
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        for (name, group) in [
            ("alpha", &self.alpha),
            ("gamma", &self.gamma),
            ("eta", &self.eta),
        ] {
            for (i, var) in group.iter().enumerate() {
                out.push((format!("unfold.{name}.{i}"), var));
            }
        }
        out
    }

    pub fn values(&self) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let read = |group: &[Var]| -> Result<Vec<f64>> {
            group
                .iter()
                .map(|v| Ok(v.as_tensor().to_scalar::<f64>()?))
                .collect()
        };
        Ok((read(&self.alpha)?, read(&self.gamma)?, read(&self.eta)?))
    }
}

/// Regularizer evaluation settings used inside the unroll.
#[derive(Debug, Clone, Copy)]
pub struct RegConfig {
    pub contrast: ContrastConfig,
    pub epsilon: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            contrast: ContrastConfig::default(),
            epsilon: crate::regularizers::DEFAULT_EPSILON,
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// One-hot label tensor (B, C, H, W) with unit entries.
pub fn one_hot_labels(labels: &[&Array2<u8>], num_classes: usize, device: &Device) -> Result<Tensor> {
    let b = labels.len();
    let (h, w) = labels[0].dim();
    let mut data = vec![0.0f64; b * num_classes * h * w];
    for (i, label) in labels.iter().enumerate() {
        if label.dim() != (h, w) {
            return Err(Error::Shape("mixed label shapes in batch".into()));
        }
        for ((y, x), &class) in label.indexed_iter() {
            let k = class as usize;
            if k >= num_classes {
                return Err(Error::Shape(format!(
                    "label class {k} out of range [0, {num_classes})"
                )));
            }
            data[((i * num_classes + k) * h + y) * w + x] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (b, num_classes, h, w), device)?)
}

/// The (pixel, class) probability table induced by logits: per-pixel
/// softmax divided by the pixel count, clamped at the epsilon floor.
fn probability_table(logits: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (_, _, h, w) = logits.dims4()?;
    let n = (h * w) as f64;
    let p = (softmax_classes(logits)? / n)?;
    Ok(p.maximum(epsilon)?)
}

/// Closed-form Bhattacharyya gradient field over logit positions:
/// -(1/2)(1/BC) sqrt(P_Y)/sqrt(P_X) at every (pixel, class) entry, which is
/// zero wherever the one-hot target is zero. `one_hot` carries unit entries.
pub fn bd_grad_field(logits: &Tensor, one_hot: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (_, _, h, w) = logits.dims4()?;
    let n = (h * w) as f64;
    let py = (one_hot / n)?;
    let px = probability_table(logits, epsilon)?;
    let py_root = py.sqrt()?;
    let root = (px.sqrt()? * &py_root)?;
    let bc = root.sum_keepdim(1)?.sum_keepdim(2)?.sum_keepdim(3)?; // per image
    let ratio = py_root.div(&px.sqrt()?)?;
    Ok(ratio.broadcast_div(&bc)?.affine(-0.5, 0.0)?)
}

/// Per-batch contrast sets: one list of index sets per image, drawn once so
/// every unroll layer sees consistent positives/negatives.
pub fn batch_contrast_sets(
    labels: &[&Array2<u8>],
    config: &ContrastConfig,
    seed: u64,
) -> Vec<Vec<ContrastIndices>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| sample_contrast_indices(l, config, mix_seed(seed, i as u64)))
        .collect()
}

fn stable_softmax_rows(scores: &Tensor) -> Result<Tensor> {
    let max = scores.max_keepdim(0)?.detach();
    let exp = scores.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(0)?;
    Ok(exp.broadcast_div(&sum)?)
}

/// InfoNCE gradient field: for every sampled anchor pixel, the closed-form
/// gradient grad_x B / B - grad_x A / A placed at that pixel; zero
/// elsewhere. Embeddings are the current per-pixel logit vectors.
pub fn contrast_grad_field(
    logits: &Tensor,
    sets: &[Vec<ContrastIndices>],
    temperature: f64,
) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let n = h * w;
    let device = logits.device();
    let mut per_image = Vec::with_capacity(b);
    for (i, image_sets) in sets.iter().enumerate() {
        if image_sets.is_empty() {
            per_image.push(Tensor::zeros((c, h, w), DType::F64, device)?);
            continue;
        }
        let flat = logits.get(i)?.reshape((c, n))?.t()?.contiguous()?; // (N, C) pixel embeddings
        let mut anchor_grads = Vec::with_capacity(image_sets.len());
        let mut scatter = vec![0.0f64; n * image_sets.len()];
        for (a, set) in image_sets.iter().enumerate() {
            scatter[set.anchor * image_sets.len() + a] = 1.0;
            let idx = |ids: &[usize]| -> Result<Tensor> {
                let ids: Vec<u32> = ids.iter().map(|&v| v as u32).collect();
                let len = ids.len();
                Ok(Tensor::from_vec(ids, (len,), device)?)
            };
            let anchor = flat.index_select(&idx(&[set.anchor])?, 0)?; // (1, C)
            let pos = flat.index_select(&idx(&set.positives)?, 0)?; // (M, C)
            let all_ids: Vec<usize> = set
                .positives
                .iter()
                .chain(set.negatives.iter())
                .copied()
                .collect();
            let all = flat.index_select(&idx(&all_ids)?, 0)?; // (M + Mn, C)
            let scores_all = (all.matmul(&anchor.t()?)? / temperature)?; // (M+Mn, 1)
            let scores_pos = (pos.matmul(&anchor.t()?)? / temperature)?;
            let w_all = stable_softmax_rows(&scores_all)?;
            let w_pos = stable_softmax_rows(&scores_pos)?;
            // grad ln B - grad ln A, each (1, C)
            let grad = ((w_all.t()?.matmul(&all)? - w_pos.t()?.matmul(&pos)?)? / temperature)?;
            anchor_grads.push(grad);
        }
        let grads = Tensor::cat(&anchor_grads, 0)?; // (A, C)
        let scatter = Tensor::from_vec(scatter, (n, image_sets.len()), device)?;
        let field = scatter.matmul(&grads)?; // (N, C)
        per_image.push(field.t()?.reshape((c, h, w))?);
    }
    Ok(Tensor::stack(&per_image, 0)?)
}

/// Runs the K-layer unroll on a batch of logit tensors. K = 0 returns `x0`
/// unchanged; so does eta = 0 or alpha = gamma = 0, exactly.
pub fn unroll(
    x0: &PredictionTensor,
    labels: &[&Array2<u8>],
    params: &UnfoldParams,
    config: &RegConfig,
    seed: u64,
) -> Result<PredictionTensor> {
    if x0.space != Space::Logit {
        return Err(Error::Shape("unroll expects logit-space input".into()));
    }
    let (_, c, _, _) = x0.dims()?;
    let device = x0.values.device();
    let one_hot = one_hot_labels(labels, c, device)?;
    let sets = batch_contrast_sets(labels, &config.contrast, seed);
    let mut x = x0.values.clone();
    for k in 0..params.k() {
        let g_bd = bd_grad_field(&x, &one_hot, config.epsilon)?;
        let g_con = contrast_grad_field(&x, &sets, config.contrast.temperature)?;
        let step = (g_bd.broadcast_mul(params.alpha[k].as_tensor())?
            + g_con.broadcast_mul(params.gamma[k].as_tensor())?)?;
        x = (x - step.broadcast_mul(params.eta[k].as_tensor())?)?;
        let probe = x.abs()?.max_all()?.to_scalar::<f64>()?;
        if !probe.is_finite() {
            return Err(Error::Divergence { layer: k + 1 });
        }
    }
    Ok(PredictionTensor::logits(x))
}

/// Elementwise x0 + xK in logit space.
pub fn aggregate(x0: &PredictionTensor, xk: &PredictionTensor) -> Result<PredictionTensor> {
    if x0.space != xk.space {
        return Err(Error::Shape("aggregate requires matching spaces".into()));
    }
    if x0.values.dims() != xk.values.dims() {
        return Err(Error::Shape(format!(
            "aggregate shape mismatch: {:?} vs {:?}",
            x0.values.dims(),
            xk.values.dims()
        )));
    }
    Ok(PredictionTensor {
        values: (&x0.values + &xk.values)?,
        space: x0.space,
    })
}

/// Pixelwise cross-entropy of logits against class labels, mean over every
/// pixel in the batch.
pub fn cross_entropy(logits: &PredictionTensor, labels: &[&Array2<u8>]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims()?;
    let one_hot = one_hot_labels(labels, c, logits.values.device())?;
    let max = logits.values.max_keepdim(1)?.detach();
    let shifted = logits.values.broadcast_sub(&max)?;
    let log_z = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_p = shifted.broadcast_sub(&log_z)?;
    let picked = (log_p * one_hot)?.sum_all()?;
    Ok((picked.neg()? / (b * h * w) as f64)?)
}

/// Differentiable Bhattacharyya loss, mean over the batch.
pub fn bd_loss_batch(logits: &Tensor, one_hot: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (b, _, h, w) = logits.dims4()?;
    let n = (h * w) as f64;
    let py = (one_hot / n)?;
    let px = probability_table(logits, epsilon)?;
    let bc = (px.sqrt()? * py.sqrt()?)?
        .sum_keepdim(1)?
        .sum_keepdim(2)?
        .sum_keepdim(3)?;
    Ok((bc.log()?.neg()?.sum_all()? / b as f64)?)
}

/// Differentiable grouped-InfoNCE loss: per image the mean over contributing
/// anchors (images with none contribute 0), then the mean over the batch.
pub fn infonce_loss_batch(
    logits: &Tensor,
    sets: &[Vec<ContrastIndices>],
    temperature: f64,
) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let n = h * w;
    let device = logits.device();
    let mut total = Tensor::zeros((), DType::F64, device)?;
    for (i, image_sets) in sets.iter().enumerate() {
        if image_sets.is_empty() {
            continue;
        }
        let flat = logits.get(i)?.reshape((c, n))?.t()?.contiguous()?;
        let mut image_loss = Tensor::zeros((), DType::F64, device)?;
        for set in image_sets {
            let idx = |ids: &[usize]| -> Result<Tensor> {
                let ids: Vec<u32> = ids.iter().map(|&v| v as u32).collect();
                let len = ids.len();
                Ok(Tensor::from_vec(ids, (len,), device)?)
            };
            let anchor = flat.index_select(&idx(&[set.anchor])?, 0)?;
            let pos = flat.index_select(&idx(&set.positives)?, 0)?;
            let all_ids: Vec<usize> = set
                .positives
                .iter()
                .chain(set.negatives.iter())
                .copied()
                .collect();
            let all = flat.index_select(&idx(&all_ids)?, 0)?;
            let lse = |scores: &Tensor| -> Result<Tensor> {
                let max = scores.max_keepdim(0)?.detach();
                let s = scores.broadcast_sub(&max)?.exp()?.sum_keepdim(0)?.log()?;
                Ok(s.broadcast_add(&max)?.squeeze(1)?.squeeze(0)?)
            };
            let scores_all = (all.matmul(&anchor.t()?)? / temperature)?;
            let scores_pos = (pos.matmul(&anchor.t()?)? / temperature)?;
            image_loss = (image_loss + (lse(&scores_all)? - lse(&scores_pos)?)?)?;
        }
        total = (total + (image_loss / image_sets.len() as f64)?)?;
    }
    Ok((total / b as f64)?)
}

/// Eq-style total loss with fixed scalar regularizer weights:
/// L_CE + alpha * L_BD + gamma * L_con.
pub fn vanilla_regularized_loss(
    x0: &PredictionTensor,
    labels: &[&Array2<u8>],
    alpha0: f64,
    gamma0: f64,
    config: &RegConfig,
    seed: u64,
) -> Result<Tensor> {
    let (_, c, _, _) = x0.dims()?;
    let one_hot = one_hot_labels(labels, c, x0.values.device())?;
    let sets = batch_contrast_sets(labels, &config.contrast, seed);
    let ce = cross_entropy(x0, labels)?;
    let bd = bd_loss_batch(&x0.values, &one_hot, config.epsilon)?;
    let con = infonce_loss_batch(&x0.values, &sets, config.contrast.temperature)?;
    Ok((ce + (bd * alpha0)? + (con * gamma0)?)?)
}

// ---------------------------------------------------------------------------
// Optimizer and training step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient. Moment tensors are
/// owned here so checkpoints can restore updates bitwise.
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig, vars: &[&Var]) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|v| {
                Ok((
                    Tensor::zeros(v.shape(), DType::F64, v.device())?,
                    Tensor::zeros(v.shape(), DType::F64, v.device())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            step_count: 0,
            moments,
        })
    }

    /// Applies one update to every var; vars must be passed in the order
    /// used at construction.
    pub fn step(&mut self, vars: &[&Var], grads: &GradStore) -> Result<()> {
        if vars.len() != self.moments.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                vars.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (var, (m, v)) in vars.iter().zip(self.moments.iter_mut()) {
            let p = var.as_tensor();
            let grad = match grads.get(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.shape(), DType::F64, p.device())?,
            };
            let grad = (grad + (p * c.weight_decay)?)?;
            *m = ((&*m * c.beta1)? + (&grad * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (grad.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat * c.learning_rate)?.div(&(v_hat.sqrt()? + c.epsilon)?)?;
            var.set(&p.sub(&update)?)?;
        }
        Ok(())
    }

    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    pub fn set_moments(&mut self, moments: Vec<(Tensor, Tensor)>, step_count: u64) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::Checkpoint("moment count mismatch".into()));
        }
        self.moments = moments;
        self.step_count = step_count;
        Ok(())
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// Plain cross-entropy.
    CeOnly,
    /// Cross-entropy plus fixed-weight regularizers.
    Vanilla { alpha: f64, gamma: f64 },
    /// Cross-entropy on x0 + xK through the K-layer unroll.
    Unfolded,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub reg: RegConfig,
    pub adam: AdamConfig,
    /// Initial values for the learnable per-layer coefficients.
    pub alpha0: f64,
    pub gamma0: f64,
    pub eta0: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Unfolded,
            reg: RegConfig::default(),
            adam: AdamConfig::default(),
            alpha0: DEFAULT_ALPHA0,
            gamma0: DEFAULT_GAMMA0,
            eta0: DEFAULT_ETA0,
        }
    }
}

/// Everything that evolves during training.
pub struct TrainState {
    pub model: SegModel,
    pub unfold: UnfoldParams,
    pub optimizer: Adam,
    pub epoch: u64,
    pub step: u64,
    pub base_seed: u64,
}

impl TrainState {
    /// Builds a fresh state. `k` is the unroll depth; the optimizer covers
    /// the unfold coefficients only when the loss mode unfolds.
    pub fn new(model: SegModel, k: usize, config: &TrainConfig, base_seed: u64) -> Result<Self> {
        let device = model.device().clone();
        let unfold = UnfoldParams::init(k, config.alpha0, config.gamma0, config.eta0, &device)?;
        let optimizer = {
            let vars = trainable_vars(&model, &unfold, config.loss_mode);
            Adam::new(config.adam, &vars)?
        };
        Ok(Self {
            model,
            unfold,
            optimizer,
            epoch: 0,
            step: 0,
            base_seed,
        })
    }
}

fn trainable_vars<'a>(
    model: &'a SegModel,
    unfold: &'a UnfoldParams,
    mode: LossMode,
) -> Vec<&'a Var> {
    let mut vars: Vec<&Var> = model.named_vars().into_iter().map(|(_, v)| v).collect();
    if mode == LossMode::Unfolded {
        vars.extend(unfold.named_vars().into_iter().map(|(_, v)| v));
    }
    vars
}

/// Builds the training loss for one batch without touching the optimizer.
pub fn batch_loss(
    batch: &[&LsmWindow],
    state: &TrainState,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<Tensor> {
    let x0 = state.model.predict(batch)?;
    let labels: Vec<&Array2<u8>> = batch.iter().map(|w| &w.label).collect();
    match config.loss_mode {
        LossMode::CeOnly => cross_entropy(&x0, &labels),
        LossMode::Vanilla { alpha, gamma } => {
            vanilla_regularized_loss(&x0, &labels, alpha, gamma, &config.reg, step_seed)
        }
        LossMode::Unfolded => {
            if state.unfold.k() == 0 {
                // an inert unroll trains exactly like the CE baseline
                return cross_entropy(&x0, &labels);
            }
            let xk = unroll(&x0, &labels, &state.unfold, &config.reg, step_seed)?;
            let x = aggregate(&x0, &xk)?;
            cross_entropy(&x, &labels)
        }
    }
}

/// One optimization step: forward, unroll, loss, backprop through the whole
/// unrolled graph, and one Adam update over weights and coefficients.
/// Returns the scalar loss.
pub fn train_step(
    batch: &[&LsmWindow],
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let step_seed = mix_seed(state.base_seed, state.step);
    let loss = batch_loss(batch, state, config, step_seed)?;
    let loss_value = loss.to_scalar::<f64>()?;
    if !loss_value.is_finite() {
        let (alpha, gamma, eta) = state.unfold.values()?;
        return Err(Error::TrainingDivergence(format!(
            "non-finite loss {loss_value} at step {} (alpha={alpha:?} gamma={gamma:?} eta={eta:?})",
            state.step
        )));
    }
    let grads = loss.backward()?;
    let vars = trainable_vars(&state.model, &state.unfold, config.loss_mode);
    state.optimizer.step(&vars, &grads)?;
    state.step += 1;
    Ok(loss_value)
}
