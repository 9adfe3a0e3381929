//! Backbone/head networks mapping an LSM window to per-pixel class logits.
//!
//! Two fusion policies are supported: CE concatenates the three unit
//! channels and runs one shared backbone; FI runs three separate backbones
//! and mixes their feature maps with a learned 1x1 layer before the head.
//! The default backbone is a small strided convolutional encoder with a
//! bilinear-upsampling head, so desk-scale training finishes in minutes.
//! Everything runs in f64 on CPU and is deterministic given the init seed.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::LsmWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionPolicy {
    Ce,
    Fi,
}

impl std::fmt::Display for FusionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionPolicy::Ce => write!(f, "CE"),
            FusionPolicy::Fi => write!(f, "FI"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub policy: Option<FusionPolicy>,
    pub num_classes: usize,
    pub backbone_width: usize,
    /// Number of stride-2 encoder stages; total stride is 2^backbone_depth.
    pub backbone_depth: usize,
    /// Channels per unit (insu / intu / du), 3 for RGB.
    pub input_channels: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            policy: Some(FusionPolicy::Fi),
            num_classes: 8,
            backbone_width: 16,
            backbone_depth: 2,
            input_channels: 3,
        }
    }
}

impl NetworkSpec {
    pub fn stride_product(&self) -> usize {
        1 << self.backbone_depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.backbone_width < 1 || self.backbone_depth < 1 {
            return Err(Error::Config(
                "backbone width and depth must be >= 1".into(),
            ));
        }
        if self.input_channels < 1 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate_resolution(&self, h: usize, w: usize) -> Result<()> {
        let s = self.stride_product();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by encoder stride product {s}; \
                 resize the data or reduce backbone_depth"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Logit,
    Probability,
}

/// Per-pixel, per-class scores for a batch of windows, shape (B, C, H, W).
#[derive(Debug, Clone)]
pub struct PredictionTensor {
    pub values: Tensor,
    pub space: Space,
}

impl PredictionTensor {
    pub fn logits(values: Tensor) -> Self {
        Self {
            values,
            space: Space::Logit,
        }
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.values.dims4()?)
    }

    /// Per-pixel softmax over the class axis.
    pub fn to_probability(&self) -> Result<PredictionTensor> {
        let values = match self.space {
            Space::Probability => self.values.clone(),
            Space::Logit => softmax_classes(&self.values)?,
        };
        Ok(PredictionTensor {
            values,
            space: Space::Probability,
        })
    }

    /// Per-pixel argmax class maps; ties break toward the lowest class index.
    pub fn argmax_maps(&self) -> Result<Vec<Array2<u8>>> {
        let (b, c, h, w) = self.dims()?;
        let data = self.values.flatten_all()?.to_vec1::<f64>()?;
        let mut maps = Vec::with_capacity(b);
        for i in 0..b {
            let mut map = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let mut best = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for k in 0..c {
                        let v = data[((i * c + k) * h + y) * w + x];
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    map[[y, x]] = best as u8;
                }
            }
            maps.push(map);
        }
        Ok(maps)
    }

    /// Extracts one image as an H x W x C array, for the pure-function
    /// regularizer path and tests.
    pub fn image_logits(&self, index: usize) -> Result<Array3<f64>> {
        let (_, c, h, w) = self.dims()?;
        let img = self.values.get(index)?; // (C, H, W)
        let data = img.flatten_all()?.to_vec1::<f64>()?;
        Ok(Array3::from_shape_fn((h, w, c), |(y, x, k)| {
            data[(k * h + y) * w + x]
        }))
    }
}

/// Numerically stable per-pixel softmax over dim 1 of a (B, C, H, W) tensor.
pub fn softmax_classes(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let exp = logits.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(1)?;
    Ok(exp.broadcast_div(&sum)?)
}

struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    fn init(
        rng: &mut ChaCha20Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        device: &Device,
    ) -> Result<Self> {
        // Kaiming-uniform fan-in init.
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_ch * in_ch * kernel * kernel;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = Var::from_tensor(&Tensor::from_vec(
            data,
            (out_ch, in_ch, kernel, kernel),
            device,
        )?)?;
        let bias = Var::from_tensor(&Tensor::zeros(out_ch, DType::F64, device)?)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims4()?.0;
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out_ch, 1, 1))?)?)
    }

    fn vars(&self) -> [&Var; 2] {
        [&self.weight, &self.bias]
    }
}

/// The segmentation model for one fusion policy.
pub struct SegModel {
    pub spec: NetworkSpec,
    policy: FusionPolicy,
    encoders: Vec<Vec<Conv2d>>,
    fuse: Option<Conv2d>,
    head: Conv2d,
    device: Device,
}

impl SegModel {
    /// Builds a model with seeded weight initialization. Fails if the spec
    /// leaves the fusion policy unset.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let policy = spec
            .policy
            .ok_or_else(|| Error::Config("fusion policy is unset; choose CE or FI".into()))?;
        let device = Device::Cpu;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let stage_width = |i: usize| spec.backbone_width << i;
        let top_width = stage_width(spec.backbone_depth - 1);

        let build_encoder = |rng: &mut ChaCha20Rng, in_ch: usize| -> Result<Vec<Conv2d>> {
            let mut stages = Vec::with_capacity(spec.backbone_depth);
            let mut ch = in_ch;
            for i in 0..spec.backbone_depth {
                stages.push(Conv2d::init(rng, ch, stage_width(i), 3, 2, &device)?);
                ch = stage_width(i);
            }
            Ok(stages)
        };

        let (encoders, fuse, head_in) = match policy {
            FusionPolicy::Ce => {
                let enc = build_encoder(&mut rng, 3 * spec.input_channels)?;
                (vec![enc], None, top_width)
            }
            FusionPolicy::Fi => {
                let encs = (0..3)
                    .map(|_| build_encoder(&mut rng, spec.input_channels))
                    .collect::<Result<Vec<_>>>()?;
                let fuse = Conv2d::init(&mut rng, 3 * top_width, top_width, 1, 1, &device)?;
                (encs, Some(fuse), top_width)
            }
        };
        let head = Conv2d::init(&mut rng, head_in, spec.num_classes, 1, 1, &device)?;
        Ok(Self {
            spec: spec.clone(),
            policy,
            encoders,
            fuse,
            head,
            device,
        })
    }

    pub fn policy(&self) -> FusionPolicy {
        self.policy
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn run_encoder(&self, encoder: &[Conv2d], x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in encoder {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(h)
    }

    fn decode(&self, features: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let logits = self.head.forward(features)?;
        bilinear_resize(&logits, out_h, out_w)
    }

    /// Channel-enhancement forward: insu || intu || du through the shared
    /// backbone, then the head.
    pub fn forward_ce(&self, windows: &[&LsmWindow]) -> Result<PredictionTensor> {
        if self.policy != FusionPolicy::Ce {
            return Err(Error::Config("model was built with the FI policy".into()));
        }
        let (h, w) = self.check_batch(windows)?;
        let input = Tensor::cat(
            &[
                unit_tensor(windows, |win| &win.insu, &self.device)?,
                unit_tensor(windows, |win| &win.intu, &self.device)?,
                unit_tensor(windows, |win| &win.du, &self.device)?,
            ],
            1,
        )?;
        let features = self.run_encoder(&self.encoders[0], &input)?;
        Ok(PredictionTensor::logits(self.decode(&features, h, w)?))
    }

    /// Feature-interaction forward: three separate backbones, channel
    /// concatenation, learned 1x1 mixing, then the head.
    pub fn forward_fi(&self, windows: &[&LsmWindow]) -> Result<PredictionTensor> {
        if self.policy != FusionPolicy::Fi {
            return Err(Error::Config("model was built with the CE policy".into()));
        }
        let (h, w) = self.check_batch(windows)?;
        let units: [&dyn Fn(&LsmWindow) -> &Array3<f32>; 3] =
            [&|win| &win.insu, &|win| &win.intu, &|win| &win.du];
        let mut features = Vec::with_capacity(3);
        for (encoder, unit) in self.encoders.iter().zip(units.iter()) {
            let input = unit_tensor(windows, unit, &self.device)?;
            features.push(self.run_encoder(encoder, &input)?);
        }
        let fused = self
            .fuse
            .as_ref()
            .expect("FI model always has a fusion layer")
            .forward(&Tensor::cat(&features, 1)?)?
            .relu()?;
        Ok(PredictionTensor::logits(self.decode(&fused, h, w)?))
    }

    /// Dispatches to the configured fusion policy.
    pub fn predict(&self, windows: &[&LsmWindow]) -> Result<PredictionTensor> {
        match self.policy {
            FusionPolicy::Ce => self.forward_ce(windows),
            FusionPolicy::Fi => self.forward_fi(windows),
        }
    }

    fn check_batch(&self, windows: &[&LsmWindow]) -> Result<(usize, usize)> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Shape("empty window batch".into()))?;
        let (h, w) = first.spatial_dims();
        let c = first.insu.dim().2;
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "window has {c} channels per unit, spec declares {}",
                self.spec.input_channels
            )));
        }
        for win in windows {
            if win.spatial_dims() != (h, w) {
                return Err(Error::Shape("mixed spatial sizes in batch".into()));
            }
        }
        self.spec.validate_resolution(h, w)?;
        Ok((h, w))
    }

    /// All trainable variables in a stable order, with names.
    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        for (e, encoder) in self.encoders.iter().enumerate() {
            for (s, conv) in encoder.iter().enumerate() {
                let [w, b] = conv.vars();
                out.push((format!("enc{e}.stage{s}.weight"), w));
                out.push((format!("enc{e}.stage{s}.bias"), b));
            }
        }
        if let Some(fuse) = &self.fuse {
            let [w, b] = fuse.vars();
            out.push(("fuse.weight".into(), w));
            out.push(("fuse.bias".into(), b));
        }
        let [w, b] = self.head.vars();
        out.push(("head.weight".into(), w));
        out.push(("head.bias".into(), b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars()
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites every variable from a name -> tensor map.
    pub fn load_named(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            var.set(t)?;
        }
        Ok(())
    }
}

/// Stacks one unit across the batch into a (B, C, H, W) f64 tensor.
fn unit_tensor(
    windows: &[&LsmWindow],
    unit: impl Fn(&LsmWindow) -> &Array3<f32>,
    device: &Device,
) -> Result<Tensor> {
    let (h, w, c) = unit(windows[0]).dim();
    let mut data = Vec::with_capacity(windows.len() * c * h * w);
    for win in windows {
        let arr = unit(win);
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(arr[[y, x, k]] as f64);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (windows.len(), c, h, w), device)?)
}

/// Exact bilinear interpolation expressed as two fixed matrix products, so
/// it stays differentiable with respect to the input feature map.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, in_h, in_w) = x.dims4()?;
    if in_h == out_h && in_w == out_w {
        return Ok(x.clone());
    }
    let device = x.device();
    let a_h = bilinear_matrix(out_h, in_h, device)?; // (out_h, in_h)
    let a_w = bilinear_matrix(out_w, in_w, device)?.t()?; // (in_w, out_w)
    let y = a_h.broadcast_matmul(x)?; // (B, C, out_h, in_w)
    Ok(y.broadcast_matmul(&a_w)?) // (B, C, out_h, out_w)
}

fn bilinear_matrix(out: usize, input: usize, device: &Device) -> Result<Tensor> {
    let scale = input as f64 / out as f64;
    let mut data = vec![0.0f64; out * input];
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        data[i * input + lo] += 1.0 - frac;
        data[i * input + hi] += frac;
    }
    Ok(Tensor::from_vec(data, (out, input), device)?)
}
