//! The two prediction regularizers with their closed-form gradients.
//!
//! Both are pure functions: the Bhattacharyya-distance loss over flat
//! (pixel, class) probability tables, and the grouped InfoNCE contrastive
//! loss over pixel embeddings. The gradients returned here are the exact
//! descent directions consumed by the unroll, and are validated against
//! central finite differences in the test suite.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// A flat probability table over (pixel, class) entries.
#[derive(Debug, Clone)]
pub struct ImageDistribution {
    pub p: Vec<f64>,
    pub epsilon: f64,
}

impl ImageDistribution {
    /// Clamps entries to the epsilon floor and renormalizes, so the table is
    /// a genuine distribution with no exact zeros. Use this for predictions.
    pub fn new(values: Vec<f64>, epsilon: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty distribution".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Shape(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let mut p: Vec<f64> = values.iter().map(|&v| v.max(epsilon)).collect();
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v = (*v / sum).max(epsilon);
        }
        Ok(Self { p, epsilon })
    }

    /// Builds the target table: one-hot class labels divided by the pixel
    /// count. Zero entries stay exactly zero so the Bhattacharyya gradient
    /// vanishes there.
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Shape("empty label list".into()));
        }
        let n = labels.len() as f64;
        let mut p = vec![0.0; labels.len() * num_classes];
        for (pixel, &class) in labels.iter().enumerate() {
            if class >= num_classes {
                return Err(Error::Shape(format!(
                    "label {class} out of range [0, {num_classes})"
                )));
            }
            p[pixel * num_classes + class] = 1.0 / n;
        }
        Ok(Self {
            p,
            epsilon: DEFAULT_EPSILON,
        })
    }

    /// Builds the prediction table from per-pixel logits: softmax over the
    /// class axis, divided by the pixel count.
    pub fn from_logits(logits: &Array3<f64>, epsilon: f64) -> Result<Self> {
        let (h, w, c) = logits.dim();
        let n = (h * w) as f64;
        let mut values = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let row: Vec<f64> = (0..c).map(|k| logits[[y, x, k]]).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                values.extend(exps.iter().map(|e| e / sum / n));
            }
        }
        Self::new(values, epsilon)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

fn bhattacharyya_coefficient(px: &ImageDistribution, py: &ImageDistribution) -> Result<f64> {
    if px.len() != py.len() {
        return Err(Error::Shape(format!(
            "distribution lengths differ: {} vs {}",
            px.len(),
            py.len()
        )));
    }
    Ok(px
        .p
        .iter()
        .zip(&py.p)
        .map(|(&a, &b)| (a * b).sqrt())
        .sum())
}

/// Bhattacharyya distance -ln(sum_x sqrt(P_X(x) P_Y(x))).
pub fn bd_loss(px: &ImageDistribution, py: &ImageDistribution) -> Result<f64> {
    Ok(-bhattacharyya_coefficient(px, py)?.ln())
}

/// Closed-form gradient of [`bd_loss`] with respect to each P_X entry:
/// -(1/2) (1/BC) sqrt(P_Y(x)) / sqrt(P_X(x)), exactly zero where P_Y(x) = 0.
pub fn bd_grad(px: &ImageDistribution, py: &ImageDistribution) -> Result<Vec<f64>> {
    let bc = bhattacharyya_coefficient(px, py)?;
    px.p
        .iter()
        .zip(&py.p)
        .map(|(&p, &q)| {
            if q == 0.0 {
                Ok(0.0)
            } else if p < px.epsilon {
                Err(Error::Shape(format!(
                    "P_X entry {p} below clamp floor {}",
                    px.epsilon
                )))
            } else {
                Ok(-0.5 / bc * q.sqrt() / p.sqrt())
            }
        })
        .collect()
}

/// One anchor with its same-class and different-class embedding sets.
#[derive(Debug, Clone)]
pub struct ContrastSample {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub temperature: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_sample(sample: &ContrastSample) -> Result<()> {
    if sample.positives.is_empty() {
        return Err(Error::Config(
            "contrast sample needs at least one positive; skip such anchors".into(),
        ));
    }
    if sample.temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    Ok(())
}

/// Grouped InfoNCE: -log(A / B) with A summing positive-pair similarities
/// and B adding the negative-pair similarities. Computed via shifted
/// log-sum-exp so large similarity/temperature ratios stay finite.
pub fn infonce_loss(sample: &ContrastSample) -> Result<f64> {
    check_sample(sample)?;
    let tau = sample.temperature;
    let pos: Vec<f64> = sample
        .positives
        .iter()
        .map(|u| dot(&sample.anchor, u) / tau)
        .collect();
    let mut all = pos.clone();
    all.extend(
        sample
            .negatives
            .iter()
            .map(|v| dot(&sample.anchor, v) / tau),
    );
    Ok(log_sum_exp(&all) - log_sum_exp(&pos))
}

/// Closed-form gradient of [`infonce_loss`] with respect to the anchor:
/// grad_x B / B - grad_x A / A, with grad A = (1/tau) sum exp(sigma/tau) u
/// over positives and grad B adding the same sum over negatives.
pub fn infonce_grad(sample: &ContrastSample) -> Result<Vec<f64>> {
    check_sample(sample)?;
    let tau = sample.temperature;
    let dim = sample.anchor.len();
    let embeddings: Vec<&Vec<f64>> = sample
        .positives
        .iter()
        .chain(sample.negatives.iter())
        .collect();
    let scores: Vec<f64> = embeddings
        .iter()
        .map(|e| dot(&sample.anchor, e) / tau)
        .collect();
    let n_pos = sample.positives.len();

    // grad ln A = (1/tau) sum softmax_pos(m) u_m, likewise for ln B over all.
    let softmax = |scores: &[f64]| -> Vec<f64> {
        let lse = log_sum_exp(scores);
        scores.iter().map(|s| (s - lse).exp()).collect()
    };
    let w_all = softmax(&scores);
    let w_pos = softmax(&scores[..n_pos]);

    let mut grad = vec![0.0; dim];
    for (w, e) in w_all.iter().zip(&embeddings) {
        for (g, &v) in grad.iter_mut().zip(e.iter()) {
            *g += w * v / tau;
        }
    }
    for (w, e) in w_pos.iter().zip(&embeddings[..n_pos]) {
        for (g, &v) in grad.iter_mut().zip(e.iter()) {
            *g -= w * v / tau;
        }
    }
    Ok(grad)
}

/// Sampling caps and temperature for contrastive set construction.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub max_anchors: usize,
    pub max_positives: usize,
    pub max_negatives: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            max_anchors: 16,
            max_positives: 32,
            max_negatives: 32,
        }
    }
}

/// Index-level contrast sets: flat pixel indices into an H*W image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastIndices {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Draws anchor/positive/negative pixel index sets from a label map.
///
/// Anchors whose class has fewer than 2 pixels, or for which no other class
/// exists in the image, are skipped; a single-class image yields an empty
/// list. Deterministic given the seed.
pub fn sample_contrast_indices(
    labels: &Array2<u8>,
    config: &ContrastConfig,
    seed: u64,
) -> Vec<ContrastIndices> {
    let flat: Vec<u8> = labels.iter().copied().collect();
    let mut by_class: std::collections::BTreeMap<u8, Vec<usize>> = Default::default();
    for (i, &c) in flat.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut eligible: Vec<usize> = flat
        .iter()
        .enumerate()
        .filter(|(_, c)| by_class[c].len() >= 2)
        .map(|(i, _)| i)
        .collect();
    eligible.shuffle(&mut rng);
    eligible.truncate(config.max_anchors);

    let mut samples = Vec::with_capacity(eligible.len());
    for anchor in eligible {
        let class = flat[anchor];
        let mut positives: Vec<usize> = by_class[&class]
            .iter()
            .copied()
            .filter(|&i| i != anchor)
            .collect();
        positives.shuffle(&mut rng);
        positives.truncate(config.max_positives);
        let mut negatives: Vec<usize> = by_class
            .iter()
            .filter(|(&c, _)| c != class)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        negatives.shuffle(&mut rng);
        negatives.truncate(config.max_negatives);
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        samples.push(ContrastIndices {
            anchor,
            positives,
            negatives,
        });
    }
    samples
}

/// Materializes [`ContrastSample`]s from per-pixel logit embeddings
/// (H x W x C) and the aligned label map.
pub fn sample_contrast_sets(
    logits: &Array3<f64>,
    labels: &Array2<u8>,
    config: &ContrastConfig,
    seed: u64,
) -> Result<Vec<ContrastSample>> {
    let (h, w, _) = logits.dim();
    if labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "labels {:?} not aligned with logits {:?}",
            labels.dim(),
            logits.dim()
        )));
    }
    let embed = |flat: usize| -> Vec<f64> {
        let (y, x) = (flat / w, flat % w);
        logits.slice(ndarray::s![y, x, ..]).to_vec()
    };
    Ok(sample_contrast_indices(labels, config, seed)
        .into_iter()
        .map(|idx| ContrastSample {
            anchor: embed(idx.anchor),
            positives: idx.positives.iter().map(|&i| embed(i)).collect(),
            negatives: idx.negatives.iter().map(|&i| embed(i)).collect(),
            temperature: config.temperature,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bd_of_identical_distributions_is_zero() {
        let p = ImageDistribution::new(vec![0.1, 0.2, 0.3, 0.4], DEFAULT_EPSILON).unwrap();
        assert!(bd_loss(&p, &p).unwrap().abs() < 1e-9);
    }

    #[test]
    fn bd_of_disjoint_support_is_large_but_finite() {
        let px = ImageDistribution::new(vec![1.0, 0.0], DEFAULT_EPSILON).unwrap();
        let py = ImageDistribution::new(vec![0.0, 1.0], DEFAULT_EPSILON).unwrap();
        let loss = bd_loss(&px, &py).unwrap();
        assert!(loss > 5.0 && loss.is_finite());
        // bounded by the clamp: BC >= 2 * sqrt(epsilon), up to renormalization
        assert!(loss <= -(2.0 * DEFAULT_EPSILON.sqrt()).ln() + 1e-6);
    }

    #[test]
    fn bd_hand_value() {
        let px = ImageDistribution::new(vec![0.5, 0.5], DEFAULT_EPSILON).unwrap();
        let py = ImageDistribution::new(vec![0.9, 0.1], DEFAULT_EPSILON).unwrap();
        let expected = -(0.45f64.sqrt() + 0.05f64.sqrt()).ln();
        assert!((bd_loss(&px, &py).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1116).abs() < 5e-4);
    }

    #[test]
    fn bd_grad_uniform_two_entries() {
        let p = ImageDistribution::new(vec![0.5, 0.5], DEFAULT_EPSILON).unwrap();
        let grad = bd_grad(&p, &p).unwrap();
        for g in grad {
            assert!((g + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bd_grad_zero_target_entries_are_exactly_zero() {
        let px = ImageDistribution::new(vec![0.25; 4], DEFAULT_EPSILON).unwrap();
        let py = ImageDistribution::one_hot(&[1, 1], 2).unwrap();
        let grad = bd_grad(&px, &py).unwrap();
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[2], 0.0);
        assert!(grad[1] < 0.0 && grad[3] < 0.0);
    }

    #[test]
    fn bd_length_mismatch() {
        let px = ImageDistribution::new(vec![0.5, 0.5], DEFAULT_EPSILON).unwrap();
        let py = ImageDistribution::new(vec![1.0], DEFAULT_EPSILON).unwrap();
        assert!(matches!(bd_loss(&px, &py), Err(Error::Shape(_))));
    }

    fn sample_with_scores(pos: &[f64], neg: &[f64], tau: f64) -> ContrastSample {
        // anchor [1, 0]: embeddings [s, 0] give sigma(x, e) = s exactly.
        ContrastSample {
            anchor: vec![1.0, 0.0],
            positives: pos.iter().map(|&s| vec![s, 0.0]).collect(),
            negatives: neg.iter().map(|&s| vec![s, 0.0]).collect(),
            temperature: tau,
        }
    }

    #[test]
    fn infonce_no_negatives_is_zero() {
        let s = sample_with_scores(&[0.3, -0.2], &[], 0.1);
        assert_eq!(infonce_loss(&s).unwrap(), 0.0);
        assert!(infonce_grad(&s).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn infonce_symmetric_pair_is_ln2() {
        let s = sample_with_scores(&[0.7], &[0.7], 0.1);
        assert!((infonce_loss(&s).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_grad_cancels_for_identical_pos_neg() {
        let s = ContrastSample {
            anchor: vec![0.3, -0.4, 1.1],
            positives: vec![vec![0.2, 0.5, -0.1]],
            negatives: vec![vec![0.2, 0.5, -0.1]],
            temperature: 0.1,
        };
        for g in infonce_grad(&s).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_empty_positives_is_contract_error() {
        let s = sample_with_scores(&[], &[0.1], 0.1);
        assert!(matches!(infonce_loss(&s), Err(Error::Config(_))));
        assert!(matches!(infonce_grad(&s), Err(Error::Config(_))));
    }

    #[test]
    fn infonce_large_temperature_limit() {
        let s = sample_with_scores(&[0.9, 0.1, -0.4], &[0.2, 0.7, -0.9, 0.0], 1e6);
        let expected = (7.0f64 / 3.0).ln();
        assert!((infonce_loss(&s).unwrap() - expected).abs() < 1e-4);
    }

    #[test]
    fn infonce_is_stable_for_sharp_temperatures() {
        let s = sample_with_scores(&[40.0], &[35.0], 0.01);
        let loss = infonce_loss(&s).unwrap();
        assert!(loss.is_finite());
        assert!(infonce_grad(&s).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn single_class_image_yields_no_samples() {
        let labels = Array2::<u8>::zeros((4, 4));
        let samples = sample_contrast_indices(&labels, &ContrastConfig::default(), 0);
        assert!(samples.is_empty());
    }

    #[test]
    fn checkerboard_yields_full_anchor_budget() {
        let labels = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8);
        let config = ContrastConfig {
            max_anchors: 4,
            ..Default::default()
        };
        let samples = sample_contrast_indices(&labels, &config, 9);
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert!(!s.positives.is_empty());
            assert!(!s.negatives.is_empty());
        }
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let labels = Array2::from_shape_fn((6, 6), |(y, x)| ((y * 7 + x * 3) % 3) as u8);
        let config = ContrastConfig::default();
        let a = sample_contrast_indices(&labels, &config, 1234);
        let b = sample_contrast_indices(&labels, &config, 1234);
        assert_eq!(a, b);
    }
}
