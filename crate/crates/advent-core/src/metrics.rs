//! Confusion-matrix accumulation and the four class-averaged metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::PredictionTensor;

/// C x C counts: `counts[gt][pred]` pixels with ground truth `gt` predicted
/// as `pred`. Supports elementwise merge so accumulation can be sharded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one predicted class map against its label map.
    pub fn accumulate_maps(&mut self, pred: &Array2<u8>, labels: &Array2<u8>) -> Result<()> {
        if pred.dim() != labels.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs labels {:?}",
                pred.dim(),
                labels.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(labels.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::Shape(format!(
                    "class {} out of range [0, {})",
                    p.max(g),
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Reduces a prediction tensor by per-pixel argmax (ties toward the
    /// lowest class index) and accumulates every image in the batch.
    pub fn accumulate(
        &mut self,
        prediction: &PredictionTensor,
        labels: &[Array2<u8>],
    ) -> Result<()> {
        let maps = prediction.argmax_maps()?;
        if maps.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} label maps",
                maps.len(),
                labels.len()
            )));
        }
        for (map, label) in maps.iter().zip(labels) {
            self.accumulate_maps(map, label)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::Shape("class counts differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// The four metrics, macro-averaged over classes observed in ground
    /// truth or prediction. Zero-denominator per-class ratios score 0.
    pub fn compute_metrics(&self) -> Result<MetricRecord> {
        if self.total() == 0 {
            return Err(Error::NoData);
        }
        let c = self.num_classes;
        let mut sums = MetricRecord::default();
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.count(k, k) as f64;
            let fp: f64 = (0..c)
                .filter(|&g| g != k)
                .map(|g| self.count(g, k) as f64)
                .sum();
            let fn_: f64 = (0..c)
                .filter(|&p| p != k)
                .map(|p| self.count(k, p) as f64)
                .sum();
            if tp + fp + fn_ == 0.0 {
                continue; // class absent from both GT and prediction
            }
            present += 1;
            let iou = tp / (tp + fp + fn_);
            let pre = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if pre + rec > 0.0 {
                2.0 * pre * rec / (pre + rec)
            } else {
                0.0
            };
            sums.miou += iou;
            sums.mpre += pre;
            sums.mrec += rec;
            sums.mf1 += f1;
        }
        let n = present as f64;
        Ok(MetricRecord {
            miou: sums.miou / n,
            mpre: sums.mpre / n,
            mrec: sums.mrec / n,
            mf1: sums.mf1 / n,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub miou: f64,
    pub mpre: f64,
    pub mrec: f64,
    pub mf1: f64,
}

impl std::fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "miou={:.6} mpre={:.6} mrec={:.6} mf1={:.6}",
            self.miou, self.mpre, self.mrec, self.mf1
        )
    }
}
