//! Temporal window construction, global shuffling, and on-disk dataset I/O.
//!
//! A [`FrameSequence`] is one contiguous drive. [`build_windows`] turns it
//! into per-anchor training units carrying the instant / integral /
//! derivative channel triple, and [`gsm_shuffle`] produces the seeded global
//! permutation used to batch windows across sequences.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// One contiguous drive: co-registered frames plus per-frame label maps.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub sequence_id: String,
    /// H x W x 3 images, pixel values in [0, 1].
    pub frames: Vec<Array3<f32>>,
    /// H x W class-index maps, values in [0, C).
    pub labels: Vec<Array2<u8>>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks the structural invariants: equal frame/label counts, one shared
    /// spatial shape, and label values below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let fail = |reason: String| Error::Ingestion {
            sequence: self.sequence_id.clone(),
            reason,
        };
        if self.frames.is_empty() {
            return Err(fail("sequence contains no frames".into()));
        }
        if self.frames.len() != self.labels.len() {
            return Err(fail(format!(
                "{} frames but {} labels",
                self.frames.len(),
                self.labels.len()
            )));
        }
        let (h, w, c) = self.frames[0].dim();
        if c != 3 {
            return Err(fail(format!("expected 3 image channels, got {c}")));
        }
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.dim() != (h, w, c) {
                return Err(fail(format!(
                    "frame {i} has shape {:?}, expected {:?}",
                    frame.dim(),
                    (h, w, c)
                )));
            }
        }
        for (i, label) in self.labels.iter().enumerate() {
            if label.dim() != (h, w) {
                return Err(fail(format!(
                    "label {i} has shape {:?}, expected {:?}",
                    label.dim(),
                    (h, w)
                )));
            }
            if let Some(&bad) = label.iter().find(|&&v| v as usize >= num_classes) {
                return Err(fail(format!(
                    "label {i} contains class {bad}, valid range is [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        let (h, w, _) = self.frames[0].dim();
        (h, w)
    }
}

/// One training unit: the channel triple anchored at frame `anchor_index`.
///
/// `intu` is the per-pixel mean of the `depth` frames preceding the anchor
/// and `du = insu - intu`, so a static scene yields `du == 0` everywhere.
#[derive(Debug, Clone)]
pub struct LsmWindow {
    pub anchor_index: usize,
    pub insu: Array3<f32>,
    pub intu: Array3<f32>,
    pub du: Array3<f32>,
    pub label: Array2<u8>,
    pub depth: usize,
}

impl LsmWindow {
    pub fn spatial_dims(&self) -> (usize, usize) {
        let (h, w, _) = self.insu.dim();
        (h, w)
    }
}

/// Builds all fully-historied windows of `seq`: anchors d, d+1, ..., L-1.
pub fn build_windows(seq: &FrameSequence, depth: usize) -> Result<Vec<LsmWindow>> {
    if depth < 1 {
        return Err(Error::InvalidDepth(depth));
    }
    if seq.len() <= depth {
        return Err(Error::SequenceTooShort {
            sequence: seq.sequence_id.clone(),
            length: seq.len(),
            depth,
        });
    }
    let mut windows = Vec::with_capacity(seq.len() - depth);
    for t in depth..seq.len() {
        let insu = seq.frames[t].clone();
        let mut intu = Array3::<f32>::zeros(insu.dim());
        for past in &seq.frames[t - depth..t] {
            intu += past;
        }
        intu /= depth as f32;
        let du = &insu - &intu;
        windows.push(LsmWindow {
            anchor_index: t,
            insu,
            intu,
            du,
            label: seq.labels[t].clone(),
            depth,
        });
    }
    Ok(windows)
}

/// Builds windows for every sequence and concatenates them in manifest order.
/// This concatenation order is what "sequence-then-anchor" iteration means
/// for the non-shuffled baseline.
pub fn build_all_windows(seqs: &[FrameSequence], depth: usize) -> Result<Vec<LsmWindow>> {
    let mut all = Vec::new();
    for seq in seqs {
        all.extend(build_windows(seq, depth)?);
    }
    Ok(all)
}

/// A deterministic epoch permutation over the global window pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShufflePlan {
    pub base_seed: u64,
    pub epoch: u64,
    pub order: Vec<usize>,
    pub batch_size: usize,
}

fn epoch_rng(base_seed: u64, epoch: u64) -> ChaCha20Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&base_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&epoch.to_le_bytes());
    seed[16..24].copy_from_slice(&(base_seed ^ 0x9e37_79b9_7f4a_7c15).to_le_bytes());
    ChaCha20Rng::from_seed(seed)
}

/// Seeded global permutation of the window pool; identical
/// `(base_seed, epoch)` pairs always yield identical orders.
pub fn gsm_shuffle(
    n_windows: usize,
    base_seed: u64,
    epoch: u64,
    batch_size: usize,
) -> Result<ShufflePlan> {
    if n_windows < 1 {
        return Err(Error::EmptyPool);
    }
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n_windows).collect();
    order.shuffle(&mut epoch_rng(base_seed, epoch));
    Ok(ShufflePlan {
        base_seed,
        epoch,
        order,
        batch_size,
    })
}

/// The GSM-free baseline: windows in sequence-then-anchor order, i.e. the
/// identity permutation over the concatenated pool.
pub fn sequential_plan(n_windows: usize, batch_size: usize) -> Result<ShufflePlan> {
    if n_windows < 1 {
        return Err(Error::EmptyPool);
    }
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(ShufflePlan {
        base_seed: 0,
        epoch: 0,
        order: (0..n_windows).collect(),
        batch_size,
    })
}

/// Yields ceil(N / B) mini-batches of window indices following `plan.order`;
/// only the final batch may be short.
pub fn make_batches<'a>(
    plan: &'a ShufflePlan,
    windows: &'a [LsmWindow],
) -> Result<impl Iterator<Item = Vec<&'a LsmWindow>>> {
    if plan.order.len() != windows.len() {
        return Err(Error::PlanMismatch {
            plan: plan.order.len(),
            windows: windows.len(),
        });
    }
    Ok(plan
        .order
        .chunks(plan.batch_size)
        .map(move |chunk| chunk.iter().map(|&i| &windows[i]).collect()))
}

// ---------------------------------------------------------------------------
// Disk format
//
// One directory per sequence with frames/0000.png ... and labels/0000.png
// (labels single-channel, pixel value = class index). A manifest lists one
// relative sequence path per line; '#' starts a comment.
// ---------------------------------------------------------------------------

fn read_manifest(manifest: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn numbered_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    files.sort();
    Ok(files)
}

fn decode_frame(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn decode_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    Ok(out)
}

/// Loads every sequence listed in `manifest` (paths relative to `root`) and
/// validates the FrameSequence invariants against `num_classes`.
pub fn ingest_dataset(
    root: &Path,
    manifest: &Path,
    num_classes: usize,
) -> Result<Vec<FrameSequence>> {
    let mut sequences = Vec::new();
    for rel in read_manifest(manifest)? {
        let dir = root.join(&rel);
        let frame_files = numbered_pngs(&dir.join("frames")).map_err(|e| Error::Ingestion {
            sequence: rel.clone(),
            reason: e.to_string(),
        })?;
        let label_files = numbered_pngs(&dir.join("labels")).map_err(|e| Error::Ingestion {
            sequence: rel.clone(),
            reason: e.to_string(),
        })?;
        if frame_files.len() != label_files.len() {
            return Err(Error::Ingestion {
                sequence: rel.clone(),
                reason: format!(
                    "{} frames but {} labels on disk",
                    frame_files.len(),
                    label_files.len()
                ),
            });
        }
        let frames = frame_files
            .iter()
            .map(|p| decode_frame(p))
            .collect::<Result<Vec<_>>>()?;
        let labels = label_files
            .iter()
            .map(|p| decode_label(p))
            .collect::<Result<Vec<_>>>()?;
        let seq = FrameSequence {
            sequence_id: rel,
            frames,
            labels,
        };
        seq.validate(num_classes)?;
        sequences.push(seq);
    }
    Ok(sequences)
}

/// Writes one sequence in the on-disk layout under `dir`. Frame values are
/// quantized to the 8-bit grid, so the ingestion round-trip is exact for
/// frames already on that grid.
pub fn write_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    let frames_dir = dir.join("frames");
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let (h, w, _) = frame.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = frame[[y as usize, x as usize, c]].clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        let path = frames_dir.join(format!("{i:04}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path,
            source: e,
        })?;
    }
    for (i, label) in seq.labels.iter().enumerate() {
        let (h, w) = label.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0[0] = label[[y as usize, x as usize]];
        }
        let path = labels_dir.join(format!("{i:04}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path,
            source: e,
        })?;
    }
    Ok(())
}

/// Writes a manifest listing the given relative sequence paths.
pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# one relative sequence directory per line").map_err(|e| Error::io(path, e))?;
    for entry in entries {
        writeln!(file, "{entry}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
