//! Seeded generator of labeled driving-like frame sequences with
//! compositional weather corruptions.
//!
//! Scenes are deliberately simple: a banded background (sky / building /
//! road) plus rigid shapes moving on linear trajectories. Labels are
//! assigned from the clean render; weather is composited onto frames only,
//! so labels are invariant under any weather setting.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{write_manifest, write_sequence, FrameSequence};

/// Per-type corruption intensities, each in [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WeatherConfig {
    pub fog: f64,
    pub rain: f64,
    pub darkness: f64,
    pub noise: f64,
}

impl WeatherConfig {
    pub fn clear() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fog", self.fog),
            ("rain", self.rain),
            ("darkness", self.darkness),
            ("noise", self.noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "weather intensity '{name}' = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn is_clear(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub n_objects: usize,
    pub weather: WeatherConfig,
    pub seq_length: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 8,
            n_objects: 3,
            weather: WeatherConfig::clear(),
            seq_length: 12,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_length < 2 {
            return Err(Error::Config("seq_length must be >= 2".into()));
        }
        if self.num_classes < 2 || self.num_classes > 23 {
            return Err(Error::Config("num_classes must be in [2, 23]".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scene must be at least 8x8".into()));
        }
        self.weather.validate()
    }
}

/// Configured trajectory of one moving object, exposed for coherence tests.
#[derive(Debug, Clone)]
pub struct ObjectTrack {
    pub class: u8,
    /// (row, col) centroid at frame 0.
    pub start: (f64, f64),
    /// (rows, cols) per frame.
    pub velocity: (f64, f64),
    pub half_extent: (f64, f64),
    pub round: bool,
}

impl ObjectTrack {
    pub fn centroid_at(&self, frame: usize) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * frame as f64,
            self.start.1 + self.velocity.1 * frame as f64,
        )
    }
}

const BACKGROUND_CLASSES: usize = 3; // sky, road, building

fn class_color(class: u8, rng_tint: f32) -> [f32; 3] {
    match class {
        0 => [0.55 + 0.1 * rng_tint, 0.65, 0.85], // sky
        1 => [0.25, 0.25 + 0.05 * rng_tint, 0.28], // road
        2 => [0.55, 0.45, 0.35 + 0.1 * rng_tint], // building band
        c => {
            // object classes: distinct hues, deterministic per class
            let t = c as f32 * 0.61803;
            [
                (t.sin() * 0.5 + 0.5) * 0.8 + 0.1,
                ((t * 1.7).sin() * 0.5 + 0.5) * 0.8 + 0.1,
                ((t * 2.3).sin() * 0.5 + 0.5) * 0.8 + 0.1,
            ]
        }
    }
}

fn plan_tracks(config: &SceneConfig, rng: &mut ChaCha20Rng) -> Vec<ObjectTrack> {
    let (h, w, l) = (
        config.height as f64,
        config.width as f64,
        config.seq_length as f64,
    );
    let object_classes = (config.num_classes - BACKGROUND_CLASSES).max(1);
    let mut tracks: Vec<ObjectTrack> = Vec::new();
    for i in 0..config.n_objects {
        let class = (BACKGROUND_CLASSES + i % object_classes) as u8;
        // Retry until the whole path stays in frame and clear of other
        // objects' paths; give up on separation after 50 tries.
        let mut chosen = None;
        for attempt in 0..200 {
            let he = (
                rng.gen_range(1.5..h / 10.0 + 1.6),
                rng.gen_range(1.5..w / 10.0 + 1.6),
            );
            let margin = (he.0 + 1.0, he.1 + 1.0);
            let start = (
                rng.gen_range(margin.0..h - margin.0),
                rng.gen_range(margin.1..w - margin.1),
            );
            let velocity = (rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
            let end = (start.0 + velocity.0 * (l - 1.0), start.1 + velocity.1 * (l - 1.0));
            if end.0 < margin.0 || end.0 > h - margin.0 || end.1 < margin.1 || end.1 > w - margin.1
            {
                continue;
            }
            let track = ObjectTrack {
                class,
                start,
                velocity,
                half_extent: he,
                round: i % 2 == 0,
            };
            let separated = tracks.iter().all(|other| {
                (0..config.seq_length).all(|f| {
                    let a = track.centroid_at(f);
                    let b = other.centroid_at(f);
                    let gap_r = (a.0 - b.0).abs();
                    let gap_c = (a.1 - b.1).abs();
                    gap_r > track.half_extent.0 + other.half_extent.0 + 1.0
                        || gap_c > track.half_extent.1 + other.half_extent.1 + 1.0
                })
            });
            if separated || attempt >= 50 {
                chosen = Some(track);
                break;
            }
        }
        if let Some(track) = chosen {
            tracks.push(track);
        }
    }
    tracks
}

fn render_clean_frame(
    config: &SceneConfig,
    tracks: &[ObjectTrack],
    frame_index: usize,
    sky_end: usize,
    building_end: usize,
    tint: f32,
) -> (Array3<f32>, Array2<u8>) {
    let (h, w) = (config.height, config.width);
    let mut frame = Array3::<f32>::zeros((h, w, 3));
    let mut label = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        let class = if y < sky_end {
            0u8
        } else if y < building_end {
            2
        } else {
            1
        };
        let color = class_color(class, tint);
        for x in 0..w {
            label[[y, x]] = class;
            for c in 0..3 {
                // mild horizontal shading keeps the scene non-constant
                frame[[y, x, c]] = color[c] * (0.9 + 0.1 * (x as f32 / w as f32));
            }
        }
    }
    for track in tracks {
        let (cy, cx) = track.centroid_at(frame_index);
        let color = class_color(track.class, tint);
        let y0 = ((cy - track.half_extent.0).floor().max(0.0)) as usize;
        let y1 = ((cy + track.half_extent.0).ceil().min(h as f64 - 1.0)) as usize;
        let x0 = ((cx - track.half_extent.1).floor().max(0.0)) as usize;
        let x1 = ((cx + track.half_extent.1).ceil().min(w as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 - cy) / track.half_extent.0;
                let dx = (x as f64 - cx) / track.half_extent.1;
                let inside = if track.round {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    label[[y, x]] = track.class;
                    for c in 0..3 {
                        frame[[y, x, c]] = color[c];
                    }
                }
            }
        }
    }
    (frame, label)
}

fn frame_rng(seed: u64, frame: usize, stream: u64) -> ChaCha20Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(frame as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&stream.to_le_bytes());
    ChaCha20Rng::from_seed(bytes)
}

fn apply_weather(frame: &mut Array3<f32>, weather: &WeatherConfig, seed: u64, index: usize) {
    let (h, w, _) = frame.dim();
    if weather.fog > 0.0 {
        let fog_gray = 0.72f32;
        for y in 0..h {
            // denser toward the horizon (top)
            let vertical = 1.0 - y as f32 / (h.max(2) - 1) as f32;
            let alpha = (weather.fog as f32) * (0.35 + 0.65 * vertical);
            for x in 0..w {
                for c in 0..3 {
                    let v = frame[[y, x, c]];
                    frame[[y, x, c]] = v * (1.0 - alpha) + fog_gray * alpha;
                }
            }
        }
    }
    if weather.rain > 0.0 {
        let mut rng = frame_rng(seed, index, 1);
        let n_streaks = ((weather.rain * (h * w) as f64 / 18.0).ceil()) as usize;
        for _ in 0..n_streaks {
            let mut y = rng.gen_range(0..h) as i64;
            let mut x = rng.gen_range(0..w) as i64;
            let len = rng.gen_range(2..=(h / 4).max(3));
            let boost = 0.25 + 0.35 * weather.rain as f32;
            for _ in 0..len {
                if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                    for c in 0..3 {
                        let v = frame[[y as usize, x as usize, c]];
                        frame[[y as usize, x as usize, c]] = (v + boost).min(1.0);
                    }
                }
                y += 1;
                x += 1; // diagonal streaks
            }
        }
    }
    if weather.darkness > 0.0 {
        let gamma = 1.0 + 1.5 * weather.darkness as f32;
        let gain = 1.0 - 0.6 * weather.darkness as f32;
        for v in frame.iter_mut() {
            *v = v.max(0.0).powf(gamma) * gain;
        }
    }
    if weather.noise > 0.0 {
        let mut rng = frame_rng(seed, index, 2);
        let amp = 0.18 * weather.noise as f32;
        for v in frame.iter_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
    for v in frame.iter_mut() {
        // clip, then snap to the 8-bit grid so disk round-trips are exact
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// The configured object trajectories for a scene, without rendering.
pub fn object_tracks(config: &SceneConfig) -> Result<Vec<ObjectTrack>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let _tint: f32 = rng.gen();
    let _bands: (f64, f64) = (rng.gen(), rng.gen());
    Ok(plan_tracks(config, &mut rng))
}

/// Renders one labeled sequence; deterministic given the config seed.
pub fn generate_sequence(config: &SceneConfig) -> Result<FrameSequence> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let tint: f32 = rng.gen();
    let sky_frac: f64 = rng.gen_range(0.2..0.4);
    let building_frac: f64 = rng.gen_range(0.55..0.75);
    let tracks = plan_tracks(config, &mut rng);
    let sky_end = (config.height as f64 * sky_frac) as usize;
    let building_end = (config.height as f64 * building_frac) as usize;

    let mut frames = Vec::with_capacity(config.seq_length);
    let mut labels = Vec::with_capacity(config.seq_length);
    for t in 0..config.seq_length {
        let (mut frame, label) =
            render_clean_frame(config, &tracks, t, sky_end, building_end, tint);
        apply_weather(&mut frame, &config.weather, config.seed, t);
        frames.push(frame);
        labels.push(label);
    }
    let seq = FrameSequence {
        sequence_id: format!("scene-{:08x}", config.seed),
        frames,
        labels,
    };
    seq.validate(config.num_classes)?;
    Ok(seq)
}

/// A named roster entry: sequence name and its weather setting.
pub type WeatherArm = (&'static str, WeatherConfig);

fn wc(fog: f64, rain: f64, darkness: f64, noise: f64) -> WeatherConfig {
    WeatherConfig {
        fog,
        rain,
        darkness,
        noise,
    }
}

/// Training roster: all four weather types alone and three mixtures.
pub fn train_roster() -> Vec<WeatherArm> {
    vec![
        ("clear", wc(0.0, 0.0, 0.0, 0.0)),
        ("fog_light", wc(0.3, 0.0, 0.0, 0.0)),
        ("fog_heavy", wc(0.7, 0.0, 0.0, 0.0)),
        ("rain_light", wc(0.0, 0.3, 0.0, 0.0)),
        ("rain_heavy", wc(0.0, 0.7, 0.0, 0.0)),
        ("dark_light", wc(0.0, 0.0, 0.35, 0.0)),
        ("dark_heavy", wc(0.0, 0.0, 0.65, 0.0)),
        ("noise_light", wc(0.0, 0.0, 0.0, 0.35)),
        ("noise_heavy", wc(0.0, 0.0, 0.0, 0.65)),
        ("fog_rain", wc(0.4, 0.4, 0.0, 0.0)),
        ("fog_dark", wc(0.4, 0.0, 0.4, 0.0)),
        ("rain_noise", wc(0.0, 0.4, 0.0, 0.4)),
        ("clear_b", wc(0.0, 0.0, 0.0, 0.0)),
        ("fog_mid", wc(0.5, 0.0, 0.0, 0.0)),
        ("rain_mid", wc(0.0, 0.5, 0.0, 0.0)),
        ("dark_mid", wc(0.0, 0.0, 0.5, 0.0)),
    ]
}

/// Validation roster; `rain_dark` and `fog_noise` are mixtures absent from
/// the training roster (the generalization probe).
pub fn val_roster() -> Vec<WeatherArm> {
    vec![
        ("fog_val", wc(0.55, 0.0, 0.0, 0.0)),
        ("rain_val", wc(0.0, 0.55, 0.0, 0.0)),
        ("dark_val", wc(0.0, 0.0, 0.55, 0.0)),
        ("rain_dark", wc(0.0, 0.45, 0.45, 0.0)),
        ("fog_noise", wc(0.45, 0.0, 0.0, 0.4)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkProfile {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub n_objects: usize,
    pub seq_length: usize,
    pub seed: u64,
}

impl Default for BenchmarkProfile {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 8,
            n_objects: 3,
            seq_length: 12,
            seed: 2024,
        }
    }
}

impl BenchmarkProfile {
    /// Parses a plain-text key-value profile (key = value per line, '#'
    /// comments). Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut profile = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("profile line {}: expected key = value", lineno + 1)))?;
            let value = value.trim();
            let parse = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("profile line {}: bad number '{v}'", lineno + 1)))
            };
            match key.trim() {
                "height" => profile.height = parse(value)?,
                "width" => profile.width = parse(value)?,
                "num_classes" => profile.num_classes = parse(value)?,
                "n_objects" => profile.n_objects = parse(value)?,
                "seq_length" => profile.seq_length = parse(value)?,
                "seed" => profile.seed = parse(value)? as u64,
                other => {
                    return Err(Error::Config(format!(
                        "profile line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(profile)
    }
}

/// Paths produced by [`generate_benchmark`].
#[derive(Debug, Clone)]
pub struct BenchmarkManifests {
    pub train: PathBuf,
    pub val: PathBuf,
}

fn sequence_seed(base: u64, split: u64, index: usize) -> u64 {
    // splitmix64-style mixing of (base, split, index)
    let mut z = base
        .wrapping_add(split.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Writes the full train/val benchmark in the dataset disk layout and
/// returns the two manifest paths.
pub fn generate_benchmark(root: &Path, profile: &BenchmarkProfile) -> Result<BenchmarkManifests> {
    let write_split = |split_name: &str, split_id: u64, roster: Vec<WeatherArm>| -> Result<PathBuf> {
        let mut entries = Vec::new();
        for (i, (name, weather)) in roster.into_iter().enumerate() {
            let config = SceneConfig {
                height: profile.height,
                width: profile.width,
                num_classes: profile.num_classes,
                n_objects: profile.n_objects,
                weather,
                seq_length: profile.seq_length,
                seed: sequence_seed(profile.seed, split_id, i),
            };
            let seq = generate_sequence(&config)?;
            let rel = format!("{split_name}/{i:02}_{name}");
            write_sequence(&root.join(&rel), &seq)?;
            entries.push(rel);
        }
        let manifest = root.join(format!("manifest_{split_name}.txt"));
        write_manifest(&manifest, &entries)?;
        Ok(manifest)
    };
    Ok(BenchmarkManifests {
        train: write_split("train", 1, train_roster())?,
        val: write_split("val", 2, val_roster())?,
    })
}
