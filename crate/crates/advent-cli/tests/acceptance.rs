//! End-to-end acceptance gate. Each test prints one PASS/FAIL line for its
//! criterion; run with `--nocapture` to see the lines on success.

use std::time::Instant;

use advent_cli::ablate::{run_suite, Suite, SuiteReport};
use advent_cli::config::RunConfig;
use advent_core::net::{FusionPolicy, NetworkSpec, PredictionTensor, SegModel};
use advent_core::pipeline::{
    build_windows, gsm_shuffle, ingest_dataset, write_manifest, write_sequence, FrameSequence,
    LsmWindow,
};
use advent_core::regularizers::{
    bd_grad, bd_loss, infonce_grad, infonce_loss, ContrastSample, ImageDistribution,
    DEFAULT_EPSILON,
};
use advent_core::synthetic::{generate_benchmark, generate_sequence, BenchmarkProfile, SceneConfig};
use advent_core::unfold::{
    batch_loss, train_step, unroll, LossMode, RegConfig, TrainConfig, TrainState, UnfoldParams,
};
use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Criterion {
    number: u32,
    name: &'static str,
    started: Instant,
}

impl Criterion {
    fn new(number: u32, name: &'static str) -> Self {
        Self {
            number,
            name,
            started: Instant::now(),
        }
    }

    fn finish(self, pass: bool, detail: &str) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "acceptance criterion {} ({}): {verdict} [{:.1}s] {detail}",
            self.number,
            self.name,
            self.started.elapsed().as_secs_f64()
        );
        assert!(pass, "criterion {} ({}) failed: {detail}", self.number, self.name);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// ---------------------------------------------------------------------------
// 1. Gradient oracles vs central finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_oracles() {
    let c = Criterion::new(1, "gradient oracles vs finite differences");
    let mut worst = 0.0f64;

    let mut rng = ChaCha20Rng::seed_from_u64(0xbd);
    for _ in 0..100 {
        let pixels = rng.gen_range(2..6);
        let classes = rng.gen_range(2..5);
        let mut values = Vec::new();
        for _ in 0..pixels {
            let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|e| e / sum / pixels as f64));
        }
        let px = ImageDistribution {
            p: values,
            epsilon: DEFAULT_EPSILON,
        };
        let labels: Vec<usize> = (0..pixels).map(|_| rng.gen_range(0..classes)).collect();
        let py = ImageDistribution::one_hot(&labels, classes).unwrap();
        let grad = bd_grad(&px, &py).unwrap();
        let h = 1e-7;
        for i in 0..px.len() {
            let mut plus = px.clone();
            plus.p[i] += h;
            let mut minus = px.clone();
            minus.p[i] -= h;
            let fd = (bd_loss(&plus, &py).unwrap() - bd_loss(&minus, &py).unwrap()) / (2.0 * h);
            if py.p[i] == 0.0 {
                worst = worst.max(fd.abs().min(1.0));
            } else {
                worst = worst.max(rel_err(fd, grad[i]));
            }
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(0xce);
    for _ in 0..100 {
        let dim = rng.gen_range(2..6);
        let embed = |rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let sample = ContrastSample {
            anchor: embed(&mut rng),
            positives: (0..rng.gen_range(1..5)).map(|_| embed(&mut rng)).collect(),
            negatives: (0..rng.gen_range(1..5)).map(|_| embed(&mut rng)).collect(),
            temperature: rng.gen_range(0.05..1.0),
        };
        let grad = infonce_grad(&sample).unwrap();
        let h = 1e-6;
        for (i, g) in grad.iter().enumerate() {
            let mut plus = sample.clone();
            plus.anchor[i] += h;
            let mut minus = sample.clone();
            minus.anchor[i] -= h;
            let fd = (infonce_loss(&plus).unwrap() - infonce_loss(&minus).unwrap()) / (2.0 * h);
            worst = worst.max(rel_err(fd, *g));
        }
    }

    let pass = worst < 1e-4 && c.started.elapsed().as_secs() < 30;
    c.finish(pass, &format!("worst relative error {worst:.2e} over 200 instances"));
}

// ---------------------------------------------------------------------------
// 2. Unroll identities + K=1 hand-stepped oracle
// ---------------------------------------------------------------------------

fn random_logit_batch(seed: u64, b: usize, cls: usize, h: usize, w: usize) -> (PredictionTensor, Vec<Array2<u8>>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * cls * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let logits =
        PredictionTensor::logits(Tensor::from_vec(data, (b, cls, h, w), &Device::Cpu).unwrap());
    let labels = (0..b)
        .map(|_| Array2::from_shape_fn((h, w), |_| rng.gen_range(0..cls) as u8))
        .collect();
    (logits, labels)
}

fn tensor_data(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

#[test]
fn criterion_2_unroll_identities_and_oracle() {
    let c = Criterion::new(2, "unroll identities and K=1 oracle");
    let device = Device::Cpu;
    let config = RegConfig::default();
    let (x0, labels) = random_logit_batch(202, 2, 4, 5, 5);
    let refs: Vec<&Array2<u8>> = labels.iter().collect();
    let x0_data = tensor_data(&x0.values);

    let mut pass = true;
    let mut detail = String::new();
    for (name, params) in [
        ("eta=0", UnfoldParams::init(3, 0.5, 0.5, 0.0, &device).unwrap()),
        ("alpha=gamma=0", UnfoldParams::init(3, 0.0, 0.0, 0.1, &device).unwrap()),
        ("K=0", UnfoldParams::init(0, 0.1, 0.1, 0.01, &device).unwrap()),
    ] {
        let out = unroll(&x0, &refs, &params, &config, 7).unwrap();
        if tensor_data(&out.values) != x0_data {
            pass = false;
            detail = format!("{name} identity violated");
        }
    }

    // K=1 oracle: one explicit layer step from the closed-form fields
    let params = UnfoldParams::init(1, 0.1, 0.1, 0.01, &device).unwrap();
    let out = unroll(&x0, &refs, &params, &config, 11).unwrap();
    let sets = advent_core::unfold::batch_contrast_sets(&refs, &config.contrast, 11);
    let mut worst = 0.0f64;
    for i in 0..2 {
        let image = x0.image_logits(i).unwrap();
        let (h, w, cls) = image.dim();
        let px = ImageDistribution::from_logits(&image, config.epsilon).unwrap();
        let flat: Vec<usize> = labels[i].iter().map(|&v| v as usize).collect();
        let py = ImageDistribution::one_hot(&flat, cls).unwrap();
        let g_bd = bd_grad(&px, &py).unwrap();
        let mut g_con = vec![0.0; h * w * cls];
        let embed = |p: usize| -> Vec<f64> { image.slice(ndarray::s![p / w, p % w, ..]).to_vec() };
        for set in &sets[i] {
            let sample = ContrastSample {
                anchor: embed(set.anchor),
                positives: set.positives.iter().map(|&p| embed(p)).collect(),
                negatives: set.negatives.iter().map(|&p| embed(p)).collect(),
                temperature: config.contrast.temperature,
            };
            for (k, g) in infonce_grad(&sample).unwrap().into_iter().enumerate() {
                g_con[set.anchor * cls + k] += g;
            }
        }
        let got = out.image_logits(i).unwrap();
        for y in 0..h {
            for x in 0..w {
                for k in 0..cls {
                    let j = (y * w + x) * cls + k;
                    let expected = image[[y, x, k]] - 0.01 * (0.1 * g_bd[j] + 0.1 * g_con[j]);
                    worst = worst.max((expected - got[[y, x, k]]).abs());
                }
            }
        }
    }
    if worst >= 1e-9 {
        pass = false;
        detail = format!("K=1 oracle deviation {worst:.2e}");
    }
    if detail.is_empty() {
        detail = format!("identities exact, K=1 deviation {worst:.2e}");
    }
    let pass = pass && c.started.elapsed().as_secs() < 10;
    c.finish(pass, &detail);
}

// ---------------------------------------------------------------------------
// 3. Unfolded trainability + bitwise checkpoint round-trip
// ---------------------------------------------------------------------------

fn synthetic_windows(seed: u64) -> Vec<LsmWindow> {
    let config = SceneConfig {
        height: 16,
        width: 16,
        seq_length: 6,
        seed,
        ..Default::default()
    };
    build_windows(&generate_sequence(&config).unwrap(), 2).unwrap()
}

fn state_tensors(state: &TrainState) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    for (name, var) in state.model.named_vars() {
        out.push((
            name,
            tensor_data(var.as_tensor()).iter().map(|v| v.to_bits()).collect(),
        ));
    }
    for (name, var) in state.unfold.named_vars() {
        out.push((
            name,
            tensor_data(var.as_tensor()).iter().map(|v| v.to_bits()).collect(),
        ));
    }
    for (i, (m, v)) in state.optimizer.moments().iter().enumerate() {
        out.push((
            format!("m{i}"),
            tensor_data(m).iter().map(|v| v.to_bits()).collect(),
        ));
        out.push((
            format!("v{i}"),
            tensor_data(v).iter().map(|v| v.to_bits()).collect(),
        ));
    }
    out
}

#[test]
fn criterion_3_trainability_and_checkpoint() {
    let c = Criterion::new(3, "K=5 trainability and bitwise checkpoint");
    let spec = NetworkSpec {
        policy: Some(FusionPolicy::Fi),
        num_classes: 8,
        backbone_width: 8,
        backbone_depth: 2,
        input_channels: 3,
    };
    let windows = synthetic_windows(303);
    let batch: Vec<&LsmWindow> = windows.iter().collect();
    let train_config = TrainConfig::default(); // unfolded loss
    let model = SegModel::init(&spec, 303).unwrap();
    let mut state = TrainState::new(model, 5, &train_config, 303).unwrap();

    // every coefficient receives a finite gradient and jointly a nonzero one
    let loss = batch_loss(&batch, &state, &train_config, 99).unwrap();
    let grads = loss.backward().unwrap();
    let mut norm_sq = 0.0;
    let mut all_finite = true;
    let mut covered = 0usize;
    for (_, var) in state.unfold.named_vars() {
        match grads.get(var) {
            Some(g) => {
                let v = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                covered += 1;
                for x in v {
                    all_finite &= x.is_finite();
                    norm_sq += x * x;
                }
            }
            None => all_finite = false,
        }
    }
    let trainable = all_finite && norm_sq > 0.0 && covered == 15;

    // bitwise round-trip after real optimizer steps
    train_step(&batch, &mut state, &train_config).unwrap();
    train_step(&batch, &mut state, &train_config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = advent_core::checkpoint::default_path(dir.path());
    advent_core::checkpoint::save(&path, &state, true).unwrap();
    let (restored, _) = advent_core::checkpoint::load(&path).unwrap();
    let bitwise = state_tensors(&state) == state_tensors(&restored);

    // restored training continues identically
    let a = train_step(&batch, &mut state, &train_config).unwrap();
    let mut restored = restored;
    let b = train_step(&batch, &mut restored, &train_config).unwrap();
    let resumed = a.to_bits() == b.to_bits();

    c.finish(
        trainable && bitwise && resumed,
        &format!(
            "coefficient grad norm {:.3e}, finite={all_finite}, bitwise={bitwise}, resumed={resumed}",
            norm_sq.sqrt()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Pipeline laws
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_pipeline_laws() {
    let c = Criterion::new(4, "pipeline laws");
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let mut pass = true;
    let mut detail = String::from("windows, channels, shuffle, round-trip all hold");

    for case in 0..50 {
        let length = rng.gen_range(2..15);
        let depth = rng.gen_range(1..6);
        let seq = FrameSequence {
            sequence_id: format!("case{case}"),
            frames: (0..length)
                .map(|_| Array3::from_shape_fn((4, 5, 3), |_| rng.gen::<f32>()))
                .collect(),
            labels: (0..length)
                .map(|_| Array2::from_shape_fn((4, 5), |_| rng.gen_range(0..6u8)))
                .collect(),
        };
        match build_windows(&seq, depth) {
            Ok(windows) => {
                if length <= depth || windows.len() != length - depth {
                    pass = false;
                    detail = format!("window count broke at L={length} d={depth}");
                }
                for w in &windows {
                    let closure_ok = w
                        .du
                        .iter()
                        .zip(w.intu.iter())
                        .zip(w.insu.iter())
                        .all(|((du, intu), insu)| (du + intu - insu).abs() <= 1e-6);
                    if !closure_ok {
                        pass = false;
                        detail = "du + intu != insu".into();
                    }
                }
            }
            Err(_) if length <= depth => {}
            Err(e) => {
                pass = false;
                detail = format!("unexpected window error: {e}");
            }
        }

        let n = rng.gen_range(1..100);
        let seed = rng.gen::<u64>();
        let epoch = rng.gen_range(0..8);
        let a = gsm_shuffle(n, seed, epoch, 4).unwrap();
        let b = gsm_shuffle(n, seed, epoch, 4).unwrap();
        let mut sorted = a.order.clone();
        sorted.sort_unstable();
        if a != b || sorted != (0..n).collect::<Vec<_>>() {
            pass = false;
            detail = "shuffle permutation/determinism broke".into();
        }
    }

    // ingestion round-trip on 8-bit-grid frames
    let dir = tempfile::tempdir().unwrap();
    let seq = FrameSequence {
        sequence_id: "rt".into(),
        frames: (0..4)
            .map(|_| Array3::from_shape_fn((6, 6, 3), |_| rng.gen_range(0u32..=255) as f32 / 255.0))
            .collect(),
        labels: (0..4)
            .map(|_| Array2::from_shape_fn((6, 6), |_| rng.gen_range(0..5u8)))
            .collect(),
    };
    write_sequence(&dir.path().join("rt"), &seq).unwrap();
    let manifest = dir.path().join("manifest.txt");
    write_manifest(&manifest, &["rt".into()]).unwrap();
    let loaded = ingest_dataset(dir.path(), &manifest, 5).unwrap();
    if loaded[0].frames != seq.frames || loaded[0].labels != seq.labels {
        pass = false;
        detail = "ingestion round-trip not exact".into();
    }

    let pass = pass && c.started.elapsed().as_secs() < 30;
    c.finish(pass, &detail);
}

// ---------------------------------------------------------------------------
// 5. Metric oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_metric_oracle() {
    let c = Criterion::new(5, "confusion-matrix metric oracle");
    let mut rng = ChaCha20Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let classes = rng.gen_range(2..9usize);
        let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let gt = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..classes) as u8);
        let pred = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..classes) as u8);
        let mut cm = advent_core::metrics::ConfusionMatrix::new(classes);
        cm.accumulate_maps(&pred, &gt).unwrap();
        let got = cm.compute_metrics().unwrap();

        let pairs: Vec<(u8, u8)> = gt.iter().copied().zip(pred.iter().copied()).collect();
        let mut sums = [0.0; 4];
        let mut present = 0usize;
        for k in 0..classes as u8 {
            let tp = pairs.iter().filter(|&&(g, p)| g == k && p == k).count() as f64;
            let fp = pairs.iter().filter(|&&(g, p)| g != k && p == k).count() as f64;
            let fn_ = pairs.iter().filter(|&&(g, p)| g == k && p != k).count() as f64;
            if tp + fp + fn_ == 0.0 {
                continue;
            }
            present += 1;
            let pre = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            sums[0] += tp / (tp + fp + fn_);
            sums[1] += pre;
            sums[2] += rec;
            sums[3] += if pre + rec > 0.0 { 2.0 * pre * rec / (pre + rec) } else { 0.0 };
        }
        let n = present as f64;
        for (g, s) in [got.miou, got.mpre, got.mrec, got.mf1].iter().zip(&sums) {
            worst = worst.max((g - s / n).abs());
        }
    }

    // perfect prediction scores all ones
    let gt = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0..6u8));
    let mut cm = advent_core::metrics::ConfusionMatrix::new(6);
    cm.accumulate_maps(&gt, &gt).unwrap();
    let m = cm.compute_metrics().unwrap();
    let perfect = m.miou == 1.0 && m.mpre == 1.0 && m.mrec == 1.0 && m.mf1 == 1.0;

    c.finish(
        worst == 0.0 && perfect,
        &format!("worst deviation {worst:.2e} over 100 instances, perfect-prediction={perfect}"),
    );
}

// ---------------------------------------------------------------------------
// 6. Directional ablation reproduction (desk scale, reduced resolution)
// ---------------------------------------------------------------------------

fn desk_scale_config(root: &std::path::Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.data_root = root.to_path_buf();
    config.train_manifest = root.join("manifest_train.txt");
    config.val_manifest = Some(root.join("manifest_val.txt"));
    config.epochs = 20; // fast mode
    config.learning_rate = 3e-3;
    config.temperature = 0.5;
    config.alpha = 0.1;
    config.gamma = 0.03;
    config
}

fn arm_miou(report: &SuiteReport, label: &str) -> f64 {
    report
        .arms
        .iter()
        .find(|a| a.label == label)
        .unwrap_or_else(|| panic!("missing arm {label}"))
        .mean
        .miou
}

#[test]
fn criterion_6_directional_ablation() {
    let c = Criterion::new(6, "directional ablation orderings");
    let dir = tempfile::tempdir().unwrap();
    let profile = BenchmarkProfile {
        height: 16,
        width: 16,
        seq_length: 6,
        ..Default::default()
    };
    generate_benchmark(dir.path(), &profile).unwrap();
    let mut base = desk_scale_config(dir.path());
    base.out_dir = dir.path().join("runs");
    let seeds = [0, 1, 2];

    let gsm = run_suite(Suite::Gsm, &base, &seeds).unwrap();
    let reg = run_suite(Suite::Regularizer, &base, &seeds).unwrap();

    let gsm_ok = arm_miou(&gsm, "gsm_on") > arm_miou(&gsm, "gsm_off");
    let (ce, vrs) = (arm_miou(&reg, "ce_only"), arm_miou(&reg, "vrs"));
    let (k2, k5) = (arm_miou(&reg, "urs_k2"), arm_miou(&reg, "urs_k5"));
    let reg_ok = k5 >= k2 && k2 >= vrs && vrs >= ce;

    if !gsm_ok || !reg_ok {
        // emit the comparison tables so the failure is inspectable
        print!("{}", gsm.table);
        print!("{}", reg.table);
    }
    c.finish(
        gsm_ok && reg_ok,
        &format!(
            "gsm {:.4}>{:.4}; regularizer {k5:.4}>={k2:.4}>={vrs:.4}>={ce:.4}",
            arm_miou(&gsm, "gsm_on"),
            arm_miou(&gsm, "gsm_off"),
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Smoke training: 50 fixed-batch steps cut the loss by >= 10%
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_smoke_training() {
    let c = Criterion::new(7, "50-step smoke training, CE and FI");
    let windows = synthetic_windows(707);
    let batch: Vec<&LsmWindow> = windows.iter().take(4).collect();
    let mut detail = String::new();
    let mut pass = true;
    for policy in [FusionPolicy::Ce, FusionPolicy::Fi] {
        let spec = NetworkSpec {
            policy: Some(policy),
            num_classes: 8,
            backbone_width: 8,
            backbone_depth: 2,
            input_channels: 3,
        };
        let mut train_config = TrainConfig::default();
        train_config.adam.learning_rate = 3e-3;
        assert!(matches!(train_config.loss_mode, LossMode::Unfolded));
        let model = SegModel::init(&spec, 7).unwrap();
        let mut state = TrainState::new(model, 5, &train_config, 7).unwrap();
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..50 {
            let loss = train_step(&batch, &mut state, &train_config).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        let reduced = last <= 0.9 * first;
        pass &= reduced;
        detail.push_str(&format!("{policy}: {first:.4} -> {last:.4}; "));
    }
    c.finish(pass, detail.trim_end_matches("; "));
}
