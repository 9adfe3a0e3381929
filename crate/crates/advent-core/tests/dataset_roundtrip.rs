//! On-disk dataset format round-trips and the synthetic benchmark layout.

use advent_core::pipeline::{build_all_windows, ingest_dataset, write_manifest, write_sequence};
use advent_core::synthetic::{
    generate_benchmark, generate_sequence, BenchmarkProfile, SceneConfig, WeatherConfig,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Frames already on the 8-bit grid survive the PNG round-trip exactly.
fn quantized_sequence(seed: u64, length: usize) -> advent_core::pipeline::FrameSequence {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    advent_core::pipeline::FrameSequence {
        sequence_id: format!("rt-{seed}"),
        frames: (0..length)
            .map(|_| {
                Array3::from_shape_fn((6, 7, 3), |_| rng.gen_range(0u32..=255) as f32 / 255.0)
            })
            .collect(),
        labels: (0..length)
            .map(|_| Array2::from_shape_fn((6, 7), |_| rng.gen_range(0..5u8)))
            .collect(),
    }
}

#[test]
fn write_then_ingest_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let seqs: Vec<_> = (0..3).map(|i| quantized_sequence(i, 4 + i as usize)).collect();
    let mut entries = Vec::new();
    for seq in &seqs {
        write_sequence(&root.join(&seq.sequence_id), seq).unwrap();
        entries.push(seq.sequence_id.clone());
    }
    let manifest = root.join("manifest.txt");
    write_manifest(&manifest, &entries).unwrap();

    let loaded = ingest_dataset(root, &manifest, 5).unwrap();
    assert_eq!(loaded.len(), seqs.len());
    for (got, want) in loaded.iter().zip(&seqs) {
        assert_eq!(got.sequence_id, want.sequence_id);
        assert_eq!(got.frames.len(), want.frames.len());
        for (a, b) in got.frames.iter().zip(&want.frames) {
            assert_eq!(a, b);
        }
        for (a, b) in got.labels.iter().zip(&want.labels) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn manifest_comments_and_blanks_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let seq = quantized_sequence(9, 4);
    write_sequence(&root.join("only"), &seq).unwrap();
    let manifest = root.join("manifest.txt");
    std::fs::write(&manifest, "# header\n\nonly   # trailing note\n\n").unwrap();
    let loaded = ingest_dataset(root, &manifest, 5).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].sequence_id, "only");
}

#[test]
fn missing_sequence_directory_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.txt");
    std::fs::write(&manifest, "ghost\n").unwrap();
    let err = ingest_dataset(dir.path(), &manifest, 5).unwrap_err();
    assert!(err.to_string().contains("ghost"));
}

#[test]
fn out_of_range_labels_fail_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let seq = quantized_sequence(3, 4); // labels in [0, 5)
    write_sequence(&root.join("bad"), &seq).unwrap();
    let manifest = root.join("manifest.txt");
    write_manifest(&manifest, &["bad".into()]).unwrap();
    assert!(ingest_dataset(root, &manifest, 5).is_ok());
    assert!(ingest_dataset(root, &manifest, 3).is_err());
}

#[test]
fn generated_sequences_round_trip_exactly() {
    // the generator quantizes to the 8-bit grid, so disk I/O is lossless
    let config = SceneConfig {
        weather: WeatherConfig {
            fog: 0.4,
            rain: 0.3,
            darkness: 0.2,
            noise: 0.1,
        },
        seed: 17,
        ..Default::default()
    };
    let seq = generate_sequence(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(&dir.path().join(&seq.sequence_id), &seq).unwrap();
    let manifest = dir.path().join("manifest.txt");
    write_manifest(&manifest, &[seq.sequence_id.clone()]).unwrap();
    let loaded = ingest_dataset(dir.path(), &manifest, config.num_classes).unwrap();
    for (a, b) in loaded[0].frames.iter().zip(&seq.frames) {
        assert_eq!(a, b);
    }
    for (a, b) in loaded[0].labels.iter().zip(&seq.labels) {
        assert_eq!(a, b);
    }
}

#[test]
fn benchmark_generation_feeds_the_training_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let profile = BenchmarkProfile {
        height: 16,
        width: 16,
        seq_length: 6,
        ..Default::default()
    };
    let manifests = generate_benchmark(dir.path(), &profile).unwrap();

    let train = ingest_dataset(dir.path(), &manifests.train, profile.num_classes).unwrap();
    let val = ingest_dataset(dir.path(), &manifests.val, profile.num_classes).unwrap();
    assert!(!train.is_empty());
    assert!(!val.is_empty());

    let train_ids: std::collections::HashSet<_> =
        train.iter().map(|s| s.sequence_id.clone()).collect();
    assert!(val.iter().all(|s| !train_ids.contains(&s.sequence_id)));

    let windows = build_all_windows(&train, 2).unwrap();
    assert_eq!(windows.len(), train.len() * (profile.seq_length - 2));
}

#[test]
fn benchmark_generation_is_deterministic() {
    let profile = BenchmarkProfile {
        height: 16,
        width: 16,
        seq_length: 5,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_benchmark(a.path(), &profile).unwrap();
    let mb = generate_benchmark(b.path(), &profile).unwrap();
    let sa = ingest_dataset(a.path(), &ma.train, profile.num_classes).unwrap();
    let sb = ingest_dataset(b.path(), &mb.train, profile.num_classes).unwrap();
    assert_eq!(sa.len(), sb.len());
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.frames, y.frames);
        assert_eq!(x.labels, y.labels);
    }
}
