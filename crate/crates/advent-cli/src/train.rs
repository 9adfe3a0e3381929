//! The training and evaluation loops behind `train` and `eval`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use advent_core::checkpoint;
use advent_core::metrics::{ConfusionMatrix, MetricRecord};
use advent_core::net::SegModel;
use advent_core::pipeline::{
    build_all_windows, gsm_shuffle, ingest_dataset, make_batches, sequential_plan, LsmWindow,
};
use advent_core::unfold::{train_step, TrainState};
use advent_core::Error as CoreError;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train: MetricRecord,
    pub val: Option<MetricRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
}

/// Inference over a window pool in sequence-then-anchor order, x0 only
/// (the unroll is a training-time construct).
pub fn evaluate(
    model: &SegModel,
    windows: &[LsmWindow],
    batch_size: usize,
) -> Result<MetricRecord, CoreError> {
    let mut cm = ConfusionMatrix::new(model.spec.num_classes);
    for batch in windows.chunks(batch_size) {
        let refs: Vec<&LsmWindow> = batch.iter().collect();
        let prediction = model.predict(&refs)?;
        for (map, window) in prediction.argmax_maps()?.iter().zip(batch) {
            cm.accumulate_maps(map, &window.label)?;
        }
    }
    cm.compute_metrics()
}

fn load_windows(
    root: &Path,
    manifest: &Path,
    classes: usize,
    depth: usize,
) -> Result<Vec<LsmWindow>, CliError> {
    let sequences = ingest_dataset(root, manifest, classes)?;
    if sequences.is_empty() {
        return Err(CliError::Runtime(format!(
            "manifest {} lists no sequences",
            manifest.display()
        )));
    }
    Ok(build_all_windows(&sequences, depth)?)
}

fn render_metric_line(
    epoch: usize,
    split: &str,
    loss: Option<f64>,
    record: &MetricRecord,
) -> String {
    match loss {
        Some(loss) => format!("epoch={epoch} split={split} loss={loss:.6} {record}"),
        None => format!("epoch={epoch} split={split} {record}"),
    }
}

/// Runs one full training: ingest, window construction, the per-epoch
/// shuffle-train-evaluate loop, metric/trace logging, and a checkpoint.
pub fn run_training(config: &RunConfig) -> Result<TrainSummary, CliError> {
    config.validate()?;
    let spec = config.network_spec();
    let out = &config.out_dir;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("config.txt"), config.render())
        .map_err(|e| CliError::Runtime(format!("cannot write config: {e}")))?;

    let windows = load_windows(
        &config.data_root,
        &config.train_manifest,
        config.classes,
        config.depth,
    )?;
    let (h, w) = windows[0].spatial_dims();
    spec.validate_resolution(h, w)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let val_windows = match &config.val_manifest {
        Some(manifest) => Some(load_windows(
            &config.data_root,
            manifest,
            config.classes,
            config.depth,
        )?),
        None => None,
    };

    let train_config = config.train_config();
    let model = SegModel::init(&spec, config.seed)?;
    let mut state = TrainState::new(model, config.effective_unroll(), &train_config, config.seed)?;

    let open = |name: &str| -> Result<fs::File, CliError> {
        fs::File::create(out.join(name))
            .map_err(|e| CliError::Runtime(format!("cannot write {name}: {e}")))
    };
    let mut metrics_file = open("metrics.txt")?;
    let mut trace_file = open("trace.txt")?;
    let write_line = |file: &mut fs::File, line: &str| -> Result<(), CliError> {
        writeln!(file, "{line}").map_err(|e| CliError::Runtime(format!("log write failed: {e}")))
    };

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let plan = if config.gsm {
            gsm_shuffle(windows.len(), config.seed, epoch as u64, config.batch_size)?
        } else {
            sequential_plan(windows.len(), config.batch_size)?
        };
        let order: Vec<String> = plan.order.iter().map(|i| i.to_string()).collect();
        write_line(
            &mut trace_file,
            &format!("epoch={} order={}", epoch + 1, order.join(",")),
        )?;

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in make_batches(&plan, &windows)? {
            loss_sum += train_step(&batch, &mut state, &train_config)?;
            batches += 1;
        }
        state.epoch = (epoch + 1) as u64;
        let train_loss = loss_sum / batches as f64;

        let train_metrics = evaluate(&state.model, &windows, config.batch_size)?;
        write_line(
            &mut metrics_file,
            &render_metric_line(epoch + 1, "train", Some(train_loss), &train_metrics),
        )?;
        let val_metrics = match &val_windows {
            Some(vw) => {
                let record = evaluate(&state.model, vw, config.batch_size)?;
                write_line(
                    &mut metrics_file,
                    &render_metric_line(epoch + 1, "val", None, &record),
                )?;
                Some(record)
            }
            None => None,
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train: train_metrics,
            val: val_metrics,
        });
    }

    let ckpt = checkpoint::default_path(out);
    checkpoint::save(&ckpt, &state, checkpoint::unfold_in_optimizer(&train_config))?;

    let last = history.last().expect("epochs >= 1");
    let mut summary = format!(
        "epochs={} steps={} train_loss={:.6}\nfinal_train {}\n",
        config.epochs, state.step, last.train_loss, last.train
    );
    if let Some(val) = &last.val {
        summary.push_str(&format!("final_val {val}\n"));
    }
    fs::write(out.join("summary.txt"), summary)
        .map_err(|e| CliError::Runtime(format!("cannot write summary: {e}")))?;

    Ok(TrainSummary { history })
}

/// Loads a checkpoint and reports the four metrics over a manifest.
pub fn run_eval(
    checkpoint_path: &Path,
    data_root: &Path,
    manifest: &Path,
    depth: usize,
    batch_size: usize,
) -> Result<MetricRecord, CliError> {
    if depth < 1 {
        return Err(CliError::Usage("depth must be >= 1".into()));
    }
    if batch_size < 1 {
        return Err(CliError::Usage("batch_size must be >= 1".into()));
    }
    let (state, info) = checkpoint::load(checkpoint_path)?;
    let windows = load_windows(data_root, manifest, info.network.num_classes, depth)?;
    let (h, w) = windows[0].spatial_dims();
    state
        .model
        .spec
        .validate_resolution(h, w)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(evaluate(&state.model, &windows, batch_size)?)
}
