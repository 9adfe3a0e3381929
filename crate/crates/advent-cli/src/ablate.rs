//! The four ablation suites: depth, fusion, gsm, regularizer.

use std::fmt;

use advent_core::metrics::MetricRecord;
use advent_core::net::FusionPolicy;

use crate::config::{LossKind, RunConfig};
use crate::plotting;
use crate::train::{run_training, TrainSummary};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Depth,
    Fusion,
    Gsm,
    Regularizer,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Depth => "depth",
            Suite::Fusion => "fusion",
            Suite::Gsm => "gsm",
            Suite::Regularizer => "regularizer",
        })
    }
}

type Arm = (&'static str, fn(&mut RunConfig));

fn arms(suite: Suite) -> Vec<Arm> {
    match suite {
        Suite::Depth => vec![
            ("depth_1", |c| c.depth = 1),
            ("depth_2", |c| c.depth = 2),
            ("depth_3", |c| c.depth = 3),
            ("depth_4", |c| c.depth = 4),
        ],
        Suite::Fusion => vec![
            ("ce", |c| c.policy = FusionPolicy::Ce),
            ("fi", |c| c.policy = FusionPolicy::Fi),
        ],
        Suite::Gsm => vec![
            ("gsm_on", |c| c.gsm = true),
            ("gsm_off", |c| c.gsm = false),
        ],
        Suite::Regularizer => vec![
            ("ce_only", |c| c.loss = LossKind::Ce),
            ("vrs", |c| c.loss = LossKind::Vrs),
            ("urs_k2", |c| {
                c.loss = LossKind::Urs;
                c.unroll = 2;
            }),
            ("urs_k5", |c| {
                c.loss = LossKind::Urs;
                c.unroll = 5;
            }),
        ],
    }
}

/// One arm's aggregate over seeds.
#[derive(Debug, Clone)]
pub struct ArmReport {
    pub label: String,
    pub mean: MetricRecord,
    pub std: MetricRecord,
    pub runs: Vec<TrainSummary>,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub arms: Vec<ArmReport>,
    pub table: String,
}

fn final_record(summary: &TrainSummary) -> MetricRecord {
    let last = summary.history.last().expect("at least one epoch");
    last.val.unwrap_or(last.train)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn aggregate(label: &str, runs: Vec<TrainSummary>) -> ArmReport {
    let finals: Vec<MetricRecord> = runs.iter().map(final_record).collect();
    let pick = |f: fn(&MetricRecord) -> f64| -> (f64, f64) {
        mean_std(&finals.iter().map(f).collect::<Vec<_>>())
    };
    let (miou, miou_s) = pick(|m| m.miou);
    let (mpre, mpre_s) = pick(|m| m.mpre);
    let (mrec, mrec_s) = pick(|m| m.mrec);
    let (mf1, mf1_s) = pick(|m| m.mf1);
    ArmReport {
        label: label.to_string(),
        mean: MetricRecord {
            miou,
            mpre,
            mrec,
            mf1,
        },
        std: MetricRecord {
            miou: miou_s,
            mpre: mpre_s,
            mrec: mrec_s,
            mf1: mf1_s,
        },
        runs,
    }
}

fn render_table(suite: Suite, arms: &[ArmReport]) -> String {
    let mut out = format!(
        "{:<12} {:>15} {:>15} {:>15} {:>15}\n",
        format!("{suite}"),
        "miou",
        "mpre",
        "mrec",
        "mf1"
    );
    for arm in arms {
        let cell = |mean: f64, std: f64| format!("{mean:.4}\u{b1}{std:.4}");
        out.push_str(&format!(
            "{:<12} {:>15} {:>15} {:>15} {:>15}\n",
            arm.label,
            cell(arm.mean.miou, arm.std.miou),
            cell(arm.mean.mpre, arm.std.mpre),
            cell(arm.mean.mrec, arm.std.mrec),
            cell(arm.mean.mf1, arm.std.mf1),
        ));
    }
    out
}

/// Mean-over-seeds per-epoch curve of one metric for plotting.
fn mean_curve(runs: &[TrainSummary], metric: fn(&MetricRecord) -> f64) -> Vec<(f64, f64)> {
    let epochs = runs.iter().map(|r| r.history.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let sum: f64 = runs
                .iter()
                .map(|r| {
                    let rec = &r.history[e];
                    metric(&rec.val.unwrap_or(rec.train))
                })
                .sum();
            ((e + 1) as f64, sum / runs.len() as f64)
        })
        .collect()
}

/// Runs every arm of `suite` over `seeds`, writing per-run directories under
/// the base out_dir plus the suite table and mIoU/mF1 curve plots.
pub fn run_suite(suite: Suite, base: &RunConfig, seeds: &[u64]) -> Result<SuiteReport, CliError> {
    let suite_dir = base.out_dir.join(suite.to_string());
    std::fs::create_dir_all(&suite_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", suite_dir.display())))?;

    let mut reports = Vec::new();
    for (label, apply) in arms(suite) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            apply(&mut config);
            config.seed = seed;
            config.out_dir = suite_dir.join(label).join(format!("seed{seed}"));
            config.validate()?;
            runs.push(run_training(&config)?);
        }
        reports.push(aggregate(label, runs));
    }

    let table = render_table(suite, &reports);
    std::fs::write(suite_dir.join("table.txt"), &table)
        .map_err(|e| CliError::Runtime(format!("cannot write table: {e}")))?;

    for (metric_name, metric) in [
        ("miou", (|m: &MetricRecord| m.miou) as fn(&MetricRecord) -> f64),
        ("mf1", |m: &MetricRecord| m.mf1),
    ] {
        let series: Vec<(String, Vec<(f64, f64)>)> = reports
            .iter()
            .map(|arm| (arm.label.clone(), mean_curve(&arm.runs, metric)))
            .collect();
        plotting::line_chart(
            &suite_dir.join(format!("{metric_name}.svg")),
            &format!("{suite} ablation: {metric_name} vs epoch"),
            metric_name,
            &series,
        )?;
    }

    Ok(SuiteReport {
        suite,
        arms: reports,
        table,
    })
}
