//! `eval`: runs the pipeline over a manifest and tabulates precision.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use nalgebra::Vector3;
use posevit_core::metrics::{precision_report, EvalRecord, PrecisionReport, STANDARD_THRESHOLDS};
use posevit_core::numerics::ChamferMode;
use posevit_core::pipeline::{run_pipeline, Model, PipelineConfig};
use posevit_core::{losses, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub mean_chamfer: f64,
    pub pose_failures: usize,
    pub thresholds: Vec<String>,
    /// Pass fraction per threshold, by category.
    pub precision: BTreeMap<String, Vec<f64>>,
}

pub struct EvalOutcome {
    pub report: PrecisionReport,
    pub summary: EvalSummary,
    pub records: Vec<(String, EvalRecord)>,
}

fn bounds(t: &Tensor) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for i in 0..t.rows() {
        let p = Vector3::from_row_slice(t.row(i));
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    (lo, hi)
}

/// Evaluates `model` on every sample. Records are keyed and sorted by sample
/// id, so the result does not depend on manifest order.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &PipelineConfig) -> Result<EvalOutcome> {
    let profile = data.manifest.profile()?;
    if profile != model.profile() {
        anyhow::bail!("weights are for the {} profile but the dataset is {profile}", model.profile());
    }
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.sort_by(|&a, &b| data.samples[a].0.id.cmp(&data.samples[b].0.id));
    let rows = order
        .par_iter()
        .map(|&i| -> Result<(String, EvalRecord, f64)> {
            let (e, s) = &data.samples[i];
            let prior = data.prior(s.category)?;
            let out = run_pipeline(model, s, prior, cfg)?;
            let cd = losses::chamfer(&out.model, &s.model, ChamferMode::Mean)?;
            let rec = EvalRecord {
                category: s.category.name().to_string(),
                sym: s.sym,
                pred: out.pose.ok(),
                gt: s.pose,
                pred_bounds: bounds(&out.model),
                gt_bounds: bounds(&s.model),
            };
            Ok((e.id.clone(), rec, cd))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let mean_chamfer = if n == 0 { 0.0 } else { rows.iter().map(|r| r.2).sum::<f64>() / n as f64 };
    let pose_failures = rows.iter().filter(|r| r.1.pred.is_none()).count();
    let records: Vec<(String, EvalRecord)> = rows.into_iter().map(|(id, r, _)| (id, r)).collect();
    let plain: Vec<EvalRecord> = records.iter().map(|(_, r)| r.clone()).collect();
    let cats: Vec<&str> = data.manifest.categories.iter().map(String::as_str).collect();
    let report = precision_report(&plain, &cats, &STANDARD_THRESHOLDS);
    let thresholds = report.thresholds.iter().map(|t| t.label()).collect();
    let precision = report.rows.iter().filter_map(|(name, f)| Some((name.clone(), f.clone()?))).collect();
    let summary = EvalSummary { samples: n, mean_chamfer, pose_failures, thresholds, precision };
    Ok(EvalOutcome { report, summary, records })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub manifest: PathBuf,
    pub weights: PathBuf,
    pub report: PathBuf,
    pub summary: Option<PathBuf>,
}

pub fn run_eval(opts: &EvalOptions, out: &mut dyn std::io::Write) -> Result<EvalOutcome> {
    let model = crate::weights::load(&opts.weights)?;
    let data = Dataset::load(&opts.manifest)?;
    let outcome = evaluate(&model, &data, &PipelineConfig::default())?;
    crate::formats::write_file(&opts.report, outcome.report.to_csv().as_bytes())?;
    if let Some(p) = &opts.summary {
        write_summary(p, &outcome.summary)?;
    }
    write!(out, "{}", outcome.report.to_table())?;
    writeln!(
        out,
        "samples {}  mean chamfer {:.6}  pose failures {}",
        outcome.summary.samples, outcome.summary.mean_chamfer, outcome.summary.pose_failures
    )?;
    Ok(outcome)
}

fn write_summary(path: &Path, s: &EvalSummary) -> Result<()> {
    crate::formats::write_file(path, (serde_json::to_string_pretty(s)? + "\n").as_bytes())?;
    Ok(())
}
