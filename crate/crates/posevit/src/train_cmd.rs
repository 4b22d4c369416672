//! `train`: fits one model across every category of a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use posevit_core::pipeline::{sample_gradients, Model};
use posevit_core::train::{train, EpochStats, SampleGrad, TrainConfig};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::{formats, weights};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.curve.csv`.
    pub curve: Option<PathBuf>,
    pub config: TrainConfig,
}

pub fn curve_header() -> &'static str {
    "epoch,lr,loss,chamfer,correspondence,deformation,sparsity"
}

pub fn curve_row(s: &EpochStats) -> String {
    let p = &s.parts;
    format!("{},{},{},{},{},{},{}", s.epoch, s.lr, s.loss, p.chamfer, p.correspondence, p.deformation, p.sparsity)
}

/// Trains, writes the weights and the loss curve, and returns the curve.
/// Progress lines go to `log`.
pub fn run_train(opts: &TrainOptions, log: &mut dyn std::io::Write) -> Result<Vec<EpochStats>> {
    let data = Dataset::load(&opts.manifest)?;
    let profile = data.manifest.profile()?;
    let cfg = &opts.config;
    let w = &cfg.weights;
    writeln!(log, "profile {profile}, {} samples, categories {}", data.samples.len(), data.manifest.categories.join(","))?;
    writeln!(
        log,
        "loss weights: lambda1={} lambda2={} lambda3={} lambda4={}",
        w.chamfer, w.correspondence, w.deformation, w.sparsity
    )?;
    writeln!(
        log,
        "adam lr={} halved every {} epochs, weight decay {}, batch {}, epochs {}, seed {}",
        cfg.lr,
        cfg.halve_every(),
        cfg.weight_decay,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed
    )?;
    let priors = data
        .samples
        .iter()
        .map(|(_, s)| data.prior(s.category))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(profile, cfg.seed)?;
    let net = model.net.clone();
    let mut curve_text = String::from(curve_header());
    curve_text.push('\n');
    let mut log_err = None;
    let curve = train(
        &mut model.params,
        data.samples.len(),
        cfg,
        |ps, batch| {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let (e, s) = &data.samples[i];
                    sample_gradients(&net, ps, s, priors[i], w)
                        .map(|(parts, total, grads)| SampleGrad { parts, total, grads })
                        .map_err(|err| (e.id.clone(), err))
                })
                .collect();
            results
                .into_iter()
                .map(|r| r.map_err(|(id, err)| posevit_core::Error::Config(format!("sample {id}: {err}"))))
                .collect()
        },
        |st, _| {
            let _ = writeln!(curve_text, "{}", curve_row(st));
            if let Err(e) = writeln!(
                log,
                "epoch {:3} lr {:.3e} loss {:.6} (cd {:.6} corr {:.6} def {:.6} sparse {:.6})",
                st.epoch, st.lr, st.loss, st.parts.chamfer, st.parts.correspondence, st.parts.deformation, st.parts.sparsity
            ) {
                log_err.get_or_insert(e);
            }
        },
    )
    .map_err(|e| match e {
        posevit_core::Error::NonFinite(msg) => anyhow::anyhow!("training aborted: non-finite {msg}"),
        e => anyhow::Error::new(e),
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing the training log");
    }
    weights::save(&opts.out, &model)?;
    let curve_path = opts.curve.clone().unwrap_or_else(|| default_curve_path(&opts.out));
    formats::write_file(&curve_path, curve_text.as_bytes())?;
    writeln!(log, "wrote {} and {}", opts.out.display(), curve_path.display())?;
    log.flush()?;
    Ok(curve)
}

pub fn default_curve_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".curve.csv");
    PathBuf::from(s)
}
