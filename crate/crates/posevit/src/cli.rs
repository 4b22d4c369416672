use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use posevit_core::losses::LossWeights;
use posevit_core::pipeline::Profile;
use posevit_core::synth::Category;
use posevit_core::train::TrainConfig;

use crate::dataset::{self, GenConfig};
use crate::eval_cmd::{run_eval, EvalOptions};
use crate::train_cmd::{run_train, TrainOptions};
use crate::{bench, selftest};

#[derive(Debug, Parser)]
#[command(name = "posevit", version, about = "Category-level object pose estimation on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Train one model over all categories of a manifest.
    Train(TrainArgs),
    /// Evaluate weights on a manifest and write a precision report.
    Eval(EvalArgs),
    /// Run the built-in oracle and property checks.
    Selftest,
    /// Time the attention block across reduction ratios.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Comma-separated: bottle, bowl, camera, can, laptop, mug.
    #[arg(long, value_delimiter = ',', required = true)]
    pub categories: Vec<String>,
    #[arg(long)]
    pub per_cat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the instances averaged into each category prior.
    #[arg(long, default_value_t = 1)]
    pub prior_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub prior_instances: usize,
    /// Generate mugs without handles (making them axis-symmetric).
    #[arg(long)]
    pub no_mug_handle: bool,
    /// Limit the tilt of the object's up axis, in degrees; rotations are
    /// uniform over SO(3) when omitted.
    #[arg(long)]
    pub max_tilt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output weights file.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV [default: <out>.curve.csv].
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Precision CSV.
    #[arg(long)]
    pub report: PathBuf,
    /// Optional JSON summary with mean chamfer distance and pose failures.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Token grid side; the sequence length is its square.
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub ratios: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let categories = a.categories.iter().map(|c| Ok(Category::parse(c.trim())?)).collect::<Result<Vec<_>>>()?;
            let cfg = GenConfig {
                categories,
                per_category: a.per_cat,
                seed: a.seed,
                profile: Profile::parse(&a.profile)?,
                prior_seed: a.prior_seed,
                prior_instances: a.prior_instances,
                mug_handle: !a.no_mug_handle,
                max_tilt: a.max_tilt,
            };
            let m = dataset::generate(&cfg, &a.out)?;
            writeln!(out, "wrote {} samples and {} priors to {}", m.samples.len(), m.priors.len(), a.out.display())?;
        }
        Command::Train(a) => {
            let config = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch,
                lr: a.lr,
                seed: a.seed,
                weights: LossWeights::default(),
                ..TrainConfig::default()
            };
            run_train(&TrainOptions { manifest: a.manifest, out: a.out, curve: a.curve, config }, out)?;
        }
        Command::Eval(a) => {
            run_eval(&EvalOptions { manifest: a.manifest, weights: a.weights, report: a.report, summary: a.summary }, out)?;
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(detail) => writeln!(out, "ok    {:<40} {detail} ({:.2}s)", r.name, r.seconds)?,
                    Err(e) => {
                        failed += 1;
                        writeln!(out, "FAIL  {:<40} {e:#}", r.name)?;
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
            writeln!(out, "all {} checks passed", results.len())?;
        }
        Command::Bench(a) => {
            let rows = bench::bench_reductions(a.side, a.channels, &a.ratios, a.repeats)?;
            writeln!(out, "tokens {}  channels {}", a.side * a.side, a.channels)?;
            writeln!(out, "{:>3} {:>6} {:>12}", "R", "keys", "seconds")?;
            for r in &rows {
                writeln!(out, "{:>3} {:>6} {:>12.6}", r.reduction, r.keys, r.seconds)?;
            }
            let mono = bench::is_nonincreasing(&rows);
            writeln!(out, "nonincreasing in R: {}", if mono { "yes" } else { "no" })?;
            if !mono {
                bail!("forward time is not nonincreasing in the reduction ratio");
            }
        }
    }
    Ok(())
}
