//! File formats, datasets and the command-line front end for `posevit-core`.

pub mod bench;
pub mod cli;
pub mod dataset;
pub mod eval_cmd;
pub mod formats;
pub mod selftest;
pub mod train_cmd;
pub mod weights;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "POSEVIT_THREADS";

/// Sizes the global rayon pool from `POSEVIT_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "{THREADS_ENV} must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
