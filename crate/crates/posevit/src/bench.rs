//! Attention timing across spatial-reduction ratios.

use std::time::Instant;

use anyhow::Result;
use posevit_core::numerics::{ParamSet, Prng};
use posevit_core::pixelformer::Srma;
use posevit_core::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub reduction: usize,
    pub keys: usize,
    /// Best of the repeats, seconds.
    pub seconds: f64,
}

/// Times one attention block on a fixed `side × side × channels` input for
/// each reduction ratio, keeping the fastest of `repeats` runs.
pub fn bench_reductions(side: usize, channels: usize, ratios: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    let mut prng = Prng::new(0);
    let x = Tensor::new(&[side, side, channels], (0..side * side * channels).map(|_| prng.normal()).collect())?;
    ratios
        .iter()
        .map(|&r| {
            let mut ps = ParamSet::new();
            let attn = Srma::new(&mut ps, &mut Prng::new(1), "bench", channels, 1, r);
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                std::hint::black_box(attn.apply(&ps, &x)?);
                best = best.min(t.elapsed().as_secs_f64());
            }
            Ok(BenchRow { reduction: r, keys: (side / r) * (side / r), seconds: best })
        })
        .collect()
}

pub fn is_nonincreasing(rows: &[BenchRow]) -> bool {
    rows.windows(2).all(|w| w[1].seconds <= w[0].seconds)
}
