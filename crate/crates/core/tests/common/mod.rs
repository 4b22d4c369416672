//! Helpers shared by the integration tests.
#![allow(dead_code)]

use posevit_core::numerics::{Linear, ParamSet, Prng};
use posevit_core::Tensor;

pub fn randn(prng: &mut Prng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| prng.normal()).collect()).unwrap()
}

pub fn uniform(prng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| prng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Plain nested-loop matrix product of `[n, k]` rows with a `[k, m]` matrix.
pub fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    let (k, m) = (b.shape()[0], b.shape()[1]);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..m).map(|j| (0..k).map(|t| row[t] * b.at(t, j)).sum()).collect()
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `x·W + b` for a registered linear layer, by loops.
pub fn dense(ps: &ParamSet, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = ps.get(l.weight);
    let b = ps.get(l.bias);
    matmul(x, w).into_iter().map(|r| r.iter().zip(b.data()).map(|(v, c)| v + c).collect()).collect()
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn phi(x: f64) -> f64 {
    if x < -12.0 {
        return 0.0;
    }
    let lo = -12.0;
    let n = 20_000;
    let h = (x - lo) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..n {
        let t = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

pub fn gelu(x: f64) -> f64 {
    x * phi(x)
}

/// Per-channel normalisation over rows with unit gain and zero bias.
pub fn instance_norm(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let c = x[0].len();
    let mut out = x.to_vec();
    for ch in 0..c {
        let mean = x.iter().map(|r| r[ch]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[ch] - mean).powi(2)).sum::<f64>() / n;
        for (o, r) in out.iter_mut().zip(x) {
            o[ch] = (r[ch] - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Zero-padded stride-1 3×3 cross-correlation with kernel rows `(ky, kx, c_in)`.
pub fn conv3x3(x: &[Vec<f64>], h: usize, w: usize, kernel: &Tensor, bias: &Tensor) -> Vec<Vec<f64>> {
    let c_in = x[0].len();
    let c_out = kernel.cols();
    let mut out = vec![vec![0.0; c_out]; h * w];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..c_out {
                let mut s = bias.data()[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for c in 0..c_in {
                            s += x[sy as usize * w + sx as usize][c] * kernel.at((ky * 3 + kx) * c_in + c, o);
                        }
                    }
                }
                out[y * w + xx][o] = s;
            }
        }
    }
    out
}
