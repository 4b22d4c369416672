//! Plain (tape-free) forms of the shared neural primitives.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, MixPlan, PatchGeom};
use super::params::LinearParams;
use super::tensor::Tensor;
use crate::{Error, Result};

/// `y[…, j] = Σ_k x[…, k] · weight[k, j] + bias[j]`.
pub fn mlp_apply(p: &LinearParams, x: &Tensor) -> Result<Tensor> {
    if x.cols() != p.in_dim() {
        return Err(Error::shape("mlp_apply", p.weight.shape(), x.shape()));
    }
    let (m, k, n) = (x.rows(), p.in_dim(), p.out_dim());
    let mut y = kernels::matmul(x.data(), p.weight.data(), m, k, n);
    kernels::add_row_vector(&mut y, p.bias.data());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = n;
    Tensor::new(&shape, y)
}

/// Normalises every channel over the token axis, then applies `gain`, `bias`.
pub fn instance_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("instance_norm", c, (gain.len(), bias.len())));
    }
    if r == 0 {
        return Err(Error::EmptyInput("instance_norm"));
    }
    let (mut y, _) = kernels::instance_norm_forward(x.data(), r, c);
    for row in y.chunks_exact_mut(c) {
        for j in 0..c {
            row[j] = row[j] * gain[j] + bias[j];
        }
    }
    Tensor::new(x.shape(), y)
}

/// Exact-erf GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(kernels::gelu)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax axis", shape.len(), axis));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            for k in 0..n {
                lane[k] = out[at(k)];
            }
            kernels::softmax_rows_in_place(&mut lane, n);
            for k in 0..n {
                out[at(k)] = lane[k];
            }
        }
    }
    Tensor::new(shape, out)
}

/// Stride-1, zero-padded 3×3 cross-correlation over `x: [H, W, C_in]`.
///
/// `p.weight` is `[9·C_in, C_out]`, rows ordered `(ky, kx, c_in)`.
pub fn conv3x3(p: &LinearParams, x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = grid_dims(x, "conv3x3")?;
    if p.in_dim() != 9 * c {
        return Err(Error::shape("conv3x3", [9 * c, p.out_dim()], p.weight.shape()));
    }
    let geom = PatchGeom { h, w, c, k: 3, stride: 1, pad: 1 };
    let cols = kernels::im2col(x.data(), &geom);
    let n = p.out_dim();
    let mut y = kernels::matmul(&cols, p.weight.data(), h * w, 9 * c, n);
    kernels::add_row_vector(&mut y, p.bias.data());
    Tensor::new(&[h, w, n], y)
}

/// Half-pixel-centre bilinear resize of `x: [h, w, C]` to `[out_h, out_w, C]`.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w, c] = grid_dims(x, "bilinear_upsample")?;
    if out_h < h || out_w < w {
        return Err(Error::shape("bilinear_upsample", [h, w], [out_h, out_w]));
    }
    let y = MixPlan::bilinear(h, w, out_h, out_w).apply(x.data(), c);
    Tensor::new(&[out_h, out_w, c], y)
}

/// Per-channel mean over tokens of `x: [N, C]`.
pub fn avg_pool_tokens(x: &Tensor) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    if r == 0 {
        return Err(Error::EmptyInput("avg_pool_tokens"));
    }
    let s: Vec<f64> = kernels::column_sums(x.data(), c).into_iter().map(|v| v / r as f64).collect();
    Ok(Tensor::vector(s))
}

fn grid_dims(x: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *x.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::shape(op, "[H, W, C]", x.shape())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Prng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut p = Prng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| p.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn mlp_identity_and_sum() {
        let id = LinearParams::new(Tensor::identity(2), Tensor::zeros(&[2])).unwrap();
        let x = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(mlp_apply(&id, &x).unwrap().data(), &[3.0, 4.0]);
        let sum = LinearParams::new(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap(), Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(mlp_apply(&sum, &Tensor::vector(vec![2.0, 3.0])).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mlp_matches_double_loop() {
        let w = random(&[7, 5], 1);
        let b = random(&[5], 2);
        let x = random(&[7], 3);
        let y = mlp_apply(&LinearParams::new(w.clone(), b.clone()).unwrap(), &x).unwrap();
        for j in 0..5 {
            let mut s = b.data()[j];
            for k in 0..7 {
                s += x.data()[k] * w.at(k, j);
            }
            assert!((y.data()[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_reports_both_shapes() {
        let p = LinearParams::init(&mut Prng::new(0), 3, 2);
        let err = mlp_apply(&p, &Tensor::zeros(&[4])).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[3, 2]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn instance_norm_cases() {
        let x = Tensor::full(&[4, 2], 3.5);
        let y = instance_norm(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let y = instance_norm(&x, &[1.0], &[0.0]).unwrap();
        // variance 1, so y = ±1/sqrt(1 + 1e-5)
        let want = 1.0 / libm::sqrt(1.0 + 1e-5);
        assert!((y.data()[0] + want).abs() < 1e-15);
        assert!((y.data()[1] - want).abs() < 1e-15);

        let x = random(&[50, 6], 7);
        let y = instance_norm(&x, &[1.0; 6], &[0.0; 6]).unwrap();
        for c in 0..6 {
            let m: f64 = (0..50).map(|r| y.at(r, c)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&Tensor::vector(vec![0.0, 1.0, -10.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-9);
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = random(&[3, 4, 5], 11);
        let y = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|k| y.data()[(o * 4 + k) * 5 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn conv3x3_cases() {
        // identity kernel: centre tap (ky=1, kx=1) maps channel c to c
        let c = 2;
        let mut k = Tensor::zeros(&[9 * c, c]);
        for ch in 0..c {
            k.data_mut()[(4 * c + ch) * c + ch] = 1.0;
        }
        let p = LinearParams::new(k, Tensor::zeros(&[c])).unwrap();
        let x = random(&[4, 5, c], 3);
        assert!(conv3x3(&p, &x).unwrap().max_abs_diff(&x) < 1e-15);

        let ones = LinearParams::new(Tensor::full(&[9, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let y = conv3x3(&ones, &Tensor::full(&[3, 3, 1], 1.0)).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);

        let bad = LinearParams::new(Tensor::zeros(&[9, 1]), Tensor::zeros(&[1])).unwrap();
        assert!(conv3x3(&bad, &x).is_err());
    }

    #[test]
    fn upsample_cases() {
        let y = bilinear_upsample(&Tensor::full(&[3, 2, 2], 0.25), 7, 9).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = bilinear_upsample(&Tensor::new(&[1, 1, 1], vec![2.5]).unwrap(), 4, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        // 2×2 → 4×4: per-axis source coordinates are (-0.25→0, 0.25, 0.75, 1.25→1)
        let x = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 4, 4).unwrap();
        let s = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let want = 2.0 * s[i] + s[j];
                assert!((y.data()[i * 4 + j] - want).abs() < 1e-15);
            }
        }
        assert!(bilinear_upsample(&x, 1, 4).is_err());
    }

    #[test]
    fn avg_pool_cases() {
        let y = avg_pool_tokens(&Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert!(avg_pool_tokens(&Tensor::zeros(&[0, 3])).is_err());
        let one = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(avg_pool_tokens(&one).unwrap().data(), &[1.0, 2.0, 3.0]);
    }
}
