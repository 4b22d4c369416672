mod common;

use common::*;
use posevit_core::numerics::{
    avg_pool_tokens, bilinear_upsample, conv3x3, gelu, grad_check, init_params, instance_norm, mlp_apply, softmax,
    InitScheme, LinearParams, ParamSet, Prng,
};
use posevit_core::Tensor;

#[test]
fn mlp_matches_loops_on_random_layer() {
    let mut p = Prng::new(21);
    let lp = LinearParams::new(randn(&mut p, &[7, 5]), randn(&mut p, &[5])).unwrap();
    let x = randn(&mut p, &[1, 7]);
    let got = mlp_apply(&lp, &x).unwrap();
    let want: Vec<f64> = (0..5).map(|j| lp.bias.data()[j] + (0..7).map(|k| x.data()[k] * lp.weight.at(k, j)).sum::<f64>()).collect();
    assert!(max_diff(&[want], &got) < 1e-12);
}

#[test]
fn instance_norm_two_tokens() {
    let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
    let y = instance_norm(&x, &[1.0], &[0.0]).unwrap();
    let s = 1.0 / (1.0 + 1e-5f64).sqrt();
    assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);
    assert!((s - 1.0).abs() < 1e-5);
}

#[test]
fn gelu_against_integrated_normal_cdf() {
    let g = gelu(&Tensor::vector(vec![1.0, -10.0, 0.0, -0.7, 2.3]));
    assert!((g.data()[0] - 0.841345).abs() < 1e-6);
    assert!((g.data()[0] - common::gelu(1.0)).abs() < 1e-10);
    assert!(g.data()[1].abs() < 1e-9);
    assert_eq!(g.data()[2], 0.0);
    for (x, y) in [-0.7, 2.3].iter().zip(&g.data()[3..]) {
        assert!((y - common::gelu(*x)).abs() < 1e-10);
    }
}

#[test]
fn softmax_matches_compensated_oracle() {
    let mut p = Prng::new(3);
    for _ in 0..50 {
        let v: Vec<f64> = (0..4).map(|_| 5.0 * p.normal()).collect();
        let got = softmax(&Tensor::vector(v.clone()), 0).unwrap();
        // Kahan-summed exponentials relative to the first entry.
        let e: Vec<f64> = v.iter().map(|x| (x - v[0]).exp()).collect();
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in &e {
            let y = x - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        for (g, x) in got.data().iter().zip(&e) {
            assert!((g - x / s).abs() < 1e-12);
        }
    }
    let big = softmax(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
    assert_eq!(big.data(), &[0.5, 0.5]);
}

#[test]
fn conv3x3_matches_direct_loops() {
    let mut p = Prng::new(8);
    let (h, w, ci, co) = (5, 4, 3, 2);
    let lp = LinearParams::new(randn(&mut p, &[9 * ci, co]), randn(&mut p, &[co])).unwrap();
    let x = randn(&mut p, &[h, w, ci]);
    let got = conv3x3(&lp, &x).unwrap();
    assert_eq!(got.shape(), &[h, w, co]);
    let want = common::conv3x3(&rows(&x.clone().as_matrix()), h, w, &lp.weight, &lp.bias);
    assert!(max_diff(&want, &got.as_matrix()) < 1e-12);
}

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    // Source coordinate for output index i is (i + 0.5)/2 - 0.5, clamped to [0, 1]:
    // i = 0 → 0 (clamped from -0.25), 1 → 0.25, 2 → 0.75, 3 → 1 (clamped from 1.25).
    let src = [[1.0, 2.0], [3.0, 5.0]];
    let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
    let y = bilinear_upsample(&x, 4, 4).unwrap();
    let coord = [0.0, 0.25, 0.75, 1.0];
    for (i, &u) in coord.iter().enumerate() {
        for (j, &v) in coord.iter().enumerate() {
            let top = src[0][0] * (1.0 - v) + src[0][1] * v;
            let bot = src[1][0] * (1.0 - v) + src[1][1] * v;
            let want = top * (1.0 - u) + bot * u;
            assert!((y.data()[i * 4 + j] - want).abs() < 1e-15, "({i},{j})");
        }
    }
}

#[test]
fn avg_pool_is_order_free() {
    let x = Tensor::from_rows(&[[0.0, 1.0], [2.0, 5.0], [4.0, 0.0]]).unwrap();
    let y = avg_pool_tokens(&x).unwrap();
    assert_eq!(y.data(), &[2.0, 2.0]);
    let z = avg_pool_tokens(&x.select_rows(&[2, 0, 1])).unwrap();
    assert_eq!(y, z);
    assert!(avg_pool_tokens(&Tensor::zeros(&[0, 2])).is_err());
}

#[test]
fn init_draws_are_centred_and_bounded() {
    let t = init_params(&mut Prng::new(1), &[100_000], InitScheme::FanBalancedUniform { fan_in: 3, fan_out: 3 });
    let mean = t.sum() / t.len() as f64;
    assert!(mean.abs() < 0.01, "{mean}");
    assert!(t.max_abs() <= 1.0);
}

#[test]
fn gradcheck_linear_softmax_cross_entropy() {
    let mut ps = ParamSet::new();
    let mut p = Prng::new(4);
    let w = ps.add("w", randn(&mut p, &[5, 4]));
    let b = ps.add("b", randn(&mut p, &[4]));
    let x = randn(&mut p, &[6, 5]);
    let targets = [0, 3, 1, 1, 2, 0];
    let report = grad_check(
        &ps,
        |g| {
            let xi = g.input(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let logits = g.linear(xi, wv, Some(bv))?;
            let probs = g.softmax_rows(logits);
            g.cross_entropy(probs, &targets)
        },
        1e-4,
        usize::MAX,
        1e-8,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
    assert_eq!(report.checked, 24);
}
