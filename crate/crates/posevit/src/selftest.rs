//! Quick oracle and property checks run by `selftest`.

use std::time::Instant;

use anyhow::{bail, ensure, Result};
use nalgebra::Vector3;
use posevit_core::losses::{self, LossParts, LossWeights};
use posevit_core::metrics::{iou3d, rotation_error, OrientedBox, SymmetryTag};
use posevit_core::msa::{CorrespondenceMatrix, ShapePrior};
use posevit_core::numerics::{grad_check, ChamferMode, Graph, ParamSet, Prng};
use posevit_core::pipeline::{oracle_msa, pose_from_msa, Profile};
use posevit_core::pixelformer::Srma;
use posevit_core::pointformer::{PointCloud, Pointformer, PointformerConfig};
use posevit_core::pose::{axis_angle, umeyama, Pose, RansacConfig};
use posevit_core::synth::{build_prior, make_sample, Category, GenParams, PoseRanges};
use posevit_core::Tensor;

use crate::formats;

pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<String>,
    pub seconds: f64,
}

type Check = (&'static str, fn() -> Result<String>);

pub const CHECKS: &[Check] = &[
    ("srma matches direct attention", srma_oracle),
    ("pointformer permutation equivariance", pointformer_equivariance),
    ("umeyama exact recovery", umeyama_recovery),
    ("loss fixed points", loss_fixed_points),
    ("box iou", box_iou),
    ("gradient check", gradient_check),
    ("sample self-consistency", sample_consistency),
    ("oracle injection", oracle_injection),
    ("file format round trip", format_round_trip),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let outcome = f();
            CheckResult { name, outcome, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

fn random(prng: &mut Prng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| prng.normal()).collect()).expect("shape matches")
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum::<f64>()).collect()
}

fn srma_oracle() -> Result<String> {
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let (h, w, c, heads) = (6, 5, 8, 2);
        let mut ps = ParamSet::new();
        let mut prng = Prng::new(seed);
        let attn = Srma::new(&mut ps, &mut prng, "a", c, heads, 1);
        let x = random(&mut prng, &[h, w, c]);
        let got = attn.apply(&ps, &x)?;
        let lin = |l: &posevit_core::numerics::Linear| (ps.get(l.weight).clone(), ps.get(l.bias).clone());
        let (wq, bq) = lin(&attn.q);
        let (wk, bk) = lin(&attn.k);
        let (wv, bv) = lin(&attn.v);
        let (wp, bp) = lin(&attn.proj);
        let (ws, bs) = lin(&attn.sr);
        let n = h * w;
        // R = 1: the reduction is instance norm (unit gain, zero bias) and a linear map.
        let mut normed = vec![vec![0.0; c]; n];
        for ch in 0..c {
            let mean = (0..n).map(|i| x.row(i)[ch]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.row(i)[ch] - mean).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                normed[i][ch] = (x.row(i)[ch] - mean) / (var + 1e-5).sqrt();
            }
        }
        let q: Vec<_> = (0..n).map(|i| affine(x.row(i), &wq, &bq)).collect();
        let red: Vec<_> = normed.iter().map(|r| affine(r, &ws, &bs)).collect();
        let k: Vec<_> = red.iter().map(|r| affine(r, &wk, &bk)).collect();
        let v: Vec<_> = red.iter().map(|r| affine(r, &wv, &bv)).collect();
        let dh = c / heads;
        for i in 0..n {
            let mut merged = vec![0.0; c];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let s: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in cols {
                    merged[t] = (0..n).map(|j| e[j] / z * v[j][t]).sum();
                }
            }
            let out = affine(&merged, &wp, &bp);
            for (a, b) in out.iter().zip(got.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure!(worst < 1e-10, "max abs diff {worst:e}");
    Ok(format!("max abs diff {worst:.1e}"))
}

fn pointformer_equivariance() -> Result<String> {
    let mut ps = ParamSet::new();
    let mut prng = Prng::new(5);
    let cfg = PointformerConfig { channels: [8, 8, 8, 8], heads: [1, 2, 1, 2], ..PointformerConfig::desk() };
    let net = Pointformer::new(&mut ps, &mut prng, "p", cfg)?;
    let cloud = PointCloud::new(random(&mut prng, &[48, 3]))?;
    let base = net.forward(&ps, &cloud)?.0;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        prng.shuffle(&mut perm);
        let out = net.forward(&ps, &cloud.permuted(&perm))?.0;
        worst = worst.max(out.max_abs_diff(&base.select_rows(&perm)));
    }
    ensure!(worst < 1e-10, "max abs diff {worst:e}");
    Ok(format!("max abs diff {worst:.1e}"))
}

fn umeyama_recovery() -> Result<String> {
    let mut prng = Prng::new(11);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let src = random(&mut prng, &[30, 3]);
        let axis = Vector3::new(prng.normal(), prng.normal(), prng.normal());
        let r = axis_angle(&axis, prng.uniform_in(0.0, 3.1));
        let truth = Pose::new(r, Vector3::new(prng.normal(), prng.normal(), prng.normal()), prng.uniform_in(0.1, 5.0))?;
        let est = umeyama(&src, &truth.transform_points(&src))?;
        worst.0 = worst.0.max(rotation_error(&est.rotation, &truth.rotation, SymmetryTag::None)?);
        worst.1 = worst.1.max((est.translation - truth.translation).norm());
        worst.2 = worst.2.max((est.scale - truth.scale).abs() / truth.scale);
    }
    ensure!(worst.0 <= 1e-7 && worst.1 <= 1e-9 && worst.2 <= 1e-9, "worst errors {worst:?}");
    Ok(format!("rot {:.1e}°, t {:.1e}, s {:.1e}", worst.0, worst.1, worst.2))
}

fn loss_fixed_points() -> Result<String> {
    let mut prng = Prng::new(2);
    let p = random(&mut prng, &[20, 3]);
    ensure!(losses::chamfer(&p, &p, ChamferMode::Mean)? == 0.0, "chamfer(P, P) is not zero");
    let n = 16;
    let uniform = CorrespondenceMatrix::new(Tensor::full(&[4, n], 1.0 / n as f64))?;
    let ent = losses::sparsity_reg(&uniform)?;
    ensure!((ent - (n as f64).ln()).abs() < 1e-9, "uniform entropy {ent}");
    ensure!(losses::sparsity_reg(&CorrespondenceMatrix::one_hot(&[0, 3, 5], n)?)? == 0.0, "one-hot entropy");
    let unit = LossParts { chamfer: 1.0, correspondence: 1.0, deformation: 1.0, sparsity: 1.0 };
    let total = losses::total_loss(&unit, &LossWeights::default())?;
    ensure!((total - 7.0001).abs() < 1e-12, "total {total}");
    Ok(format!("total with unit parts {total}"))
}

fn box_iou() -> Result<String> {
    let a = OrientedBox::axis_aligned([0.0; 3], [1.0; 3])?;
    let half = OrientedBox::axis_aligned([0.5, 0.0, 0.0], [1.5, 1.0, 1.0])?;
    let far = OrientedBox::axis_aligned([2.0; 3], [3.0; 3])?;
    let v = iou3d(&a, &half);
    ensure!((iou3d(&a, &a) - 1.0).abs() < 1e-9, "identical boxes");
    ensure!(iou3d(&a, &far) == 0.0, "disjoint boxes");
    ensure!((v - 1.0 / 3.0).abs() < 1e-9, "half overlap {v}");
    Ok(format!("half overlap {v:.12}"))
}

fn gradient_check() -> Result<String> {
    let mut ps = ParamSet::new();
    let mut prng = Prng::new(9);
    let attn = Srma::new(&mut ps, &mut prng, "a", 4, 2, 2);
    let x = random(&mut prng, &[16, 4]);
    let target = random(&mut prng, &[16, 4]);
    let report = grad_check(
        &ps,
        |g: &mut Graph<'_>| {
            let xi = g.input(x.clone());
            let y = attn.forward(g, xi, 4, 4)?;
            let t = g.input(target.clone());
            g.smooth_l1(y, t)
        },
        1e-4,
        8,
        1e-6,
        0,
    )?;
    ensure!(report.max_rel_err < 1e-3, "max relative error {:e} at {}", report.max_rel_err, report.worst);
    Ok(format!("{} entries, max rel err {:.1e}", report.checked, report.max_rel_err))
}

fn desk_params() -> GenParams {
    GenParams::for_profile(Profile::Desk)
}

fn sample_consistency() -> Result<String> {
    let mut worst = 0.0f64;
    for (k, cat) in Category::ALL.into_iter().enumerate() {
        let s = make_sample(cat, 40 + k as u64, Profile::Desk, &desk_params(), &PoseRanges::default())?;
        worst = worst.max(s.pose.transform_points(&s.nocs).max_abs_diff(s.points.points()));
    }
    ensure!(worst <= 1e-9, "observed vs posed NOCS differ by {worst:e}");
    Ok(format!("max abs diff {worst:.1e}"))
}

fn oracle_injection() -> Result<String> {
    let gp = desk_params();
    let mut worst = (0.0f64, 0.0f64);
    for (k, cat) in [Category::Can, Category::Laptop, Category::Mug].into_iter().enumerate() {
        let s = make_sample(cat, 70 + k as u64, Profile::Desk, &gp, &PoseRanges::default())?;
        let prior: ShapePrior = build_prior(cat, 2, 3, &gp)?;
        let (d, a) = oracle_msa(&s, &prior)?;
        let pose = pose_from_msa(&prior, &d, &a, &s.points, &RansacConfig::default())?;
        worst.0 = worst.0.max(rotation_error(&pose.rotation, &s.pose.rotation, SymmetryTag::None)?);
        worst.1 = worst.1.max((pose.translation - s.pose.translation).norm());
    }
    if worst.0 > 1e-7 || worst.1 > 1e-9 {
        bail!("worst rotation {:e}°, translation {:e}", worst.0, worst.1);
    }
    Ok(format!("rot {:.1e}°, t {:.1e}", worst.0, worst.1))
}

fn format_round_trip() -> Result<String> {
    let dir = std::env::temp_dir().join(format!("posevit-selftest-{}", std::process::id()));
    let mut prng = Prng::new(4);
    let pts = random(&mut prng, &[7, 3]);
    let img = Tensor::new(&[2, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect())?;
    let result = (|| -> Result<()> {
        formats::write_points(&dir.join("p.txt"), &pts)?;
        formats::write_image(&dir.join("i.bin"), &img)?;
        formats::write_weights(&dir.join("w.bin"), [("x", &pts)])?;
        ensure!(formats::read_points(&dir.join("p.txt"))? == pts, "points differ");
        let back = formats::read_image(&dir.join("i.bin"))?;
        ensure!(back.max_abs_diff(&img) < 1e-7, "image differs");
        ensure!(formats::read_weights(&dir.join("w.bin"))? == vec![("x".to_string(), pts.clone())], "weights differ");
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result.map(|()| "points, image, weights".to_string())
}
