//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 2 4`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use posevit::dataset::Dataset;
use posevit_core::losses::{chamfer, correspondence_loss, sparsity_reg, total_loss, LossParts, LossWeights};
use posevit_core::metrics::{iou3d, precision_report, EvalRecord, OrientedBox, SymmetryTag, STANDARD_THRESHOLDS};
use posevit_core::msa::{CorrespondenceMatrix, Msa, MsaConfig, NocsCoords};
use posevit_core::numerics::{grad_check, ChamferMode, Graph, Linear, ParamId, ParamSet, Prng, Var};
use posevit_core::pipeline::{oracle_msa, pose_from_msa, Model, Profile};
use posevit_core::pixelformer::{Cffn, Level, Pixelformer, PixelformerConfig, Srma};
use posevit_core::pointformer::{Cwmha, PointCloud, PointFfn, Pointformer, PointformerConfig};
use posevit_core::pose::{ransac_umeyama, umeyama, Pose, RansacConfig};
use posevit_core::synth::{build_prior, make_sample, Category, GenParams, PoseRanges};
use posevit_core::Tensor;

/// Settings of the end-to-end run.
const E2E_CATEGORIES: &str = "can,bowl";
const E2E_TRAIN_PER_CAT: &str = "200";
const E2E_TEST_PER_CAT: &str = "25";
const E2E_EPOCHS: &str = "20";
const E2E_LR: &str = "1e-3";
const E2E_MAX_TILT: &str = "45";
const E2E_BUDGET_SECS: f64 = 30.0 * 60.0;

fn randn(p: &mut Prng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| p.normal()).collect()).unwrap()
}

fn uniform(p: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| p.uniform_in(lo, hi)).collect()).unwrap()
}

fn dense(ps: &ParamSet, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (w, b) = (ps.get(l.weight), ps.get(l.bias));
    x.iter()
        .map(|r| (0..l.out_dim).map(|j| b.data()[j] + (0..l.in_dim).map(|t| r[t] * w.at(t, j)).sum::<f64>()).collect())
        .collect()
}

fn instance_norm(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, c) = (x.len() as f64, x[0].len());
    let mut out = x.to_vec();
    for k in 0..c {
        let mean = x.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
        for (o, r) in out.iter_mut().zip(x) {
            o[k] = (r[k] - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn random_rotation(p: &mut Prng) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(p.normal(), p.normal(), p.normal(), p.normal());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Rotation angle in degrees, accurate for tiny angles.
fn angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let chord = (a - b).norm() / 2f64.sqrt();
    (2.0 * (chord / 2.0).min(1.0).asin()).to_degrees()
}

fn apply(pose: &Pose, pts: &Tensor) -> Tensor {
    let mut out = pts.clone();
    for i in 0..pts.rows() {
        let v = pose.scale * (pose.rotation * Vector3::from_row_slice(pts.row(i))) + pose.translation;
        out.row_mut(i).copy_from_slice(v.as_slice());
    }
    out
}

fn shape_contract() -> Result<String> {
    let t0 = Instant::now();
    let mut ps = ParamSet::new();
    let pixel = Pixelformer::new(&mut ps, &mut Prng::new(0), "pixel", PixelformerConfig::paper())?;
    let img = uniform(&mut Prng::new(1), &[256, 256, 3], 0.0, 1.0);
    let pyramid = pixel.encode(&ps, &img)?;
    let shapes: Vec<Vec<usize>> = pyramid.levels.iter().map(|t| t.shape().to_vec()).collect();
    ensure!(shapes == [vec![64, 64, 32], vec![32, 32, 64], vec![16, 16, 160], vec![8, 8, 256]], "pyramid {shapes:?}");
    let app = pixel.decode(&ps, &pyramid)?;
    ensure!(app.0.shape() == [256, 256, 32], "decoder {:?}", app.0.shape());
    let pixel_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let point = Pointformer::new(&mut ps, &mut Prng::new(2), "point", PointformerConfig::paper())?;
    let cloud = PointCloud::new(randn(&mut Prng::new(3), &[1024, 3]))?;
    let levels = point.encode(&ps, &cloud)?;
    let shapes: Vec<Vec<usize>> = levels.iter().map(|t| t.shape().to_vec()).collect();
    ensure!(shapes == [vec![1024, 32], vec![1024, 64], vec![1024, 160], vec![1024, 256]], "point levels {shapes:?}");
    let geo = point.decode(&ps, &levels)?;
    ensure!(geo.0.shape() == [1024, 64], "point decoder {:?}", geo.0.shape());
    let point_secs = t1.elapsed().as_secs_f64();
    ensure!(pixel_secs <= 10.0 && point_secs <= 10.0, "forward took {pixel_secs:.2}s / {point_secs:.2}s");
    Ok(format!("pixel forward {pixel_secs:.2}s, point forward {point_secs:.2}s"))
}

fn naive_attention(ps: &ParamSet, a: &Srma, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q = dense(ps, &a.q, x);
    let reduced = dense(ps, &a.sr, &instance_norm(x));
    let k = dense(ps, &a.k, &reduced);
    let v = dense(ps, &a.v, &reduced);
    let dh = a.dim / a.heads;
    let n = x.len();
    let mut merged = vec![vec![0.0; a.dim]; n];
    for i in 0..n {
        for hd in 0..a.heads {
            let o = hd * dh;
            let scores: Vec<f64> =
                (0..n).map(|j| (0..dh).map(|t| q[i][o + t] * k[j][o + t]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let pr = softmax(&scores);
            for t in 0..dh {
                merged[i][o + t] = (0..n).map(|j| pr[j] * v[j][o + t]).sum();
            }
        }
    }
    dense(ps, &a.proj, &merged)
}

fn attention_oracle() -> Result<String> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut p = Prng::new(seed);
        let side = [8, 12, 16][seed as usize % 3];
        let (c, heads) = [(8, 1), (8, 2), (12, 3), (16, 4)][seed as usize % 4];
        let mut ps = ParamSet::new();
        let attn = Srma::new(&mut ps, &mut p, "attn", c, heads, 1);
        let x = randn(&mut p, &[side, side, c]);
        let got = attn.apply(&ps, &x)?.as_matrix();
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
        let want = naive_attention(&ps, &attn, &rows);
        for (i, r) in want.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                worst = worst.max((v - got.at(i, j)).abs());
            }
        }
    }
    ensure!(worst <= 1e-10, "max-abs {worst:e}");
    Ok(format!("20 seeds, up to 256 tokens, max-abs {worst:.1e}"))
}

fn permutation_equivariance() -> Result<String> {
    let mut ps = ParamSet::new();
    let net = Pointformer::new(&mut ps, &mut Prng::new(4), "point", PointformerConfig::paper())?;
    let mut p = Prng::new(5);
    let pts = randn(&mut p, &[256, 3]);
    let base = net.forward(&ps, &PointCloud::new(pts.clone())?)?.0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..256).collect();
        p.shuffle(&mut perm);
        let out = net.forward(&ps, &PointCloud::new(pts.select_rows(&perm))?)?.0;
        worst = worst.max(out.max_abs_diff(&base.select_rows(&perm)));
    }
    ensure!(worst <= 1e-10, "max-abs {worst:e}");
    Ok(format!("100 permutations of 256 points, max-abs {worst:.1e}"))
}

fn umeyama_ransac() -> Result<String> {
    let t0 = Instant::now();
    let mut p = Prng::new(6);
    let (mut wr, mut wt, mut ws) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let src = uniform(&mut p, &[100, 3], -1.0, 1.0);
        let t = Vector3::new(p.uniform_in(-2.0, 2.0), p.uniform_in(-2.0, 2.0), p.uniform_in(-2.0, 2.0));
        let gt = Pose::new(random_rotation(&mut p), t, p.uniform_in(0.1, 3.0))?;
        let est = umeyama(&src, &apply(&gt, &src))?;
        wr = wr.max(angle_deg(&est.rotation, &gt.rotation));
        wt = wt.max((est.translation - gt.translation).norm());
        ws = ws.max((est.scale - gt.scale).abs() / gt.scale);
    }
    ensure!(wr <= 1e-7 && wt <= 1e-9 && ws <= 1e-9, "clean worst rot {wr:e}° t {wt:e} s {ws:e}");

    let mut good = 0;
    for seed in 0..100u64 {
        let mut p = Prng::new(10_000 + seed);
        let src = uniform(&mut p, &[200, 3], -0.5, 0.5);
        let t = Vector3::new(p.uniform_in(-1.0, 1.0), p.uniform_in(-1.0, 1.0), p.uniform_in(0.5, 2.0));
        let gt = Pose::new(random_rotation(&mut p), t, p.uniform_in(0.1, 2.0))?;
        let mut dst = apply(&gt, &src);
        let mut idx: Vec<usize> = (0..200).collect();
        p.shuffle(&mut idx);
        for &i in &idx[..60] {
            for c in 0..3 {
                dst.row_mut(i)[c] = p.uniform_in(-3.0, 3.0);
            }
        }
        let out = ransac_umeyama(&src, &dst, &RansacConfig { seed, ..Default::default() })?;
        let e = &out.pose;
        if angle_deg(&e.rotation, &gt.rotation) < 1.0
            && (e.translation - gt.translation).norm() < 0.01
            && (e.scale - gt.scale).abs() / gt.scale < 0.01
        {
            good += 1;
        }
    }
    ensure!(good >= 99, "{good}/100 outlier trials recovered");

    let mut reflections = 0;
    for _ in 0..200 {
        let src = randn(&mut p, &[4, 3]);
        let est = umeyama(&src, &src.map(|v| -v))?;
        if est.rotation.determinant() < 0.0 {
            reflections += 1;
        }
    }
    ensure!(reflections == 0, "{reflections} reflections");
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs <= 30.0, "took {secs:.1}s");
    Ok(format!("clean rot {wr:.1e}° t {wt:.1e} s {ws:.1e}; outliers {good}/100; {secs:.2}s"))
}

fn probe(g: &mut Graph<'_>, y: Var, seed: u64) -> posevit_core::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.input(randn(&mut Prng::new(seed), &shape));
    let m = g.mul(y, r)?;
    Ok(g.sum_all(m))
}

fn gradient_suite() -> Result<String> {
    type Probe<'a> = Box<dyn Fn(&mut Graph<'_>) -> posevit_core::Result<Var> + 'a>;
    let mut worst = (0.0f64, String::new());
    let mut record = |name: &str, ps: &ParamSet, per: usize, h: f64, f: Probe<'_>| -> Result<()> {
        let r = grad_check(ps, f, h, per, 1e-5, 7)?;
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("{name} {}", r.worst));
        }
        Ok(())
    };
    let input = |ps: &mut ParamSet, name: &str, shape: &[usize], seed: u64| -> ParamId {
        ps.add(name, randn(&mut Prng::new(seed), shape))
    };

    let mut ps = ParamSet::new();
    let m = Srma::new(&mut ps, &mut Prng::new(1), "srma", 8, 2, 2);
    let x = input(&mut ps, "x", &[36, 8], 2);
    record("srma", &ps, 6, 1e-5, Box::new(|g| { let v = g.param(x); let y = m.forward(g, v, 6, 6)?; probe(g, y, 3) }))?;

    let mut ps = ParamSet::new();
    let m = Cffn::new(&mut ps, &mut Prng::new(4), "cffn", 6, 12);
    let x = input(&mut ps, "x", &[25, 6], 5);
    record("cffn", &ps, 6, 1e-5, Box::new(|g| { let v = g.param(x); let y = m.forward(g, v, 5, 5)?; probe(g, y, 6) }))?;

    let mut ps = ParamSet::new();
    let cfg = PixelformerConfig { layers: 1, out_dim: 8, ..PixelformerConfig::desk() };
    let pix = Pixelformer::new(&mut ps, &mut Prng::new(8), "pixel", cfg)?;
    let img = ps.add("img", uniform(&mut Prng::new(9), &[32, 32, 3], 0.0, 1.0));
    let grids = [(8, 8), (4, 4), (2, 2), (1, 1)];
    let lv: Vec<ParamId> =
        (0..4).map(|i| input(&mut ps, &format!("level{i}"), &[grids[i].0 * grids[i].1, pix.cfg.stages[i].channels], 20 + i as u64)).collect();
    record("pixel encoder", &ps, 3, 1e-5, Box::new(|g| {
        let v = g.param(img);
        let levels = pix.encode_graph(g, v, 32, 32)?;
        let mut acc = probe(g, levels[0].var, 10)?;
        for (k, l) in levels.iter().enumerate().skip(1) {
            let p = probe(g, l.var, 10 + k as u64)?;
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    }))?;
    record("pixel decoder", &ps, 3, 1e-5, Box::new(|g| {
        let levels: Vec<Level> = lv.iter().zip(grids).map(|(&id, (h, w))| Level { var: g.param(id), h, w }).collect();
        let y = pix.decode_graph(g, &levels, 32, 32)?;
        probe(g, y, 14)
    }))?;

    let mut ps = ParamSet::new();
    let m = Cwmha::new(&mut ps, &mut Prng::new(13), "cwmha", 6, 3)?;
    let x = input(&mut ps, "x", &[10, 6], 14);
    record("cwmha", &ps, 6, 1e-5, Box::new(|g| { let v = g.param(x); let y = m.forward(g, v)?; probe(g, y, 15) }))?;

    let mut ps = ParamSet::new();
    let m = PointFfn::new(&mut ps, &mut Prng::new(16), "point ffn", 5, 10);
    let x = input(&mut ps, "x", &[9, 5], 17);
    record("point ffn", &ps, 6, 1e-5, Box::new(|g| { let v = g.param(x); let y = m.forward(g, v)?; probe(g, y, 18) }))?;

    let mut ps = ParamSet::new();
    let cfg = PointformerConfig { layers: 1, lift_dim: 8, out_dim: 8, ..PointformerConfig::desk() };
    let net = Pointformer::new(&mut ps, &mut Prng::new(19), "point", cfg)?;
    let pts = input(&mut ps, "points", &[12, 3], 20);
    record("pointformer", &ps, 3, 1e-5, Box::new(|g| {
        let v = g.param(pts);
        let levels = net.encode_graph(g, v)?;
        let y = net.decode_graph(g, &levels)?;
        probe(g, y, 21)
    }))?;

    let mut ps = ParamSet::new();
    let cfg = MsaConfig {
        app_dim: 6,
        geo_dim: 5,
        inst_hidden: 8,
        cat_hidden: 8,
        cat_local: 6,
        global_dim: 10,
        head_hidden: [12, 8],
        prior_points: 7,
    };
    let msa = Msa::new(&mut ps, &mut Prng::new(23), "msa", cfg)?;
    let (app, geo, prior) = (input(&mut ps, "app", &[9, 6], 24), input(&mut ps, "geo", &[9, 5], 25), input(&mut ps, "prior", &[7, 3], 26));
    record("msa", &ps, 4, 1e-5, Box::new(|g| {
        let (a, b, c) = (g.param(app), g.param(geo), g.param(prior));
        let v = msa.forward_graph(g, a, b, c)?;
        let p1 = probe(g, v.nocs, 27)?;
        let p2 = probe(g, v.deformation, 28)?;
        let p3 = probe(g, v.correspondence, 29)?;
        let s = g.add(p1, p2)?;
        g.add(s, p3)
    }))?;

    let model = Model::new(Profile::Desk, 3)?;
    let gp = GenParams::for_profile(Profile::Desk);
    let sample = make_sample(Category::Bowl, 30, Profile::Desk, &gp, &PoseRanges::default())?;
    let pr = build_prior(Category::Bowl, 4, 1, &gp)?;
    let weights = LossWeights { sparsity: 0.1, ..LossWeights::default() };
    // Chamfer nearest-neighbour switches lie within 1e-5 of some weights.
    record("total loss", &model.params, 1, 1e-6, Box::new(|g| Ok(model.net.loss_graph(g, &sample, &pr, &weights)?.1.total)))?;

    ensure!(worst.0 < 1e-3, "worst rel err {:.2e} at {}", worst.0, worst.1);
    Ok(format!("worst rel err {:.1e} ({})", worst.0, worst.1))
}

fn loss_fixed_points() -> Result<String> {
    let mut p = Prng::new(7);
    let pts = randn(&mut p, &[40, 3]);
    ensure!(chamfer(&pts, &pts, ChamferMode::Sum)? == 0.0 && chamfer(&pts, &pts, ChamferMode::Mean)? == 0.0, "chamfer(P, P) != 0");
    let flat = sparsity_reg(&CorrespondenceMatrix::new(Tensor::full(&[8, 1024], 1.0 / 1024.0))?)?;
    ensure!((flat - 1024f64.ln()).abs() <= 1e-9, "uniform entropy {flat}");
    ensure!(sparsity_reg(&CorrespondenceMatrix::new(Tensor::identity(16))?)? == 0.0, "one-hot entropy");
    let gt = Tensor::zeros(&[1, 3]);
    for e in [0.1, -0.1] {
        let v = correspondence_loss(&NocsCoords(Tensor::from_rows(&[[e, 0.0, 0.0]])?), &gt)?;
        ensure!(v == 0.05, "smooth-L1 at {e}: {v}");
    }
    let ones = LossParts { chamfer: 1.0, correspondence: 1.0, deformation: 1.0, sparsity: 1.0 };
    let total = total_loss(&ones, &LossWeights::default())?;
    ensure!((total - 7.0001).abs() < 1e-12, "total {total}");
    Ok(format!("entropy {flat:.6}, total {total}"))
}

fn metric_sanity() -> Result<String> {
    let mut p = Prng::new(8);
    let bounds = (Vector3::new(-0.3, -0.5, -0.2), Vector3::new(0.3, 0.5, 0.2));
    let records: Vec<EvalRecord> = (0..30)
        .map(|i| {
            let t = Vector3::new(p.uniform_in(-0.2, 0.2), p.uniform_in(-0.2, 0.2), p.uniform_in(0.6, 1.2));
            let gt = Pose::new(random_rotation(&mut p), t, p.uniform_in(0.1, 0.4)).unwrap();
            let (category, sym) = if i % 2 == 0 { ("laptop", SymmetryTag::None) } else { ("bottle", SymmetryTag::AxisY) };
            EvalRecord { category: category.into(), sym, pred: Some(gt), gt, pred_bounds: bounds, gt_bounds: bounds }
        })
        .collect();
    let report = precision_report(&records, &[], &STANDARD_THRESHOLDS);
    ensure!(report.mean.as_ref().is_some_and(|m| m.iter().all(|&v| v == 1.0)), "ground truth precision {:?}", report.mean);
    for (name, f) in &report.rows {
        ensure!(f.as_ref().is_some_and(|f| f.iter().all(|&v| v == 1.0)), "{name} precision {f:?}");
    }
    let unit = OrientedBox::axis_aligned([0.0; 3], [1.0; 3])?;
    let same = iou3d(&unit, &unit);
    let apart = iou3d(&unit, &OrientedBox::axis_aligned([1.5, 0.0, 0.0], [2.5, 1.0, 1.0])?);
    let half = iou3d(&unit, &OrientedBox::axis_aligned([0.5, 0.0, 0.0], [1.5, 1.0, 1.0])?);
    ensure!((same - 1.0).abs() <= 1e-9 && apart == 0.0 && (half - 1.0 / 3.0).abs() <= 1e-9, "iou {same} {apart} {half}");
    Ok(format!("precision 1.0 on 30 records; iou {same} / {apart} / {half:.12}"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_posevit")
}

fn run_cli(args: &[&str], log: &Path) -> Result<String> {
    let out = Command::new(bin()).args(args).output().with_context(|| format!("running {args:?}"))?;
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let mut all = text.clone();
    all.push_str(&String::from_utf8_lossy(&out.stderr));
    let mut f = fs::OpenOptions::new().create(true).append(true).open(log)?;
    writeln!(f, "$ posevit {}\n{all}", args.join(" "))?;
    ensure!(out.status.success(), "posevit {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    Ok(text)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn end_to_end(work: &Path) -> Result<String> {
    let log = work.join("e2e.log");
    let (train_dir, test_dir) = (work.join("train"), work.join("test"));
    let weights = work.join("weights.bin");
    let t0 = Instant::now();
    for (dir, per_cat, seed) in [(&train_dir, E2E_TRAIN_PER_CAT, "1"), (&test_dir, E2E_TEST_PER_CAT, "2")] {
        run_cli(
            &["gen", "--categories", E2E_CATEGORIES, "--per-cat", per_cat, "--seed", seed, "--profile", "desk", "--max-tilt", E2E_MAX_TILT, "--out", p(dir)],
            &log,
        )?;
    }
    run_cli(
        &["train", "--manifest", p(&train_dir.join("manifest")), "--epochs", E2E_EPOCHS, "--lr", E2E_LR, "--batch", "8", "--seed", "0", "--out", p(&weights)],
        &log,
    )?;
    let report = work.join("report.csv");
    let summary = work.join("summary.json");
    run_cli(&["eval", "--manifest", p(&test_dir.join("manifest")), "--weights", p(&weights), "--report", p(&report), "--summary", p(&summary)], &log)?;
    let secs = t0.elapsed().as_secs_f64();

    // Recompute the headline numbers from the saved weights.
    let model = posevit::weights::load(&weights)?;
    let data = Dataset::load(&test_dir)?;
    let outcome = posevit::eval_cmd::evaluate(&model, &data, &Default::default())?;
    let n = outcome.records.len();
    let hits = outcome
        .records
        .iter()
        .filter(|(_, r)| r.passes(&posevit_core::metrics::Threshold::Pose { deg: 10.0, cm: 10.0 }))
        .count();
    let frac = hits as f64 / n as f64;
    let cd = outcome.summary.mean_chamfer;
    let threads = std::env::var(posevit::THREADS_ENV).unwrap_or_else(|_| format!("{}", std::thread::available_parallelism().map_or(1, |n| n.get())));
    let detail = format!(
        "{hits}/{n} within 10°10cm ({:.0}%), mean CD {cd:.2e}, {:.1} min on {threads} thread(s)",
        100.0 * frac,
        secs / 60.0
    );
    ensure!(n == 50, "{n} held-out samples; {detail}");
    ensure!(frac >= 0.8 && cd <= 5e-3, "{detail}");
    ensure!(secs <= E2E_BUDGET_SECS, "over the time budget: {detail}");
    Ok(detail)
}

fn oracle_injection() -> Result<String> {
    let gp = GenParams::for_profile(Profile::Desk);
    let (mut wr, mut wt, mut ws) = (0.0f64, 0.0f64, 0.0f64);
    let priors: Vec<_> = Category::ALL.iter().map(|&c| build_prior(c, 2, 3, &gp)).collect::<posevit_core::Result<_>>()?;
    for i in 0..100u64 {
        let k = i as usize % Category::ALL.len();
        let s = make_sample(Category::ALL[k], 900 + i, Profile::Desk, &gp, &PoseRanges::default())?;
        let (d, a) = oracle_msa(&s, &priors[k])?;
        let pose = pose_from_msa(&priors[k], &d, &a, &s.points, &RansacConfig::default())?;
        wr = wr.max(angle_deg(&pose.rotation, &s.pose.rotation));
        wt = wt.max((pose.translation - s.pose.translation).norm());
        ws = ws.max((pose.scale - s.pose.scale).abs() / s.pose.scale);
    }
    ensure!(wr <= 1e-7 && wt <= 1e-9 && ws <= 1e-9, "worst rot {wr:e}° t {wt:e} s {ws:e}");
    Ok(format!("100 samples, worst rot {wr:.1e}° t {wt:.1e} s {ws:.1e}"))
}

fn tree(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let path = e?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root)?.to_path_buf(), fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism(work: &Path) -> Result<String> {
    let mut trees = Vec::new();
    let mut eval_text = Vec::new();
    for run in ["run1", "run2"] {
        let dir = work.join(run);
        let log = work.join(format!("{run}.log"));
        let data = dir.join("data");
        run_cli(&["gen", "--categories", "mug,laptop", "--per-cat", "4", "--seed", "9", "--out", p(&data)], &log)?;
        run_cli(&["train", "--manifest", p(&data.join("manifest")), "--epochs", "2", "--batch", "3", "--seed", "5", "--out", p(&dir.join("w.bin"))], &log)?;
        let text = run_cli(
            &["eval", "--manifest", p(&data.join("manifest")), "--weights", p(&dir.join("w.bin")), "--report", p(&dir.join("report.csv")), "--summary", p(&dir.join("summary.json"))],
            &log,
        )?;
        trees.push(tree(&dir)?);
        eval_text.push(text);
    }
    ensure!(trees[0].len() == trees[1].len(), "file counts differ");
    for ((pa, a), (pb, b)) in trees[0].iter().zip(&trees[1]) {
        ensure!(pa == pb && a == b, "{} differs", pa.display());
    }
    ensure!(eval_text[0] == eval_text[1], "eval output differs");
    Ok(format!("{} files identical across two gen/train/eval runs", trees[0].len()))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let work = tempfile::Builder::new().prefix("posevit-acceptance").tempdir().expect("temp dir");
    let keep = work.path().to_path_buf();
    let (w8, w10) = (keep.join("e2e"), keep.join("determinism"));
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Result<String>>)> = vec![
        (1, "shape contract", Box::new(shape_contract)),
        (2, "attention oracle", Box::new(attention_oracle)),
        (3, "permutation equivariance", Box::new(permutation_equivariance)),
        (4, "umeyama / ransac", Box::new(umeyama_ransac)),
        (5, "gradient suite", Box::new(gradient_suite)),
        (6, "loss fixed points", Box::new(loss_fixed_points)),
        (7, "metric sanity", Box::new(metric_sanity)),
        (8, "desk-scale end-to-end", Box::new(move || end_to_end(&w8))),
        (9, "oracle injection", Box::new(oracle_injection)),
        (10, "determinism", Box::new(move || determinism(&w10))),
    ];
    let mut failed = 0;
    for (n, name, f) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => Err(anyhow::anyhow!(
                "panic: {}",
                e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            )),
        };
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {e:#} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("logs kept in {}", work.keep().display());
        std::process::exit(1);
    }
}
