mod common;

use nalgebra::Vector3;
use posevit_core::metrics::SymmetryTag;
use posevit_core::numerics::Prng;
use posevit_core::pipeline::Profile;
use posevit_core::pose::{rotation_angle, Pose};
use posevit_core::synth::{
    build_prior, canonicalize_spin, gen_instance, make_sample, render_sample, sample_pose, Category, GenParams, PoseRanges,
};
use posevit_core::Tensor;

fn params() -> GenParams {
    GenParams { model_points: 256, render_points: 20_000, mug_handle: true }
}

fn diagonal(t: &Tensor) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..t.rows() {
        for k in 0..3 {
            lo[k] = lo[k].min(t.at(i, k));
            hi[k] = hi[k].max(t.at(i, k));
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn every_category_is_unit_diagonal_and_repeatable() {
    for cat in Category::ALL {
        let a = gen_instance(cat, &mut Prng::new(11), &params()).unwrap();
        assert!((diagonal(&a.model) - 1.0).abs() < 1e-9, "{cat}");
        assert_eq!(a, gen_instance(cat, &mut Prng::new(11), &params()).unwrap());
        assert_eq!(a.model.shape(), &[256, 3]);
    }
}

#[test]
fn can_body_is_a_cylinder() {
    let shape = gen_instance(Category::Can, &mut Prng::new(3), &params()).unwrap();
    let radial: Vec<(f64, f64)> = (0..shape.model.rows())
        .map(|i| {
            let r = shape.model.row(i);
            ((r[0] * r[0] + r[2] * r[2]).sqrt(), r[1])
        })
        .collect();
    let rmax = radial.iter().map(|p| p.0).fold(0.0, f64::max);
    let ymax = radial.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    // Points strictly between the caps belong to the side wall.
    let side: Vec<f64> = radial.iter().filter(|p| p.1.abs() < ymax - 1e-9).map(|p| p.0).collect();
    assert!(side.len() > shape.model.rows() / 2);
    // The box centre sits off the true axis by the angular sampling gap.
    for r in side {
        assert!((r - rmax).abs() < 1e-3 * rmax, "{r} vs {rmax}");
    }
    assert_eq!(shape.sym, SymmetryTag::AxisY);
}

#[test]
fn priors() {
    let p = params();
    let single = build_prior(Category::Bowl, 1, 5, &p).unwrap();
    let inst = gen_instance(Category::Bowl, &mut Prng::stream(5, 0), &p).unwrap();
    assert!(single.points().max_abs_diff(&inst.model) < 1e-12);
    let many = build_prior(Category::Bottle, 6, 5, &p).unwrap();
    assert!((diagonal(many.points()) - 1.0).abs() < 1e-9);
    assert!(build_prior(Category::Bottle, 0, 5, &p).is_err());
}

#[test]
fn identity_pose_reproduces_canonical_points() {
    let shape = gen_instance(Category::Camera, &mut Prng::new(4), &params()).unwrap();
    let s = render_sample(&shape, &Pose::identity(), Profile::Desk, &mut Prng::new(1)).unwrap();
    assert_eq!(s.points.points().max_abs_diff(&s.nocs), 0.0);
}

#[test]
fn samples_are_self_consistent() {
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        let s = make_sample(cat, 100 + i as u64, Profile::Desk, &params(), &PoseRanges::default()).unwrap();
        assert_eq!(s.points.points().shape(), &[256, 3]);
        for j in 0..256 {
            let n = Vector3::from_row_slice(s.nocs.row(j));
            let want = s.pose.scale * (s.pose.rotation * n) + s.pose.translation;
            let got = Vector3::from_row_slice(s.points.points().row(j));
            assert!((want - got).norm() < 1e-9);
        }
    }
}

#[test]
fn renderer_replay() {
    // Recompute the z-buffer from scratch and check each kept pixel's winner.
    let shape = gen_instance(Category::Mug, &mut Prng::new(8), &params()).unwrap();
    let pose = sample_pose(&mut Prng::new(9), &PoseRanges::default());
    let s = render_sample(&shape, &pose, Profile::Desk, &mut Prng::new(10)).unwrap();
    let w = 64usize;
    let px = 1.25 * pose.scale / w as f64;
    let mut best = vec![(f64::INFINITY, Vector3::zeros()); w * w];
    for i in 0..shape.surface.rows() {
        let p = pose.scale * (pose.rotation * Vector3::from_row_slice(shape.surface.row(i))) + pose.translation;
        let col = ((p.x - pose.translation.x) / px + 32.0).floor();
        let row = (32.0 - (p.y - pose.translation.y) / px).floor();
        if (0.0..64.0).contains(&col) && (0.0..64.0).contains(&row) {
            let k = row as usize * w + col as usize;
            if p.z < best[k].0 {
                best[k] = (p.z, p);
            }
        }
    }
    let mut prev = None;
    for (j, &pix) in s.index.0.iter().enumerate() {
        assert!(prev.is_none_or(|q| q < pix), "pixel order");
        prev = Some(pix);
        let got = Vector3::from_row_slice(s.points.points().row(j));
        assert!((best[pix].1 - got).norm() < 1e-12);
        assert!(s.image.data()[3 * pix..3 * pix + 3].iter().any(|&c| c > 0.0));
    }
    let again = render_sample(&shape, &pose, Profile::Desk, &mut Prng::new(10)).unwrap();
    assert_eq!(again, s);
}

#[test]
fn uniform_rotations_have_the_haar_mean_angle() {
    // E[θ] under Haar measure is π/2 + 2/π radians.
    let expect = (std::f64::consts::FRAC_PI_2 + 2.0 / std::f64::consts::PI).to_degrees();
    assert!((expect - 126.4756).abs() < 1e-3);
    let mut p = Prng::new(12);
    let ranges = PoseRanges::default();
    let n = 100_000;
    let mean = (0..n).map(|_| rotation_angle(&sample_pose(&mut p, &ranges).rotation).to_degrees()).sum::<f64>() / n as f64;
    assert!((mean - expect).abs() < 1.0, "{mean}");
}

#[test]
fn poses_are_valid_and_repeatable() {
    let ranges = PoseRanges::default();
    for seed in 0..200 {
        let a = sample_pose(&mut Prng::new(seed), &ranges);
        assert_eq!(a, sample_pose(&mut Prng::new(seed), &ranges));
        assert!(Pose::new(a.rotation, a.translation, a.scale).is_ok());
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((0.1..=0.4).contains(&a.scale));
        assert!((0.6..=1.2).contains(&a.translation.z) && a.translation.x.abs() <= 0.2);
    }
}

#[test]
fn tilt_cone_is_respected() {
    let max = 30f64.to_radians();
    let ranges = PoseRanges { max_tilt: Some(max), ..Default::default() };
    let mut p = Prng::new(13);
    let mut widest = 0.0f64;
    for _ in 0..5000 {
        let r = sample_pose(&mut p, &ranges).rotation;
        let tilt = r.column(1).dot(&Vector3::y()).clamp(-1.0, 1.0).acos();
        assert!(tilt <= max + 1e-12);
        widest = widest.max(tilt);
    }
    assert!(widest > 0.95 * max);
}

#[test]
fn spin_canonicalisation_keeps_the_axis() {
    let mut p = Prng::new(14);
    for _ in 0..100 {
        let r = sample_pose(&mut p, &PoseRanges::default()).rotation;
        let c = canonicalize_spin(&r);
        assert!((c.column(1) - r.column(1)).norm() < 1e-12);
        assert!((c.determinant() - 1.0).abs() < 1e-12);
        let spun = r * posevit_core::metrics::rot_y(p.uniform_in(-3.0, 3.0));
        assert!((canonicalize_spin(&spun) - c).norm() < 1e-9);
    }
}
