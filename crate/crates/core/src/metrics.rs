//! Pose and box metrics: symmetric rotation error, `n° m cm` success, exact
//! oriented-box IoU and per-category precision tables.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::{Matrix3, Vector3};

use crate::pose::{check_rotation, rotation_angle, Pose};
use crate::{Error, Result};

const ROTATION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymmetryTag {
    None,
    /// Rotation about the canonical `y` axis is unobservable.
    AxisY,
}

/// Rotation error in degrees.
///
/// For [`SymmetryTag::AxisY`] only the angle between the two images of the
/// `y` axis counts.
pub fn rotation_error(ra: &Matrix3<f64>, rb: &Matrix3<f64>, sym: SymmetryTag) -> Result<f64> {
    check_rotation(ra, ROTATION_TOL)?;
    check_rotation(rb, ROTATION_TOL)?;
    let rad = match sym {
        SymmetryTag::None => rotation_angle(&(ra.transpose() * rb)),
        SymmetryTag::AxisY => {
            let (a, b) = (ra.column(1).into_owned(), rb.column(1).into_owned());
            libm::atan2(a.cross(&b).norm(), a.dot(&b))
        }
    };
    Ok(rad.to_degrees())
}

/// `rotation_error ≤ n_deg` and translation error `≤ m_cm` centimetres.
pub fn pose_within(pred: &Pose, gt: &Pose, n_deg: f64, m_cm: f64, sym: SymmetryTag) -> bool {
    let rot = match rotation_error(&pred.rotation, &gt.rotation, sym) {
        Ok(r) => r,
        Err(_) => return false,
    };
    rot <= n_deg && (pred.translation - gt.translation).norm() <= m_cm / 100.0
}

/// Spin about `y` that best aligns `pred` with `gt`: returns `pred · R_y(φ)`.
pub fn align_spin(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> Matrix3<f64> {
    let m = gt.transpose() * pred;
    let phi = libm::atan2(m[(2, 0)] - m[(0, 2)], m[(0, 0)] + m[(2, 2)]);
    pred * rot_y(phi)
}

pub fn rot_y(phi: f64) -> Matrix3<f64> {
    let (s, c) = (libm::sin(phi), libm::cos(phi));
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl OrientedBox {
    pub fn new(center: Vector3<f64>, half_extents: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        check_rotation(&rotation, ROTATION_TOL)?;
        if !half_extents.iter().all(|&e| e > 0.0 && e.is_finite()) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::Degenerate(format!("box extents {half_extents:?}")));
        }
        Ok(OrientedBox { center, half_extents, rotation })
    }

    pub fn axis_aligned(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let (lo, hi) = (Vector3::from(min), Vector3::from(max));
        Self::new((lo + hi) / 2.0, (hi - lo) / 2.0, Matrix3::identity())
    }

    /// Box of a canonical (NOCS) axis-aligned box `[lo, hi]` placed by `pose`.
    pub fn from_pose(pose: &Pose, lo: Vector3<f64>, hi: Vector3<f64>) -> Result<Self> {
        Self::new(pose.apply(&((lo + hi) / 2.0)), pose.scale * (hi - lo) / 2.0, pose.rotation)
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.product()
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        core::array::from_fn(|i| {
            let sign = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            self.center + self.rotation * sign.component_mul(&self.half_extents)
        })
    }

    /// Six faces as counter-clockwise corner loops.
    fn faces(&self) -> Vec<Vec<Vector3<f64>>> {
        let c = self.corners();
        [[0, 2, 6, 4], [1, 5, 7, 3], [0, 4, 5, 1], [2, 3, 7, 6], [0, 1, 3, 2], [4, 6, 7, 5]]
            .iter()
            .map(|f| f.iter().map(|&i| c[i]).collect())
            .collect()
    }

    /// Half-spaces `n · x ≤ d` bounding the box.
    fn planes(&self) -> [(Vector3<f64>, f64); 6] {
        core::array::from_fn(|i| {
            let axis = i / 2;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let n = sign * self.rotation.column(axis).into_owned();
            (n, n.dot(&self.center) + self.half_extents[axis])
        })
    }
}

/// Intersection over union of two oriented boxes by exact convex clipping.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Clips `a`'s faces against each half-space of `b`, closing every cut with
/// a cap polygon, then sums tetrahedra from an interior point.
pub fn intersection_volume(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let scale = a.half_extents.max().max(b.half_extents.max());
    let eps = 1e-12 * scale.max(1e-300);
    let mut faces = a.faces();
    for (n, d) in b.planes() {
        let mut clipped = Vec::with_capacity(faces.len() + 1);
        let mut cut = Vec::new();
        let mut removed = false;
        for face in &faces {
            let (poly, any_out) = clip_polygon(face, &n, d, eps, &mut cut);
            removed |= any_out;
            if poly.len() >= 3 {
                clipped.push(poly);
            }
        }
        if !removed {
            continue;
        }
        let cap = order_cap(cut, &n, eps);
        if cap.len() >= 3 {
            clipped.push(cap);
        }
        faces = clipped;
        if faces.is_empty() {
            return 0.0;
        }
    }
    polytope_volume(&faces)
}

fn clip_polygon(
    face: &[Vector3<f64>],
    n: &Vector3<f64>,
    d: f64,
    eps: f64,
    cut: &mut Vec<Vector3<f64>>,
) -> (Vec<Vector3<f64>>, bool) {
    let dist: Vec<f64> = face.iter().map(|p| d - n.dot(p)).collect();
    let mut out = Vec::with_capacity(face.len() + 2);
    let mut any_out = false;
    for i in 0..face.len() {
        let j = (i + 1) % face.len();
        let (pi, di, dj) = (face[i], dist[i], dist[j]);
        let inside_i = di >= -eps;
        if inside_i {
            out.push(pi);
            if di.abs() <= eps {
                cut.push(pi);
            }
        } else {
            any_out = true;
        }
        if (di > eps && dj < -eps) || (di < -eps && dj > eps) {
            let t = di / (di - dj);
            let p = pi + (face[j] - pi) * t;
            out.push(p);
            cut.push(p);
        }
    }
    (out, any_out)
}

fn order_cap(mut pts: Vec<Vector3<f64>>, n: &Vector3<f64>, eps: f64) -> Vec<Vector3<f64>> {
    if pts.len() < 3 {
        return Vec::new();
    }
    let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let u = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&u).normalize();
    let e2 = n.cross(&e1);
    pts.sort_by(|p, q| {
        let (a, b) = (p - centroid, q - centroid);
        libm::atan2(a.dot(&e2), a.dot(&e1)).total_cmp(&libm::atan2(b.dot(&e2), b.dot(&e1)))
    });
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last().is_none_or(|q: &Vector3<f64>| (p - q).norm() > 10.0 * eps) {
            out.push(p);
        }
    }
    while out.len() > 1 && (out[0] - out[out.len() - 1]).norm() <= 10.0 * eps {
        out.pop();
    }
    out
}

fn polytope_volume(faces: &[Vec<Vector3<f64>>]) -> f64 {
    let count: usize = faces.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    let c = faces.iter().flatten().sum::<Vector3<f64>>() / count as f64;
    let mut vol = 0.0;
    for f in faces {
        for i in 1..f.len() - 1 {
            vol += (f[0] - c).dot(&(f[i] - c).cross(&(f[i + 1] - c))).abs() / 6.0;
        }
    }
    vol
}

/// One success criterion of the precision table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Iou(f64),
    Pose { deg: f64, cm: f64 },
}

impl Threshold {
    pub fn label(&self) -> String {
        match *self {
            Threshold::Iou(t) => format!("IoU{}", libm::round(t * 100.0) as i64),
            Threshold::Pose { deg, cm } => format!("{deg}°{cm}cm"),
        }
    }
}

pub const STANDARD_THRESHOLDS: [Threshold; 7] = [
    Threshold::Iou(0.5),
    Threshold::Iou(0.75),
    Threshold::Pose { deg: 5.0, cm: 2.0 },
    Threshold::Pose { deg: 5.0, cm: 5.0 },
    Threshold::Pose { deg: 10.0, cm: 2.0 },
    Threshold::Pose { deg: 10.0, cm: 5.0 },
    Threshold::Pose { deg: 10.0, cm: 10.0 },
];

/// One evaluated instance. Boxes are canonical `[lo, hi]` model bounds;
/// `pred` is `None` when pose recovery failed, which fails every threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub category: String,
    pub sym: SymmetryTag,
    pub pred: Option<Pose>,
    pub gt: Pose,
    pub pred_bounds: (Vector3<f64>, Vector3<f64>),
    pub gt_bounds: (Vector3<f64>, Vector3<f64>),
}

impl EvalRecord {
    /// IoU of the placed boxes; symmetric predictions are first spun onto
    /// the ground-truth orientation about their axis.
    pub fn iou(&self) -> f64 {
        let Some(mut pred) = self.pred else {
            return 0.0;
        };
        if self.sym == SymmetryTag::AxisY {
            pred.rotation = align_spin(&pred.rotation, &self.gt.rotation);
        }
        match (
            OrientedBox::from_pose(&pred, self.pred_bounds.0, self.pred_bounds.1),
            OrientedBox::from_pose(&self.gt, self.gt_bounds.0, self.gt_bounds.1),
        ) {
            (Ok(a), Ok(b)) => iou3d(&a, &b),
            _ => 0.0,
        }
    }

    pub fn passes(&self, t: &Threshold) -> bool {
        match *t {
            Threshold::Iou(min) => self.iou() >= min,
            Threshold::Pose { deg, cm } => self.pred.is_some_and(|p| pose_within(&p, &self.gt, deg, cm, self.sym)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionReport {
    pub thresholds: Vec<Threshold>,
    /// Category name and its pass fractions, `None` when it had no samples.
    pub rows: Vec<(String, Option<Vec<f64>>)>,
    /// Mean over the categories that have samples.
    pub mean: Option<Vec<f64>>,
}

/// Fraction of records passing each threshold, per category and averaged.
///
/// `categories` lists rows to report even when empty; categories seen only in
/// `records` are appended. Rows are sorted by name so record order is irrelevant.
pub fn precision_report(records: &[EvalRecord], categories: &[&str], thresholds: &[Threshold]) -> PrecisionReport {
    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = categories.iter().map(|c| (c.to_string(), Vec::new())).collect();
    for r in records {
        groups.entry(r.category.clone()).or_default().push(r);
    }
    let rows: Vec<(String, Option<Vec<f64>>)> = groups
        .into_iter()
        .map(|(name, recs)| {
            let fractions = (!recs.is_empty()).then(|| {
                thresholds
                    .iter()
                    .map(|t| recs.iter().filter(|r| r.passes(t)).count() as f64 / recs.len() as f64)
                    .collect()
            });
            (name, fractions)
        })
        .collect();
    let present: Vec<&Vec<f64>> = rows.iter().filter_map(|(_, f)| f.as_ref()).collect();
    let mean = (!present.is_empty())
        .then(|| (0..thresholds.len()).map(|k| present.iter().map(|f| f[k]).sum::<f64>() / present.len() as f64).collect());
    PrecisionReport { thresholds: thresholds.to_vec(), rows, mean }
}

impl PrecisionReport {
    fn all_rows(&self) -> impl Iterator<Item = (&str, Option<&Vec<f64>>)> {
        self.rows
            .iter()
            .map(|(n, f)| (n.as_str(), f.as_ref()))
            .chain(core::iter::once(("mean", self.mean.as_ref())))
    }

    /// CSV with a `category` column followed by one column per threshold.
    /// Absent categories have empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category");
        for t in &self.thresholds {
            s.push(',');
            s.push_str(&t.label());
        }
        s.push('\n');
        for (name, f) in self.all_rows() {
            s.push_str(name);
            for k in 0..self.thresholds.len() {
                s.push(',');
                if let Some(f) = f {
                    let _ = write!(s, "{:.6}", f[k]);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let labels: Vec<String> = self.thresholds.iter().map(Threshold::label).collect();
        let name_w = self.rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<name_w$}", "category");
        for l in &labels {
            let _ = write!(s, " {l:>9}");
        }
        s.push('\n');
        for (name, f) in self.all_rows() {
            let _ = write!(s, "{name:<name_w$}");
            for k in 0..labels.len() {
                match f {
                    Some(f) => {
                        let _ = write!(s, " {:>9.3}", f[k]);
                    }
                    None => {
                        let _ = write!(s, " {:>9}", "absent");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}
