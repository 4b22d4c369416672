//! Parametric category shapes, mean-shape priors, pose sampling and an
//! orthographic z-buffer renderer with exact pixel ↔ point bookkeeping.
//!
//! Every shape is a fixed list of parametric surface patches. Points are
//! laid on each patch with a golden-ratio lattice in `(u, v)`, warped along
//! `v` to equalise area density, and the per-patch counts depend only on the
//! category. Point `i` therefore sits at the same surface parameters on every
//! instance of a category, which is what makes positionwise prior averaging
//! meaningful.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};

use crate::metrics::SymmetryTag;
use crate::msa::{bbox_diagonal, PixelPointIndex, ShapePrior};
use crate::numerics::{Prng, Tensor};
use crate::pipeline::Profile;
use crate::pointformer::PointCloud;
use crate::pose::{axis_angle, Pose};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Bottle,
    Bowl,
    Camera,
    Can,
    Laptop,
    Mug,
}

impl Category {
    pub const ALL: [Category; 6] =
        [Category::Bottle, Category::Bowl, Category::Camera, Category::Can, Category::Laptop, Category::Mug];

    pub fn name(self) -> &'static str {
        match self {
            Category::Bottle => "bottle",
            Category::Bowl => "bowl",
            Category::Camera => "camera",
            Category::Can => "can",
            Category::Laptop => "laptop",
            Category::Mug => "mug",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "camera-proxy" => Ok(Category::Camera),
            t => Category::ALL
                .into_iter()
                .find(|c| c.name() == t)
                .ok_or_else(|| Error::UnknownCategory(s.into())),
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }

    /// Mugs count as symmetric only when generated without a handle.
    pub fn symmetry(self, mug_handle: bool) -> SymmetryTag {
        match self {
            Category::Bottle | Category::Bowl | Category::Can => SymmetryTag::AxisY,
            Category::Mug if !mug_handle => SymmetryTag::AxisY,
            _ => SymmetryTag::None,
        }
    }

    /// Ranges of the shape dimensions drawn per instance.
    fn ranges(self) -> &'static [(f64, f64)] {
        match self {
            // radius, height
            Category::Can => &[(0.25, 0.45), (0.8, 1.2)],
            // body radius, body height, shoulder height, neck radius, neck height
            Category::Bottle => &[(0.25, 0.4), (0.6, 0.9), (0.15, 0.25), (0.08, 0.14), (0.15, 0.3)],
            // rim radius, depth, foot ratio
            Category::Bowl => &[(0.5, 0.7), (0.3, 0.5), (0.35, 0.55)],
            // radius, height, handle radius ratio
            Category::Mug => &[(0.3, 0.4), (0.7, 1.0), (0.22, 0.32)],
            // width, depth, screen ratio, hinge angle (degrees)
            Category::Laptop => &[(0.9, 1.2), (0.6, 0.8), (0.85, 1.0), (70.0, 130.0)],
            // width, height, depth, lens radius, lens length, finder offset
            Category::Camera => &[(0.8, 1.1), (0.5, 0.7), (0.3, 0.45), (0.14, 0.22), (0.15, 0.35), (-0.25, 0.25)],
        }
    }
}

impl core::fmt::Display for Category {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Point counts and options for [`gen_instance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenParams {
    /// Model points `N_c`.
    pub model_points: usize,
    /// Surface points used by the renderer.
    pub render_points: usize,
    pub mug_handle: bool,
}

impl GenParams {
    pub fn for_profile(profile: Profile) -> Self {
        let s = profile.image_size();
        GenParams { model_points: profile.prior_points(), render_points: 6 * s * s, mug_handle: true }
    }
}

#[derive(Clone, Copy, Debug)]
enum Surface {
    /// The patch's profile polyline `(radius, y)` revolved about `y`.
    Revolution,
    /// Disc of radius `r` in the `xz` plane.
    Disc(f64),
    /// `w × h` rectangle in the `xy` plane, centred.
    Quad(f64, f64),
    /// Half torus: tube radius `r` around a semicircle of radius `big_r` in `xy`.
    Tube(f64, f64),
}

#[derive(Clone, Debug)]
struct Patch {
    surface: Surface,
    profile: Vec<[f64; 2]>,
    rot: Matrix3<f64>,
    offset: Vector3<f64>,
    color: [f64; 3],
    bands: f64,
}

impl Patch {
    fn new(surface: Surface, rot: Matrix3<f64>, offset: Vector3<f64>, color: [f64; 3]) -> Self {
        Patch { surface, profile: Vec::new(), rot, offset, color, bands: 0.0 }
    }

    fn revolution(profile: Vec<[f64; 2]>, offset: Vector3<f64>, color: [f64; 3]) -> Self {
        Patch {
            surface: Surface::Revolution,
            profile,
            rot: Matrix3::identity(),
            offset,
            color,
            bands: 0.0,
        }
    }

    fn local(&self, u: f64, v: f64) -> Vector3<f64> {
        match self.surface {
            Surface::Revolution => {
                let [r, y] = along(&self.profile, v);
                let th = TAU * u;
                Vector3::new(r * libm::cos(th), y, r * libm::sin(th))
            }
            Surface::Disc(r) => {
                let th = TAU * u;
                Vector3::new(r * v * libm::cos(th), 0.0, r * v * libm::sin(th))
            }
            Surface::Quad(w, h) => Vector3::new(w * (u - 0.5), h * (v - 0.5), 0.0),
            Surface::Tube(big_r, r) => {
                let phi = -PI / 2.0 + PI * v;
                let psi = TAU * u;
                let radial = Vector3::new(libm::cos(phi), libm::sin(phi), 0.0);
                big_r * radial + r * (libm::cos(psi) * radial + libm::sin(psi) * Vector3::z())
            }
        }
    }

    fn eval(&self, u: f64, v: f64) -> Vector3<f64> {
        self.rot * self.local(u, v) + self.offset
    }

    fn jacobian(&self, u: f64, v: f64) -> Vector3<f64> {
        let h = 1e-5;
        let du = (self.eval(u + h, v) - self.eval(u - h, v)) / (2.0 * h);
        let dv = (self.eval(u, v + h) - self.eval(u, v - h)) / (2.0 * h);
        du.cross(&dv)
    }

    fn normal(&self, u: f64, v: f64) -> Vector3<f64> {
        let j = self.jacobian(u, v);
        if j.norm() > 1e-12 {
            return j.normalize();
        }
        let j = self.jacobian(u, (v + 1e-3).min(1.0));
        if j.norm() > 1e-12 {
            j.normalize()
        } else {
            self.rot * Vector3::y()
        }
    }

    /// Cumulative area along `v` on a fixed grid; the last entry is the area.
    fn area_cdf(&self) -> Vec<f64> {
        const NV: usize = 64;
        const NU: usize = 16;
        let mut cdf = Vec::with_capacity(NV + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..NV {
            let v = (i as f64 + 0.5) / NV as f64;
            let g: f64 = (0..NU).map(|k| self.jacobian((k as f64 + 0.5) / NU as f64, v).norm()).sum::<f64>() / NU as f64;
            acc += g / NV as f64;
            cdf.push(acc);
        }
        cdf
    }

    fn albedo(&self, v: f64) -> [f64; 3] {
        if self.bands == 0.0 {
            return self.color;
        }
        let k = 0.8 + 0.2 * libm::cos(TAU * self.bands * v);
        self.color.map(|c| c * k)
    }
}

fn along(profile: &[[f64; 2]], t: f64) -> [f64; 2] {
    let lens: Vec<f64> = profile.windows(2).map(|w| libm::hypot(w[1][0] - w[0][0], w[1][1] - w[0][1])).collect();
    let total: f64 = lens.iter().sum();
    let mut target = t.clamp(0.0, 1.0) * total;
    for (k, &l) in lens.iter().enumerate() {
        if target <= l || k == lens.len() - 1 {
            let f = if l > 0.0 { (target / l).min(1.0) } else { 0.0 };
            let (a, b) = (profile[k], profile[k + 1]);
            return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
        }
        target -= l;
    }
    profile[0]
}

/// Inverse of a piecewise-linear CDF on a uniform grid.
fn invert_cdf(cdf: &[f64], q: f64) -> f64 {
    let total = cdf[cdf.len() - 1];
    if total <= 0.0 {
        return q;
    }
    let target = q * total;
    let n = cdf.len() - 1;
    let k = cdf.partition_point(|&c| c < target).clamp(1, n);
    let (a, b) = (cdf[k - 1], cdf[k]);
    let f = if b > a { (target - a) / (b - a) } else { 0.0 };
    ((k - 1) as f64 + f) / n as f64
}

fn random_color(prng: &mut Prng) -> [f64; 3] {
    [prng.uniform_in(0.2, 0.95), prng.uniform_in(0.2, 0.95), prng.uniform_in(0.2, 0.95)]
}

fn grey(v: f64) -> [f64; 3] {
    [v, v, v]
}

/// Six quads of the box `center ± half` turned by `rot`.
fn box_patches(center: Vector3<f64>, half: Vector3<f64>, rot: Matrix3<f64>, color: [f64; 3]) -> Vec<Patch> {
    let (hx, hy, hz) = (half.x, half.y, half.z);
    let ry = |a: f64| axis_angle(&Vector3::y(), a);
    let rx = |a: f64| axis_angle(&Vector3::x(), a);
    let faces = [
        (Matrix3::identity(), Vector3::new(0.0, 0.0, hz), 2.0 * hx, 2.0 * hy),
        (ry(PI), Vector3::new(0.0, 0.0, -hz), 2.0 * hx, 2.0 * hy),
        (ry(PI / 2.0), Vector3::new(hx, 0.0, 0.0), 2.0 * hz, 2.0 * hy),
        (ry(-PI / 2.0), Vector3::new(-hx, 0.0, 0.0), 2.0 * hz, 2.0 * hy),
        (rx(-PI / 2.0), Vector3::new(0.0, hy, 0.0), 2.0 * hx, 2.0 * hz),
        (rx(PI / 2.0), Vector3::new(0.0, -hy, 0.0), 2.0 * hx, 2.0 * hz),
    ];
    faces
        .into_iter()
        .map(|(r, o, w, h)| Patch::new(Surface::Quad(w, h), rot * r, center + rot * o, color))
        .collect()
}

fn disc(r: f64, y: f64, color: [f64; 3]) -> Patch {
    Patch::new(Surface::Disc(r), Matrix3::identity(), Vector3::new(0.0, y, 0.0), color)
}

fn banded(mut p: Patch, bands: f64) -> Patch {
    p.bands = bands;
    p
}

/// Curve samples of a quarter-ellipse from `(r0, y0)` to `(r1, y1)`.
fn bowl_curve(r0: f64, y0: f64, r1: f64, y1: f64) -> Vec<[f64; 2]> {
    (0..=12)
        .map(|k| {
            let a = PI / 2.0 * k as f64 / 12.0;
            [r0 + (r1 - r0) * libm::sin(a), y0 + (y1 - y0) * (1.0 - libm::cos(a))]
        })
        .collect()
}

fn build_patches(cat: Category, d: &[f64], colors: &[[f64; 3]; 3], handle: bool) -> Vec<Patch> {
    let o = Vector3::zeros();
    let [c0, c1, c2] = *colors;
    match cat {
        Category::Can => {
            let (r, h) = (d[0], d[1]);
            vec![
                banded(Patch::revolution(vec![[r, -h / 2.0], [r, h / 2.0]], o, c0), 2.0),
                disc(r, h / 2.0, grey(0.8)),
                disc(r, -h / 2.0, grey(0.3)),
            ]
        }
        Category::Bottle => {
            let (rb, hb, hs, rn, hn) = (d[0], d[1], d[2], d[3], d[4]);
            vec![
                banded(
                    Patch::revolution(vec![[rb, 0.0], [rb, hb], [rn, hb + hs], [rn, hb + hs + hn]], o, c0),
                    1.5,
                ),
                disc(rb, 0.0, grey(0.25)),
                disc(rn, hb + hs + hn, c1),
            ]
        }
        Category::Bowl => {
            let (rim, depth, foot) = (d[0], d[1], d[2] * d[0]);
            let th = 0.04;
            let mut inner = bowl_curve(foot - th, th, rim - th, depth);
            inner.reverse();
            vec![
                Patch::revolution(bowl_curve(foot, 0.0, rim, depth), o, c0),
                Patch::revolution(inner, o, c1),
                Patch::revolution(vec![[rim - th, depth], [rim, depth]], o, c0),
                disc(foot, 0.0, grey(0.3)),
                disc(foot - th, th, c1),
            ]
        }
        Category::Mug => {
            let (r, h, hr) = (d[0], d[1], d[2] * d[1]);
            let th = 0.04;
            let mut p = vec![
                banded(Patch::revolution(vec![[r, 0.0], [r, h]], o, c0), 1.0),
                Patch::revolution(vec![[r - th, h], [r - th, th]], o, c1),
                Patch::revolution(vec![[r - th, h], [r, h]], o, c0),
                disc(r, 0.0, grey(0.3)),
                disc(r - th, th, c1),
            ];
            if handle {
                p.push(Patch::new(
                    Surface::Tube(hr, 0.045),
                    Matrix3::identity(),
                    Vector3::new(r - 0.02, h / 2.0, 0.0),
                    c0,
                ));
            }
            p
        }
        Category::Laptop => {
            let (w, dp, ratio, hinge) = (d[0], d[1], d[2], d[3].to_radians());
            let (tb, ts) = (0.04, 0.02);
            let mut p = box_patches(Vector3::new(0.0, tb / 2.0, 0.0), Vector3::new(w / 2.0, tb / 2.0, dp / 2.0), Matrix3::identity(), c0);
            // The screen starts closed on the base and opens about the back edge.
            let sd = ratio * dp;
            let pivot = Vector3::new(0.0, tb, -dp / 2.0);
            let rot = axis_angle(&Vector3::x(), -hinge);
            let closed_center = Vector3::new(0.0, ts / 2.0, sd / 2.0);
            p.extend(box_patches(pivot + rot * closed_center, Vector3::new(w / 2.0, ts / 2.0, sd / 2.0), rot, c1));
            p
        }
        Category::Camera => {
            let (w, h, dp, rl, ll, fo) = (d[0], d[1], d[2], d[3], d[4], d[5]);
            let mut p = box_patches(Vector3::zeros(), Vector3::new(w / 2.0, h / 2.0, dp / 2.0), Matrix3::identity(), c0);
            let to_z = axis_angle(&Vector3::x(), PI / 2.0);
            let lens_x = 0.15 * w;
            let base = Vector3::new(lens_x, 0.0, dp / 2.0);
            p.push(Patch {
                rot: to_z,
                ..Patch::revolution(vec![[rl, 0.0], [rl, ll]], base, grey(0.15))
            });
            p.push(Patch::new(Surface::Disc(rl), to_z, base + Vector3::new(0.0, 0.0, ll), c2));
            p.extend(box_patches(
                Vector3::new(fo * w, h / 2.0 + 0.06, 0.0),
                Vector3::new(0.12, 0.06, 0.1),
                Matrix3::identity(),
                c1,
            ));
            p
        }
    }
}

/// Splits `total` points over patches in proportion to `areas`
/// (largest-remainder rounding).
fn allocate(areas: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| *e as usize).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - counts[b] as f64).total_cmp(&(exact[a] - counts[a] as f64)).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// Per-patch counts for a category, from its mid-range dimensions.
fn category_allocation(cat: Category, handle: bool, total: usize) -> Vec<usize> {
    let mid: Vec<f64> = cat.ranges().iter().map(|(lo, hi)| (lo + hi) / 2.0).collect();
    let patches = build_patches(cat, &mid, &[grey(0.5); 3], handle);
    let areas: Vec<f64> = patches.iter().map(|p| p.area_cdf()[64]).collect();
    allocate(&areas, total)
}

struct Sampled {
    points: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    colors: Vec<[f64; 3]>,
}

fn sample_surface(patches: &[Patch], counts: &[usize]) -> Sampled {
    let total = counts.iter().sum();
    let mut s = Sampled { points: Vec::with_capacity(total), normals: Vec::with_capacity(total), colors: Vec::with_capacity(total) };
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    for (p, &n) in patches.iter().zip(counts) {
        let cdf = p.area_cdf();
        for i in 0..n {
            let t = i as f64 * GOLDEN + 0.5 / n as f64;
            let u = t - libm::floor(t);
            let v = invert_cdf(&cdf, (i as f64 + 0.5) / n as f64);
            s.points.push(p.eval(u, v));
            s.normals.push(p.normal(u, v));
            s.colors.push(p.albedo(v));
        }
    }
    s
}

fn to_tensor(v: &[Vector3<f64>]) -> Tensor {
    Tensor::new(&[v.len(), 3], v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).expect("n × 3")
}

/// Canonical instance: the `N_c`-point model plus a dense coloured surface
/// for rendering, both in NOCS (bounding box centred, unit diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthShape {
    pub category: Category,
    pub sym: SymmetryTag,
    pub model: Tensor,
    pub surface: Tensor,
    pub normals: Tensor,
    pub colors: Tensor,
}

pub fn gen_instance(category: Category, prng: &mut Prng, params: &GenParams) -> Result<SynthShape> {
    if params.model_points < 3 || params.render_points < 3 {
        return Err(Error::Config("shapes need at least 3 points".into()));
    }
    let dims: Vec<f64> = category.ranges().iter().map(|&(lo, hi)| prng.uniform_in(lo, hi)).collect();
    let colors = [random_color(prng), random_color(prng), random_color(prng)];
    let handle = category == Category::Mug && params.mug_handle;
    let patches = build_patches(category, &dims, &colors, handle);
    let model = sample_surface(&patches, &category_allocation(category, handle, params.model_points));
    let dense = sample_surface(&patches, &category_allocation(category, handle, params.render_points));

    let (center, diag) = bounds(&model.points);
    let norm = |p: &Vector3<f64>| (p - center) / diag;
    Ok(SynthShape {
        category,
        sym: category.symmetry(params.mug_handle),
        model: to_tensor(&model.points.iter().map(norm).collect::<Vec<_>>()),
        surface: to_tensor(&dense.points.iter().map(norm).collect::<Vec<_>>()),
        normals: to_tensor(&dense.normals),
        colors: Tensor::new(&[dense.colors.len(), 3], dense.colors.concat()).expect("n × 3"),
    })
}

fn bounds(pts: &[Vector3<f64>]) -> (Vector3<f64>, f64) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    ((lo + hi) / 2.0, (hi - lo).norm())
}

/// Centres a point set's bounding box and scales its diagonal to 1.
pub fn normalize_unit_diagonal(t: &Tensor) -> Tensor {
    let pts: Vec<Vector3<f64>> = (0..t.rows()).map(|i| crate::pose::row3(t, i)).collect();
    let (c, diag) = bounds(&pts);
    to_tensor(&pts.iter().map(|p| (p - c) / diag).collect::<Vec<_>>())
}

/// Positionwise mean of `k` seeded instances, renormalised.
pub fn build_prior(category: Category, k: usize, seed: u64, params: &GenParams) -> Result<ShapePrior> {
    if k == 0 {
        return Err(Error::EmptyInput("prior needs at least one instance"));
    }
    let mut acc = Tensor::zeros(&[params.model_points, 3]);
    for i in 0..k {
        let shape = gen_instance(category, &mut Prng::stream(seed, i as u64), params)?;
        for (a, b) in acc.data_mut().iter_mut().zip(shape.model.data()) {
            *a += b;
        }
    }
    let mean = acc.map(|v| v / k as f64);
    let prior = normalize_unit_diagonal(&mean);
    debug_assert!((bbox_diagonal(&prior) - 1.0).abs() < 1e-9);
    ShapePrior::new(prior, category.id())
}

/// Pose ranges for [`sample_pose`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRanges {
    pub xy: f64,
    pub z: (f64, f64),
    pub scale: (f64, f64),
    /// Largest angle in radians between the object's `y` axis and the
    /// camera's up direction; `None` draws rotations uniformly over SO(3).
    pub max_tilt: Option<f64>,
}

impl Default for PoseRanges {
    fn default() -> Self {
        PoseRanges { xy: 0.2, z: (0.6, 1.2), scale: (0.1, 0.4), max_tilt: None }
    }
}

/// Uniform rotation (or uniform within the tilt cone), box-uniform
/// translation, log-uniform scale.
pub fn sample_pose(prng: &mut Prng, ranges: &PoseRanges) -> Pose {
    let rotation = match ranges.max_tilt {
        None => uniform_rotation(prng),
        Some(max) => tilted_rotation(prng, max),
    };
    let translation = Vector3::new(
        prng.uniform_in(-ranges.xy, ranges.xy),
        prng.uniform_in(-ranges.xy, ranges.xy),
        prng.uniform_in(ranges.z.0, ranges.z.1),
    );
    let (lo, hi) = (libm::log(ranges.scale.0), libm::log(ranges.scale.1));
    let scale = libm::exp(prng.uniform_in(lo, hi));
    Pose { rotation, translation, scale }
}

/// Axis uniform over the spherical cap of half-angle `max` around `+y`,
/// spin about that axis uniform.
fn tilted_rotation(prng: &mut Prng, max: f64) -> Matrix3<f64> {
    let cos_t = prng.uniform_in(libm::cos(max.clamp(0.0, core::f64::consts::PI)), 1.0);
    let sin_t = libm::sqrt((1.0 - cos_t * cos_t).max(0.0));
    let phi = prng.uniform_in(0.0, core::f64::consts::TAU);
    let spin = prng.uniform_in(0.0, core::f64::consts::TAU);
    let axis = Vector3::new(sin_t * libm::cos(phi), cos_t, sin_t * libm::sin(phi));
    let align = nalgebra::Rotation3::rotation_between(&Vector3::y(), &axis)
        .unwrap_or_else(|| nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), core::f64::consts::PI));
    align.into_inner() * crate::metrics::rot_y(spin)
}

fn uniform_rotation(prng: &mut Prng) -> Matrix3<f64> {
    let q = loop {
        let q = [prng.normal(), prng.normal(), prng.normal(), prng.normal()];
        let n = libm::sqrt(q.iter().map(|v| v * v).sum());
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

/// Fixes the unobservable spin of an axis-symmetric object: the canonical
/// `z` axis is turned as far towards the camera as the symmetry axis allows.
pub fn canonicalize_spin(r: &Matrix3<f64>) -> Matrix3<f64> {
    let a = r.column(1).into_owned();
    let toward = -Vector3::z();
    let mut z = toward - a * a.dot(&toward);
    if z.norm() < 1e-9 {
        z = Vector3::x() - a * a.x;
    }
    let z = z.normalize();
    let x = a.cross(&z);
    Matrix3::from_columns(&[x, a, z])
}

/// One rendered training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub category: Category,
    pub sym: SymmetryTag,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub points: PointCloud,
    pub index: PixelPointIndex,
    pub pose: Pose,
    /// Ground-truth canonical model `[N_c, 3]`.
    pub model: Tensor,
    /// Ground-truth NOCS of each observed point `[N, 3]`.
    pub nocs: Tensor,
}

/// Light direction (camera frame, pointing from the surface to the light).
const LIGHT: [f64; 3] = [0.3, -0.5, -0.8];

/// Orthographic render of `shape` under `pose`.
///
/// The crop is centred on the object's translation and spans `1.25` object
/// diagonals. Each pixel keeps its nearest surface point; `N` of those
/// winners are drawn with `prng` and kept in pixel order.
pub fn render_sample(shape: &SynthShape, pose: &Pose, profile: Profile, prng: &mut Prng) -> Result<SynthSample> {
    let (h, w, n) = (profile.image_size(), profile.image_size(), profile.points());
    let px = 1.25 * pose.scale / w as f64;
    let m = shape.surface.rows();
    let mut cam = Vec::with_capacity(m);
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut winner = vec![usize::MAX; h * w];
    for i in 0..m {
        let p = pose.apply(&crate::pose::row3(&shape.surface, i));
        cam.push(p);
        let col = libm::floor((p.x - pose.translation.x) / px + w as f64 / 2.0);
        let row = libm::floor(h as f64 / 2.0 - (p.y - pose.translation.y) / px);
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        let pix = row as usize * w + col as usize;
        if p.z < zbuf[pix] {
            zbuf[pix] = p.z;
            winner[pix] = i;
        }
    }
    let light = Vector3::from(LIGHT).normalize();
    let mut image = Tensor::zeros(&[h, w, 3]);
    let mut visible = Vec::new();
    for (pix, &i) in winner.iter().enumerate() {
        if i == usize::MAX {
            continue;
        }
        visible.push(pix);
        let nrm = pose.rotation * crate::pose::row3(&shape.normals, i);
        let shade = 0.35 + 0.65 * nrm.dot(&light).abs();
        let dst = &mut image.data_mut()[3 * pix..3 * pix + 3];
        for (d, c) in dst.iter_mut().zip(shape.colors.row(i)) {
            *d = (c * shade).clamp(0.0, 1.0);
        }
    }
    if visible.len() < n {
        return Err(Error::NotEnoughVisible { visible: visible.len(), needed: n });
    }
    let mut keep = prng.sample_distinct(visible.len(), n);
    keep.sort_unstable();
    let pixels: Vec<usize> = keep.iter().map(|&k| visible[k]).collect();
    let ids: Vec<usize> = pixels.iter().map(|&p| winner[p]).collect();
    let observed = to_tensor(&ids.iter().map(|&i| cam[i]).collect::<Vec<_>>());
    Ok(SynthSample {
        category: shape.category,
        sym: shape.sym,
        image,
        points: PointCloud::new(observed)?,
        index: PixelPointIndex(pixels),
        pose: *pose,
        model: shape.model.clone(),
        nocs: shape.surface.select_rows(&ids),
    })
}

/// Deterministic sample for `(category, seed)`: shape, pose and render each
/// use their own stream; poses are redrawn until enough points are visible.
pub fn make_sample(category: Category, seed: u64, profile: Profile, params: &GenParams, ranges: &PoseRanges) -> Result<SynthSample> {
    let shape = gen_instance(category, &mut Prng::stream(seed, 0), params)?;
    let mut last = None;
    for attempt in 0..16u64 {
        let mut pose = sample_pose(&mut Prng::stream(seed, 1 + 2 * attempt), ranges);
        if shape.sym == SymmetryTag::AxisY {
            pose.rotation = canonicalize_spin(&pose.rotation);
        }
        match render_sample(&shape, &pose, profile, &mut Prng::stream(seed, 2 + 2 * attempt)) {
            Err(e @ Error::NotEnoughVisible { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate(format!("no usable view for {category} seed {seed}"))))
}
