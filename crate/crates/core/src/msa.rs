//! Multisource aggregation of appearance, geometry and the category prior.
//!
//! Appearance features are gathered at each observed point's pixel and joined
//! with the point's geometry into an instance-local representation. The
//! prior gets its own local/global representations. Two heads then predict
//! the deformation of the prior and a soft correspondence from observed
//! points to the deformed prior, whose product gives NOCS coordinates.

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{Graph, Linear, ParamSet, Prng, Tensor, Var};
use crate::{Error, Result};

/// Category prior `[N_c, 3]` in NOCS.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePrior {
    points: Tensor,
    pub category: usize,
}

impl ShapePrior {
    pub fn new(points: Tensor, category: usize) -> Result<Self> {
        check_points("shape prior", &points)?;
        let diag = bbox_diagonal(&points);
        if diag > 1.0 + 1e-6 {
            return Err(Error::Config(format!("prior bounding-box diagonal {diag} exceeds 1")));
        }
        Ok(ShapePrior { points, category })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Flat source-pixel index of every observed point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelPointIndex(pub Vec<usize>);

impl PixelPointIndex {
    pub fn validate(&self, pixels: usize) -> Result<()> {
        match self.0.iter().find(|&&p| p >= pixels) {
            Some(&index) => Err(Error::IndexOutOfRange { index, bound: pixels }),
            None => Ok(()),
        }
    }
}

/// Row-stochastic `[N, N_c]` soft correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMatrix(pub Tensor);

impl CorrespondenceMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("correspondence", "[N, N_c]", t.shape()));
        }
        for r in 0..t.rows() {
            let row = t.row(r);
            if let Some(c) = row.iter().position(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::NegativeEntry { row: r, col: c, value: row[c] });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Degenerate(format!("correspondence row {r} sums to {s}")));
            }
        }
        Ok(CorrespondenceMatrix(t))
    }

    /// Hard assignment of observed point `i` to prior point `targets[i]`.
    pub fn one_hot(targets: &[usize], n_prior: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[targets.len(), n_prior]);
        for (i, &j) in targets.iter().enumerate() {
            if j >= n_prior {
                return Err(Error::IndexOutOfRange { index: j, bound: n_prior });
            }
            t.row_mut(i)[j] = 1.0;
        }
        Ok(CorrespondenceMatrix(t))
    }
}

/// Per-prior-point displacement `[N_c, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(pub Tensor);

/// Predicted NOCS coordinates `[N, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NocsCoords(pub Tensor);

/// Layer widths. All hidden layers use GELU; head outputs are linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsaConfig {
    pub app_dim: usize,
    pub geo_dim: usize,
    pub inst_hidden: usize,
    pub cat_local: usize,
    pub cat_hidden: usize,
    pub global_dim: usize,
    pub head_hidden: [usize; 2],
    pub prior_points: usize,
}

impl MsaConfig {
    pub fn paper() -> Self {
        MsaConfig {
            app_dim: 32,
            geo_dim: 64,
            inst_hidden: 128,
            cat_local: 64,
            cat_hidden: 128,
            global_dim: 256,
            head_hidden: [512, 256],
            prior_points: 1024,
        }
    }

    pub fn desk() -> Self {
        MsaConfig { inst_hidden: 64, cat_hidden: 64, global_dim: 128, head_hidden: [256, 128], prior_points: 256, ..Self::paper() }
    }

    pub fn inst_local(&self) -> usize {
        self.app_dim + self.geo_dim
    }

    pub fn deformation_in(&self) -> usize {
        self.cat_local + 2 * self.global_dim
    }

    pub fn correspondence_in(&self) -> usize {
        self.inst_local() + 2 * self.global_dim
    }
}

/// Three-layer pointwise head over `[local | broadcast globals]`.
///
/// The first layer is split by input rows so the global part is computed
/// once instead of per point; the result equals the concatenated form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub local_dim: usize,
    pub layers: [Linear; 3],
}

impl Head {
    fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, local_dim: usize, in_dim: usize, hidden: [usize; 2], out: usize) -> Self {
        Head {
            local_dim,
            layers: [
                Linear::new(ps, prng, &format!("{name}.fc0"), in_dim, hidden[0]),
                Linear::new(ps, prng, &format!("{name}.fc1"), hidden[0], hidden[1]),
                Linear::new(ps, prng, &format!("{name}.fc2"), hidden[1], out),
            ],
        }
    }

    fn forward(&self, g: &mut Graph<'_>, local: Var, globals: &[Var]) -> Result<Var> {
        let first = &self.layers[0];
        let lw = g.value(local).cols();
        let gw: usize = globals.iter().map(|&v| g.value(v).cols()).sum();
        if lw != self.local_dim || lw + gw != first.in_dim {
            return Err(Error::shape("msa head input", first.in_dim, lw + gw));
        }
        if globals.iter().any(|&v| g.value(v).rows() != 1) {
            return Err(Error::Config("global representations must be single rows".into()));
        }
        let w = g.param(first.weight);
        let b = g.param(first.bias);
        let w_local = g.slice_rows(w, 0, lw)?;
        let w_global = g.slice_rows(w, lw, gw)?;
        let glob = g.concat_cols(globals)?;
        let shared = g.linear(glob, w_global, Some(b))?;
        let per_point = g.matmul(local, w_local)?;
        let h0 = g.add_row(per_point, shared)?;
        let h0 = g.gelu(h0);
        let h1 = self.layers[1].forward_gelu(g, h0)?;
        self.layers[2].forward(g, h1)
    }
}

/// Graph handles for everything the aggregation produces.
#[derive(Clone, Copy, Debug)]
pub struct MsaVars {
    pub inst_local: Var,
    pub inst_global: Var,
    pub cat_local: Var,
    pub cat_global: Var,
    pub deformation: Var,
    pub correspondence: Var,
    pub model: Var,
    pub nocs: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Msa {
    pub cfg: MsaConfig,
    pub unify_app: Linear,
    pub unify_geo: Linear,
    pub inst_global: [Linear; 2],
    pub cat_local: [Linear; 2],
    pub cat_global: [Linear; 2],
    pub deform: Head,
    pub corr: Head,
}

impl Msa {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, cfg: MsaConfig) -> Result<Self> {
        if [cfg.app_dim, cfg.geo_dim, cfg.inst_hidden, cfg.cat_local, cfg.cat_hidden, cfg.global_dim, cfg.prior_points]
            .contains(&0)
            || cfg.head_hidden.contains(&0)
        {
            return Err(Error::Config("aggregation widths must be positive".into()));
        }
        let n = |s: &str| format!("{name}.{s}");
        Ok(Msa {
            unify_app: Linear::new(ps, prng, &n("unify_app"), cfg.app_dim, cfg.app_dim),
            unify_geo: Linear::new(ps, prng, &n("unify_geo"), cfg.geo_dim, cfg.geo_dim),
            inst_global: [
                Linear::new(ps, prng, &n("inst_global0"), cfg.inst_local(), cfg.inst_hidden),
                Linear::new(ps, prng, &n("inst_global1"), cfg.inst_hidden, cfg.global_dim),
            ],
            cat_local: [
                Linear::new(ps, prng, &n("cat_local0"), 3, cfg.cat_local),
                Linear::new(ps, prng, &n("cat_local1"), cfg.cat_local, cfg.cat_local),
            ],
            cat_global: [
                Linear::new(ps, prng, &n("cat_global0"), cfg.cat_local, cfg.cat_hidden),
                Linear::new(ps, prng, &n("cat_global1"), cfg.cat_hidden, cfg.global_dim),
            ],
            deform: Head::new(ps, prng, &n("deform"), cfg.cat_local, cfg.deformation_in(), cfg.head_hidden, 3),
            corr: Head::new(ps, prng, &n("corr"), cfg.inst_local(), cfg.correspondence_in(), cfg.head_hidden, cfg.prior_points),
            cfg,
        })
    }

    /// `[N, D]` appearance and `[N, 𝒟]` geometry → (`[N, D+𝒟]` local, `[1, G]` global).
    pub fn instance_graph(&self, g: &mut Graph<'_>, app: Var, geo: Var) -> Result<(Var, Var)> {
        let (na, ng) = (g.value(app).rows(), g.value(geo).rows());
        if na != ng {
            return Err(Error::shape("instance representations", na, ng));
        }
        let a = self.unify_app.forward_gelu(g, app)?;
        let p = self.unify_geo.forward_gelu(g, geo)?;
        let local = g.concat_cols(&[a, p])?;
        let h = self.inst_global[0].forward_gelu(g, local)?;
        let h = self.inst_global[1].forward_gelu(g, h)?;
        Ok((local, g.mean_rows(h)?))
    }

    pub fn category_graph(&self, g: &mut Graph<'_>, prior: Var) -> Result<(Var, Var)> {
        let h = self.cat_local[0].forward_gelu(g, prior)?;
        let local = self.cat_local[1].forward_gelu(g, h)?;
        let h = self.cat_global[0].forward_gelu(g, local)?;
        let h = self.cat_global[1].forward_gelu(g, h)?;
        Ok((local, g.mean_rows(h)?))
    }

    pub fn deformation_graph(&self, g: &mut Graph<'_>, cat_local: Var, cat_global: Var, inst_global: Var) -> Result<Var> {
        self.deform.forward(g, cat_local, &[cat_global, inst_global])
    }

    pub fn correspondence_graph(&self, g: &mut Graph<'_>, inst_local: Var, cat_global: Var, inst_global: Var) -> Result<Var> {
        let logits = self.corr.forward(g, inst_local, &[cat_global, inst_global])?;
        Ok(g.softmax_rows(logits))
    }

    /// Full aggregation from per-point appearance and geometry.
    pub fn forward_graph(&self, g: &mut Graph<'_>, app: Var, geo: Var, prior: Var) -> Result<MsaVars> {
        let (inst_local, inst_global) = self.instance_graph(g, app, geo)?;
        let (cat_local, cat_global) = self.category_graph(g, prior)?;
        let deformation = self.deformation_graph(g, cat_local, cat_global, inst_global)?;
        let correspondence = self.correspondence_graph(g, inst_local, cat_global, inst_global)?;
        let (model, nocs) = reconstruct_graph(g, prior, deformation, correspondence)?;
        Ok(MsaVars { inst_local, inst_global, cat_local, cat_global, deformation, correspondence, model, nocs })
    }

    pub fn instance_representations(&self, ps: &ParamSet, app: &Tensor, geo: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(ps);
        let (a, p) = (g.input(app.clone()), g.input(geo.clone()));
        let (l, gl) = self.instance_graph(&mut g, a, p)?;
        Ok((g.value(l).clone(), flat(g.value(gl))))
    }

    pub fn category_representations(&self, ps: &ParamSet, prior: &ShapePrior) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(ps);
        let p = g.input(prior.points.clone());
        let (l, gl) = self.category_graph(&mut g, p)?;
        Ok((g.value(l).clone(), flat(g.value(gl))))
    }

    pub fn deformation_head(&self, ps: &ParamSet, cat_local: &Tensor, cat_global: &Tensor, inst_global: &Tensor) -> Result<DeformationField> {
        let mut g = Graph::new(ps);
        let (l, cg, ig) = (g.input(cat_local.clone()), g.input(row(cat_global)), g.input(row(inst_global)));
        let d = self.deformation_graph(&mut g, l, cg, ig)?;
        Ok(DeformationField(g.value(d).clone()))
    }

    pub fn correspondence_head(&self, ps: &ParamSet, inst_local: &Tensor, cat_global: &Tensor, inst_global: &Tensor) -> Result<CorrespondenceMatrix> {
        let mut g = Graph::new(ps);
        let (l, cg, ig) = (g.input(inst_local.clone()), g.input(row(cat_global)), g.input(row(inst_global)));
        let a = self.correspondence_graph(&mut g, l, cg, ig)?;
        Ok(CorrespondenceMatrix(g.value(a).clone()))
    }
}

/// `model = prior + D_def`, `nocs = A · model`.
pub fn reconstruct_graph(g: &mut Graph<'_>, prior: Var, deformation: Var, correspondence: Var) -> Result<(Var, Var)> {
    let model = g.add(prior, deformation)?;
    let nocs = g.matmul(correspondence, model)?;
    Ok((model, nocs))
}

/// Row `j` of the result is the appearance feature at pixel `idx[j]`.
pub fn gather_appearance(app: &Tensor, idx: &PixelPointIndex) -> Result<Tensor> {
    let flat = match *app.shape() {
        [h, w, c] => app.clone().reshape(&[h * w, c])?,
        [_, _] => app.clone(),
        _ => return Err(Error::shape("gather_appearance", "[H, W, D]", app.shape())),
    };
    idx.validate(flat.rows())?;
    Ok(flat.select_rows(&idx.0))
}

pub fn reconstruct_and_project(
    prior: &ShapePrior,
    deformation: &DeformationField,
    correspondence: &CorrespondenceMatrix,
) -> Result<(Tensor, NocsCoords)> {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let p = g.input(prior.points.clone());
    let d = g.input(deformation.0.clone());
    let a = g.input(correspondence.0.clone());
    let (m, n) = reconstruct_graph(&mut g, p, d, a)?;
    Ok((g.value(m).clone(), NocsCoords(g.value(n).clone())))
}

pub fn bbox_diagonal(points: &Tensor) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in 0..points.rows() {
        for (k, &v) in points.row(r).iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    libm::sqrt((0..3).map(|k| (hi[k] - lo[k]) * (hi[k] - lo[k])).sum())
}

fn check_points(what: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 || t.cols() != 3 {
        return Err(Error::shape(what, "[N, 3]", t.shape()));
    }
    if t.rows() < 3 {
        return Err(Error::EmptyInput(what));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn flat(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

fn row(t: &Tensor) -> Tensor {
    Tensor::new(&[1, t.len()], t.data().to_vec()).expect("length matches")
}
