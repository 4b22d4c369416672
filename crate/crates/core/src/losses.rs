//! Training objective: reconstruction Chamfer distance, NOCS correspondence
//! smooth-L1, a deformation-magnitude penalty and a correspondence-entropy
//! penalty.

use alloc::format;

use crate::msa::{CorrespondenceMatrix, DeformationField, NocsCoords};
use crate::numerics::{ChamferMode, Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};

pub use crate::numerics::SMOOTH_L1_BETA;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub chamfer: f64,
    pub correspondence: f64,
    pub deformation: f64,
    pub sparsity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { chamfer: 5.0, correspondence: 1.0, deformation: 1.0, sparsity: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.chamfer, self.correspondence, self.deformation, self.sparsity];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {w:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub chamfer: f64,
    pub correspondence: f64,
    pub deformation: f64,
    pub sparsity: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("chamfer", self.chamfer),
            ("correspondence", self.correspondence),
            ("deformation", self.deformation),
            ("sparsity", self.sparsity),
        ]
    }
}

/// Scalar loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub chamfer: Var,
    pub correspondence: Var,
    pub deformation: Var,
    pub sparsity: Var,
    pub total: Var,
}

impl LossVars {
    pub fn parts(&self, g: &Graph<'_>) -> LossParts {
        LossParts {
            chamfer: g.scalar(self.chamfer),
            correspondence: g.scalar(self.correspondence),
            deformation: g.scalar(self.deformation),
            sparsity: g.scalar(self.sparsity),
        }
    }
}

/// Builds the four losses and their weighted sum on the tape.
pub fn loss_graph(
    g: &mut Graph<'_>,
    model: Var,
    gt_model: Var,
    nocs: Var,
    gt_nocs: Var,
    deformation: Var,
    correspondence: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    let chamfer = g.chamfer(model, gt_model, ChamferMode::Mean)?;
    let correspondence_l = g.smooth_l1(nocs, gt_nocs)?;
    let deformation_l = g.row_norm_mean(deformation)?;
    let sparsity = g.row_entropy_mean(correspondence)?;
    let total = g.weighted_sum(&[
        (chamfer, w.chamfer),
        (correspondence_l, w.correspondence),
        (deformation_l, w.deformation),
        (sparsity, w.sparsity),
    ])?;
    Ok(LossVars { chamfer, correspondence: correspondence_l, deformation: deformation_l, sparsity, total })
}

fn scalar_op(f: impl FnOnce(&mut Graph<'_>) -> Result<Var>) -> Result<f64> {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let v = f(&mut g)?;
    Ok(g.scalar(v))
}

pub fn chamfer(p: &Tensor, q: &Tensor, mode: ChamferMode) -> Result<f64> {
    scalar_op(|g| {
        let (a, b) = (g.input(p.clone()), g.input(q.clone()));
        g.chamfer(a, b, mode)
    })
}

pub fn correspondence_loss(pred: &NocsCoords, gt: &Tensor) -> Result<f64> {
    if pred.0.shape() != gt.shape() {
        return Err(Error::shape("correspondence_loss", gt.shape(), pred.0.shape()));
    }
    scalar_op(|g| {
        let (a, b) = (g.input(pred.0.clone()), g.input(gt.clone()));
        g.smooth_l1(a, b)
    })
}

pub fn deformation_reg(d: &DeformationField) -> Result<f64> {
    scalar_op(|g| {
        let x = g.input(d.0.clone());
        g.row_norm_mean(x)
    })
}

pub fn sparsity_reg(a: &CorrespondenceMatrix) -> Result<f64> {
    scalar_op(|g| {
        let x = g.input(a.0.clone());
        g.row_entropy_mean(x)
    })
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    if let Some((name, v)) = parts.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} loss = {v}")));
    }
    Ok(w.chamfer * parts.chamfer
        + w.correspondence * parts.correspondence
        + w.deformation * parts.deformation
        + w.sparsity * parts.sparsity)
}
