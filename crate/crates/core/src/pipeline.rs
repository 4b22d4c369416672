//! End-to-end model: Pixelformer, Pointformer, aggregation, pose recovery.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::losses::{loss_graph, LossParts, LossVars, LossWeights};
use crate::msa::{
    reconstruct_and_project, CorrespondenceMatrix, DeformationField, Msa, MsaConfig, MsaVars, NocsCoords,
    PixelPointIndex, ShapePrior,
};
use crate::numerics::{Grads, Graph, ParamSet, Prng, Tensor};
use crate::pixelformer::{Pixelformer, PixelformerConfig};
use crate::pointformer::{PointCloud, Pointformer, PointformerConfig};
use crate::pose::{estimate_pose, Pose, RansacConfig};
use crate::synth::SynthSample;
use crate::{Error, Result};

/// Size preset shared by data generation and the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// 256×256 crops, 1024 points, full channel widths.
    Paper,
    /// 64×64 crops, 256 points, reduced channel widths.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected paper or desk)"))),
        }
    }

    pub fn image_size(self) -> usize {
        match self {
            Profile::Paper => 256,
            Profile::Desk => 64,
        }
    }

    pub fn points(self) -> usize {
        match self {
            Profile::Paper => 1024,
            Profile::Desk => 256,
        }
    }

    pub fn prior_points(self) -> usize {
        self.points()
    }

    pub fn pixel(self) -> PixelformerConfig {
        match self {
            Profile::Paper => PixelformerConfig::paper(),
            Profile::Desk => PixelformerConfig::desk(),
        }
    }

    pub fn point(self) -> PointformerConfig {
        match self {
            Profile::Paper => PointformerConfig::paper(),
            Profile::Desk => PointformerConfig::desk(),
        }
    }

    pub fn msa(self) -> MsaConfig {
        match self {
            Profile::Paper => MsaConfig::paper(),
            Profile::Desk => MsaConfig::desk(),
        }
    }
}

impl core::fmt::Display for Profile {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer structure of the full model; weights live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Network {
    pub profile: Profile,
    pub pixel: Pixelformer,
    pub point: Pointformer,
    pub msa: Msa,
}

impl Network {
    /// Builds the forward pass of one sample on `g`, reading weights from
    /// the graph's parameter set.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        cloud: &PointCloud,
        index: &PixelPointIndex,
        prior: &ShapePrior,
    ) -> Result<MsaVars> {
        let s = self.profile.image_size();
        if image.shape() != [s, s, 3] {
            return Err(Error::Config(format!(
                "{} profile expects a {s}×{s}×3 image, got {:?}",
                self.profile,
                image.shape()
            )));
        }
        if cloud.len() != self.profile.points() || index.0.len() != cloud.len() {
            return Err(Error::Config(format!(
                "{} profile expects {} points with one pixel each, got {} points and {} pixels",
                self.profile,
                self.profile.points(),
                cloud.len(),
                index.0.len()
            )));
        }
        if prior.len() != self.profile.prior_points() {
            return Err(Error::Config(format!(
                "{} profile expects a {}-point prior, got {}",
                self.profile,
                self.profile.prior_points(),
                prior.len()
            )));
        }
        let img = g.input(image.clone());
        let levels = self.pixel.encode_graph(g, img, s, s)?;
        let app = self.pixel.decode_at_graph(g, &levels, s, s, &index.0)?;
        let geo = self.point.forward_graph(g, cloud)?;
        let p = g.input(prior.points().clone());
        self.msa.forward_graph(g, app, geo, p)
    }

    /// Forward pass plus the four losses against the sample's ground truth.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        sample: &SynthSample,
        prior: &ShapePrior,
        weights: &LossWeights,
    ) -> Result<(MsaVars, LossVars)> {
        if prior.category != sample.category.id() {
            return Err(Error::Config(format!(
                "prior category {} does not match sample category {}",
                prior.category, sample.category
            )));
        }
        let v = self.forward_graph(g, &sample.image, &sample.points, &sample.index, prior)?;
        let gt_model = g.input(sample.model.clone());
        let gt_nocs = g.input(sample.nocs.clone());
        let l = loss_graph(g, v.model, gt_model, v.nocs, gt_nocs, v.deformation, v.correspondence, weights)?;
        Ok((v, l))
    }
}

/// Weights together with the network that indexes them.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamSet,
}

impl Model {
    pub fn new(profile: Profile, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let pixel = Pixelformer::new(&mut params, &mut Prng::stream(seed, 1), "pixel", profile.pixel())?;
        let point = Pointformer::new(&mut params, &mut Prng::stream(seed, 2), "point", profile.point())?;
        let msa = Msa::new(&mut params, &mut Prng::stream(seed, 3), "msa", profile.msa())?;
        Ok(Model { net: Network { profile, pixel, point, msa }, params })
    }

    /// Model with the given named tensors; names and shapes must match exactly.
    pub fn from_tensors(profile: Profile, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Model::new(profile, 0)?;
        m.params.load(tensors)?;
        Ok(m)
    }

    pub fn profile(&self) -> Profile {
        self.net.profile
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub ransac: RansacConfig,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// Recovered pose, or the pose-solver error.
    pub pose: core::result::Result<Pose, Error>,
    pub model: Tensor,
    pub nocs: NocsCoords,
    pub correspondence: CorrespondenceMatrix,
    pub deformation: DeformationField,
    pub loss: LossParts,
}

/// Network, NOCS projection, robust pose fit and losses against the sample's
/// ground truth.
pub fn run_pipeline(model: &Model, sample: &SynthSample, prior: &ShapePrior, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut g = Graph::new(&model.params);
    let (v, loss) = model.net.loss_graph(&mut g, sample, prior, &cfg.weights)?;
    let nocs = g.value(v.nocs).clone();
    Ok(PipelineOutput {
        pose: estimate_pose(&nocs, sample.points.points(), &cfg.ransac),
        model: g.value(v.model).clone(),
        nocs: NocsCoords(nocs),
        correspondence: CorrespondenceMatrix(g.value(v.correspondence).clone()),
        deformation: DeformationField(g.value(v.deformation).clone()),
        loss: loss.parts(&g),
    })
}

/// Loss parts, total and parameter gradients for one sample.
pub fn sample_gradients(
    net: &Network,
    params: &ParamSet,
    sample: &SynthSample,
    prior: &ShapePrior,
    weights: &LossWeights,
) -> Result<(LossParts, f64, Grads)> {
    let mut g = Graph::new(params);
    let (_, loss) = net.loss_graph(&mut g, sample, prior, weights)?;
    let total = g.scalar(loss.total);
    Ok((loss.parts(&g), total, g.backward(loss.total)))
}

/// Ground-truth aggregation outputs for a sample: observed point `i`
/// corresponds one-hot to model row `i`, and the deformation moves prior
/// row `i` exactly onto that point's NOCS coordinate.
pub fn oracle_msa(sample: &SynthSample, prior: &ShapePrior) -> Result<(DeformationField, CorrespondenceMatrix)> {
    let n = sample.nocs.rows();
    if prior.len() != n {
        return Err(Error::Config(format!("oracle injection needs N = N_c, got {n} and {}", prior.len())));
    }
    let mut d = sample.nocs.clone();
    for (a, b) in d.data_mut().iter_mut().zip(prior.points().data()) {
        *a -= b;
    }
    let ids: Vec<usize> = (0..n).collect();
    Ok((DeformationField(d), CorrespondenceMatrix::one_hot(&ids, n)?))
}

/// Pose from aggregation outputs supplied directly at the MSA boundary.
pub fn pose_from_msa(
    prior: &ShapePrior,
    deformation: &DeformationField,
    correspondence: &CorrespondenceMatrix,
    observed: &PointCloud,
    ransac: &RansacConfig,
) -> Result<Pose> {
    let (_, nocs) = reconstruct_and_project(prior, deformation, correspondence)?;
    estimate_pose(&nocs.0, observed.points(), ransac)
}
