//! Transformer over unordered point sets with channelwise attention.
//!
//! Points are mean-centred and lifted to `d` dimensions by a shared MLP. Four
//! independent stages then embed the lifted features to `C_i` channels and
//! run `layers` blocks of `x += CWMHA(IN(x)); x = FFN(x)`. Channelwise
//! multi-head attention (CWMHA) attends between channels, with weights
//! pooled over all points, so every stage is permutation-equivariant.

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{Graph, InstanceNormLayer, Linear, ParamSet, Prng, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointformerConfig {
    pub channels: [usize; 4],
    pub heads: [usize; 4],
    pub ffn_ratio: [usize; 4],
    pub layers: usize,
    pub lift_dim: usize,
    pub out_dim: usize,
}

impl PointformerConfig {
    pub fn paper() -> Self {
        PointformerConfig {
            channels: [32, 64, 160, 256],
            heads: [1, 2, 5, 8],
            ffn_ratio: [8, 8, 4, 4],
            layers: 2,
            lift_dim: 64,
            out_dim: 64,
        }
    }

    pub fn desk() -> Self {
        PointformerConfig { channels: [8, 16, 24, 32], heads: [1, 2, 3, 4], ..Self::paper() }
    }

    pub fn expanded(&self, stage: usize) -> usize {
        self.channels[stage] * self.ffn_ratio[stage]
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            let (c, m) = (self.channels[i], self.heads[i]);
            if c == 0 || m == 0 || c % m != 0 {
                return Err(Error::Config(format!("stage {i}: {c} channels not divisible by {m} heads")));
            }
        }
        if self.lift_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("lift and output dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Observed points `[N, 3]` in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud(Tensor);

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rank() != 2 || points.cols() != 3 {
            return Err(Error::shape("point cloud", "[N, 3]", points.shape()));
        }
        let t = points;
        if t.rows() < 3 {
            return Err(Error::EmptyInput("point cloud needs at least 3 points"));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(PointCloud(t))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for r in 0..self.len() {
            for (k, v) in self.0.row(r).iter().enumerate() {
                c[k] += v;
            }
        }
        c.map(|v| v / self.len() as f64)
    }

    pub fn centered(&self) -> Tensor {
        let c = self.centroid();
        let mut t = self.0.clone();
        for r in 0..t.rows() {
            for (k, v) in t.row_mut(r).iter_mut().enumerate() {
                *v -= c[k];
            }
        }
        t
    }

    /// Rows reordered so that row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PointCloud(self.0.select_rows(perm))
    }
}

/// Pointwise geometric features `[N, 𝒟]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryFeatures(pub Tensor);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cwmha {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl Cwmha {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels not divisible by {heads} heads")));
        }
        Ok(Cwmha {
            dim,
            heads,
            q: Linear::new(ps, prng, &format!("{name}.q"), dim, dim),
            k: Linear::new(ps, prng, &format!("{name}.k"), dim, dim),
            v: Linear::new(ps, prng, &format!("{name}.v"), dim, dim),
            proj: Linear::new(ps, prng, &format!("{name}.proj"), dim, dim),
        })
    }

    /// Output and the per-head `d_head × d_head` channel-attention matrices.
    pub fn forward_with_probs(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        if g.value(x).cols() != self.dim {
            return Err(Error::shape("cwmha", self.dim, g.value(x).cols()));
        }
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_tn(qh, kh)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            outs.push(g.matmul_nt(vh, a)?);
            probs.push(a);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.proj.forward(g, merged)?, probs))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_probs(g, x)?.0)
    }

    pub fn apply(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        eval(ps, x, |g, x| self.forward(g, x))
    }
}

/// `IN → fc1 → fc2 → GELU → fc3`, plus the residual.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointFfn {
    pub norm: InstanceNormLayer,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl PointFfn {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, dim: usize, expanded: usize) -> Self {
        PointFfn {
            norm: InstanceNormLayer::new(ps, &format!("{name}.norm"), dim),
            fc1: Linear::new(ps, prng, &format!("{name}.fc1"), dim, expanded),
            fc2: Linear::new(ps, prng, &format!("{name}.fc2"), expanded, expanded),
            fc3: Linear::new(ps, prng, &format!("{name}.fc3"), expanded, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        let f0 = self.fc1.forward(g, n)?;
        let f1 = self.fc2.forward_gelu(g, f0)?;
        let f2 = self.fc3.forward(g, f1)?;
        g.add(f2, x)
    }

    pub fn apply(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        eval(ps, x, |g, x| self.forward(g, x))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointBlock {
    pub norm: InstanceNormLayer,
    pub attn: Cwmha,
    pub ffn: PointFfn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointStage {
    pub embed: Linear,
    pub blocks: Vec<PointBlock>,
}

impl PointStage {
    pub fn forward(&self, g: &mut Graph<'_>, lifted: Var) -> Result<Var> {
        let mut x = self.embed.forward(g, lifted)?;
        for b in &self.blocks {
            let n = b.norm.forward(g, x)?;
            let a = b.attn.forward(g, n)?;
            x = g.add(x, a)?;
            x = b.ffn.forward(g, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pointformer {
    pub cfg: PointformerConfig,
    pub lift: [Linear; 2],
    pub stages: Vec<PointStage>,
    pub unify: Vec<Linear>,
    pub fuse: Linear,
}

impl Pointformer {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, cfg: PointformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.lift_dim;
        let lift = [
            Linear::new(ps, prng, &format!("{name}.lift0"), 3, d),
            Linear::new(ps, prng, &format!("{name}.lift1"), d, d),
        ];
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let c = cfg.channels[i];
            let sname = format!("{name}.stage{i}");
            let embed = Linear::new(ps, prng, &format!("{sname}.embed"), d, c);
            let mut blocks = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let bname = format!("{sname}.block{l}");
                blocks.push(PointBlock {
                    norm: InstanceNormLayer::new(ps, &format!("{bname}.norm"), c),
                    attn: Cwmha::new(ps, prng, &format!("{bname}.attn"), c, cfg.heads[i])?,
                    ffn: PointFfn::new(ps, prng, &format!("{bname}.ffn"), c, cfg.expanded(i)),
                });
            }
            stages.push(PointStage { embed, blocks });
        }
        let unify = (0..4)
            .map(|i| Linear::new(ps, prng, &format!("{name}.dec.unify{i}"), cfg.channels[i], cfg.out_dim))
            .collect();
        let fuse = Linear::new(ps, prng, &format!("{name}.dec.fuse"), 4 * cfg.out_dim, cfg.out_dim);
        Ok(Pointformer { cfg, lift, stages, unify, fuse })
    }

    pub fn lift_graph(&self, g: &mut Graph<'_>, centered: Var) -> Result<Var> {
        let h = self.lift[0].forward_gelu(g, centered)?;
        self.lift[1].forward_gelu(g, h)
    }

    /// Stage outputs `{[N, C_i]}` for a node holding mean-centred points.
    pub fn encode_graph(&self, g: &mut Graph<'_>, centered: Var) -> Result<Vec<Var>> {
        let lifted = self.lift_graph(g, centered)?;
        self.stages.iter().map(|s| s.forward(g, lifted)).collect()
    }

    pub fn decode_graph(&self, g: &mut Graph<'_>, levels: &[Var]) -> Result<Var> {
        if levels.len() != 4 {
            return Err(Error::Config(format!("{} point levels, 4 required", levels.len())));
        }
        let n = g.value(levels[0]).rows();
        let mut parts = Vec::with_capacity(4);
        for (&l, unify) in levels.iter().zip(&self.unify) {
            if g.value(l).rows() != n {
                return Err(Error::shape("point decoder", n, g.value(l).rows()));
            }
            parts.push(unify.forward(g, l)?);
        }
        let cat = g.concat_cols(&parts)?;
        self.fuse.forward(g, cat)
    }

    /// Lifts, encodes and decodes; the cloud is centred here.
    pub fn forward_graph(&self, g: &mut Graph<'_>, cloud: &PointCloud) -> Result<Var> {
        let x = g.input(cloud.centered());
        let levels = self.encode_graph(g, x)?;
        self.decode_graph(g, &levels)
    }

    pub fn lift_points(&self, ps: &ParamSet, cloud: &PointCloud) -> Result<Tensor> {
        eval(ps, &cloud.centered(), |g, x| self.lift_graph(g, x))
    }

    pub fn input_feature_embed(&self, ps: &ParamSet, stage: usize, x: &Tensor) -> Result<Tensor> {
        let s = self.stage(stage)?;
        eval(ps, x, |g, x| s.embed.forward(g, x))
    }

    pub fn stage(&self, i: usize) -> Result<&PointStage> {
        self.stages.get(i).ok_or(Error::IndexOutOfRange { index: i, bound: self.stages.len() })
    }

    pub fn encode(&self, ps: &ParamSet, cloud: &PointCloud) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(ps);
        let x = g.input(cloud.centered());
        let levels = self.encode_graph(&mut g, x)?;
        Ok(levels.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn decode(&self, ps: &ParamSet, levels: &[Tensor]) -> Result<GeometryFeatures> {
        let mut g = Graph::new(ps);
        let vars: Vec<_> = levels.iter().map(|t| g.input(t.clone())).collect();
        let y = self.decode_graph(&mut g, &vars)?;
        Ok(GeometryFeatures(g.value(y).clone()))
    }

    pub fn forward(&self, ps: &ParamSet, cloud: &PointCloud) -> Result<GeometryFeatures> {
        let mut g = Graph::new(ps);
        let y = self.forward_graph(&mut g, cloud)?;
        Ok(GeometryFeatures(g.value(y).clone()))
    }
}

fn eval(ps: &ParamSet, x: &Tensor, f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new(ps);
    let xi = g.input(x.clone());
    let y = f(&mut g, xi)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut p = Prng::new(seed);
        PointCloud::new(Tensor::new(&[n, 3], (0..3 * n).map(|_| p.uniform_in(-0.2, 0.2)).collect()).unwrap()).unwrap()
    }

    #[test]
    fn desk_shapes_and_heads() {
        let mut ps = ParamSet::new();
        let m = Pointformer::new(&mut ps, &mut Prng::new(0), "pt", PointformerConfig::desk()).unwrap();
        let c = cloud(40, 1);
        let levels = m.encode(&ps, &c).unwrap();
        let widths: Vec<_> = levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(widths, [[40, 8], [40, 16], [40, 24], [40, 32]]);
        assert_eq!(m.decode(&ps, &levels).unwrap().0.shape(), &[40, 64]);
    }

    #[test]
    fn channel_attention_rows_are_stochastic() {
        let mut ps = ParamSet::new();
        let a = Cwmha::new(&mut ps, &mut Prng::new(2), "a", 6, 2).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.input(cloud(10, 3).points().clone().reshape(&[5, 6]).unwrap());
        let (_, probs) = a.forward_with_probs(&mut g, x).unwrap();
        for p in probs {
            let t = g.value(p);
            assert_eq!(t.shape(), &[3, 3]);
            for r in 0..3 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_heads_and_tiny_clouds() {
        let mut ps = ParamSet::new();
        assert!(Cwmha::new(&mut ps, &mut Prng::new(0), "a", 10, 3).is_err());
        assert!(PointCloud::new(Tensor::zeros(&[2, 3])).is_err());
    }
}
