//! Pyramid transformer over RGB crops with an all-MLP decoder.
//!
//! Each stage embeds overlapping patches, then runs `layers` blocks of
//! `x += SRMA(IN(x)); x = C-FFN(x)`. Spatial-reduction attention (SRMA)
//! attends from every token to an `R × R`-pooled copy of the grid; the
//! convolutional feed-forward block (C-FFN) carries position through a 3×3
//! convolution instead of a positional encoding.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::numerics::{
    Conv3x3Params, Graph, InstanceNormLayer, Linear, MixPlan, ParamSet, PatchGeom, Prng, Tensor, Var,
};
use crate::{Error, Result};

/// Per-stage hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelStageConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Key/value pooling factor `R` (the grid is reduced by `R × R`).
    pub reduction: usize,
    pub patch: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PixelStageConfig {
    pub fn expanded(&self) -> usize {
        self.channels * self.ffn_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelformerConfig {
    pub in_channels: usize,
    pub stages: Vec<PixelStageConfig>,
    pub layers: usize,
    pub out_dim: usize,
}

impl PixelformerConfig {
    fn with_channels(channels: [usize; 4], heads: [usize; 4]) -> Self {
        let ratios = [8, 8, 4, 4];
        let reductions = [8, 4, 2, 1];
        let patches = [(7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1)];
        let stages = (0..4)
            .map(|i| PixelStageConfig {
                channels: channels[i],
                heads: heads[i],
                ffn_ratio: ratios[i],
                reduction: reductions[i],
                patch: patches[i].0,
                stride: patches[i].1,
                pad: patches[i].2,
            })
            .collect();
        PixelformerConfig { in_channels: 3, stages, layers: 2, out_dim: 32 }
    }

    /// Full-size settings: C = [32, 64, 160, 256], M = [1, 2, 5, 8].
    pub fn paper() -> Self {
        Self::with_channels([32, 64, 160, 256], [1, 2, 5, 8])
    }

    /// Reduced channels for fast runs: C = [8, 16, 24, 32], M = [1, 2, 3, 4].
    pub fn desk() -> Self {
        Self::with_channels([8, 16, 24, 32], [1, 2, 3, 4])
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Channel/head rules independent of the input size.
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!("{} stages, 4 required", self.stages.len())));
        }
        let mut prev = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::Config(format!("stage {i}: {} channels not divisible by {} heads", s.channels, s.heads)));
            }
            if s.channels <= prev && i > 0 {
                return Err(Error::Config(format!("stage {i}: channels must grow ({prev} → {})", s.channels)));
            }
            if s.reduction == 0 || s.stride == 0 {
                return Err(Error::Config(format!("stage {i}: zero reduction or stride")));
            }
            prev = s.channels;
        }
        Ok(())
    }

    /// Grid size after every stage for an `h × w` input, checking every
    /// patch and reduction tiles exactly.
    pub fn stage_grids(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input {h}×{w} is not a positive multiple of 32")));
        }
        let mut grids = Vec::with_capacity(4);
        let (mut gh, mut gw, mut c) = (h, w, self.in_channels);
        for (i, s) in self.stages.iter().enumerate() {
            let geom = PatchGeom { h: gh, w: gw, c, k: s.patch, stride: s.stride, pad: s.pad };
            if !tiles(&geom) {
                return Err(Error::Config(format!("stage {i}: patch geometry does not tile {gh}×{gw}")));
            }
            gh = geom.out_h();
            gw = geom.out_w();
            if gh % s.reduction != 0 || gw % s.reduction != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: reduction {} does not divide the {gh}×{gw} grid",
                    s.reduction
                )));
            }
            c = s.channels;
            grids.push((gh, gw));
        }
        Ok(grids)
    }
}

/// Spatial-reduction multi-head attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Srma {
    pub dim: usize,
    pub heads: usize,
    pub reduction: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr_norm: InstanceNormLayer,
    pub sr: Linear,
}

impl Srma {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, dim: usize, heads: usize, reduction: usize) -> Self {
        Srma {
            dim,
            heads,
            reduction,
            q: Linear::new(ps, prng, &format!("{name}.q"), dim, dim),
            k: Linear::new(ps, prng, &format!("{name}.k"), dim, dim),
            v: Linear::new(ps, prng, &format!("{name}.v"), dim, dim),
            proj: Linear::new(ps, prng, &format!("{name}.proj"), dim, dim),
            sr_norm: InstanceNormLayer::new(ps, &format!("{name}.sr_norm"), dim),
            sr: Linear::new(ps, prng, &format!("{name}.sr"), reduction * reduction * dim, dim),
        }
    }

    /// `Reshape(IN(x), R) · W`: each `R × R` block of the `h × w` grid
    /// becomes one token of width `R²·C`, projected back to `C`.
    pub fn spatial_reduce(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let r = self.reduction;
        if h % r != 0 || w % r != 0 {
            return Err(Error::Config(format!("reduction {r} does not divide the {h}×{w} grid")));
        }
        let n = self.sr_norm.forward(g, x)?;
        let blocks = g.im2col(n, PatchGeom { h, w, c: self.dim, k: r, stride: r, pad: 0 })?;
        self.sr.forward(g, blocks)
    }

    /// Attention output and the per-head probability matrices.
    pub fn forward_with_probs(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<(Var, Vec<Var>)> {
        let c = g.value(x).cols();
        if c != self.dim || g.value(x).rows() != h * w {
            return Err(Error::shape("srma", [h * w, self.dim], g.value(x).shape()));
        }
        let q = self.q.forward(g, x)?;
        let reduced = self.spatial_reduce(g, x, h, w)?;
        let k = self.k.forward(g, reduced)?;
        let v = self.v.forward(g, reduced)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores);
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.proj.forward(g, merged)?, probs))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        Ok(self.forward_with_probs(g, x, h, w)?.0)
    }

    /// Tape-free evaluation on an `[h, w, C]` grid.
    pub fn apply(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let [h, w, _] = grid(x, "srma")?;
        let mut g = Graph::new(ps);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, xi, h, w)?;
        g.value(y).clone().reshape(x.shape())
    }
}

/// Convolutional feed-forward block, residual included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cffn {
    pub norm: InstanceNormLayer,
    pub fc1: Linear,
    pub conv: Conv3x3Params,
    pub fc2: Linear,
}

impl Cffn {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, dim: usize, expanded: usize) -> Self {
        Cffn {
            norm: InstanceNormLayer::new(ps, &format!("{name}.norm"), dim),
            fc1: Linear::new(ps, prng, &format!("{name}.fc1"), dim, expanded),
            conv: Conv3x3Params::new(ps, prng, &format!("{name}.conv"), expanded, expanded),
            fc2: Linear::new(ps, prng, &format!("{name}.fc2"), expanded, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        if g.value(x).rows() != h * w {
            return Err(Error::shape("cffn", h * w, g.value(x).rows()));
        }
        let n = self.norm.forward(g, x)?;
        let f0 = self.fc1.forward(g, n)?;
        let f1 = self.conv.forward(g, f0, h, w)?;
        let f2 = g.gelu(f1);
        let f3 = self.fc2.forward(g, f2)?;
        g.add(f3, x)
    }

    pub fn apply(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let [h, w, _] = grid(x, "cffn")?;
        let mut g = Graph::new(ps);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, xi, h, w)?;
        g.value(y).clone().reshape(x.shape())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelBlock {
    pub norm: InstanceNormLayer,
    pub attn: Srma,
    pub ffn: Cffn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelStage {
    pub cfg: PixelStageConfig,
    pub in_channels: usize,
    pub embed: Linear,
    pub blocks: Vec<PixelBlock>,
}

impl PixelStage {
    fn patch_geom(&self, h: usize, w: usize) -> PatchGeom {
        PatchGeom { h, w, c: self.in_channels, k: self.cfg.patch, stride: self.cfg.stride, pad: self.cfg.pad }
    }

    /// Overlapped patch embedding of an `h × w` grid; returns the new grid size.
    pub fn embed(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let geom = self.patch_geom(h, w);
        if !tiles(&geom) {
            return Err(Error::Config(format!("patch geometry {geom:?} does not tile the grid")));
        }
        let cols = g.im2col(x, geom)?;
        Ok((self.embed.forward(g, cols)?, geom.out_h(), geom.out_w()))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let (mut x, h, w) = self.embed(g, x, h, w)?;
        for b in &self.blocks {
            let n = b.norm.forward(g, x)?;
            let a = b.attn.forward(g, n, h, w)?;
            x = g.add(x, a)?;
            x = b.ffn.forward(g, x, h, w)?;
        }
        Ok((x, h, w))
    }
}

/// Stage outputs, each an `[h_i, w_i, C_i]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
}

/// Per-pixel appearance features `[H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceMap(pub Tensor);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelDecoder {
    pub unify: Vec<Linear>,
    pub fuse: Linear,
    pub lift: Linear,
    pub refine: Linear,
    pub out: Linear,
}

/// Graph handle of one encoder level.
#[derive(Clone, Copy, Debug)]
pub struct Level {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixelformer {
    pub cfg: PixelformerConfig,
    pub stages: Vec<PixelStage>,
    pub decoder: PixelDecoder,
}

impl Pixelformer {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, cfg: PixelformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut prev = cfg.in_channels;
        for (i, s) in cfg.stages.iter().enumerate() {
            let sname = format!("{name}.stage{i}");
            let embed = Linear::new(ps, prng, &format!("{sname}.embed"), s.patch * s.patch * prev, s.channels);
            let blocks = (0..cfg.layers)
                .map(|l| {
                    let bname = format!("{sname}.block{l}");
                    PixelBlock {
                        norm: InstanceNormLayer::new(ps, &format!("{bname}.norm"), s.channels),
                        attn: Srma::new(ps, prng, &format!("{bname}.attn"), s.channels, s.heads, s.reduction),
                        ffn: Cffn::new(ps, prng, &format!("{bname}.ffn"), s.channels, s.expanded()),
                    }
                })
                .collect();
            stages.push(PixelStage { cfg: *s, in_channels: prev, embed, blocks });
            prev = s.channels;
        }
        let c4 = cfg.last_channels();
        let d = cfg.out_dim;
        let decoder = PixelDecoder {
            unify: cfg
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| Linear::new(ps, prng, &format!("{name}.dec.unify{i}"), s.channels, c4))
                .collect(),
            fuse: Linear::new(ps, prng, &format!("{name}.dec.fuse"), 4 * c4, c4),
            lift: Linear::new(ps, prng, &format!("{name}.dec.lift"), c4, 2 * d),
            refine: Linear::new(ps, prng, &format!("{name}.dec.refine"), 2 * d, 2 * d),
            out: Linear::new(ps, prng, &format!("{name}.dec.out"), 2 * d, d),
        };
        Ok(Pixelformer { cfg, stages, decoder })
    }

    /// Runs the four stages on an `[H·W, 3]` image node.
    pub fn encode_graph(&self, g: &mut Graph<'_>, img: Var, h: usize, w: usize) -> Result<Vec<Level>> {
        self.cfg.stage_grids(h, w)?;
        let mut x = img;
        let (mut gh, mut gw) = (h, w);
        let mut levels = Vec::with_capacity(4);
        for s in &self.stages {
            let (y, nh, nw) = s.forward(g, x, gh, gw)?;
            levels.push(Level { var: y, h: nh, w: nw });
            x = y;
            gh = nh;
            gw = nw;
        }
        Ok(levels)
    }

    /// Decoder up to the `H/2 × W/2 × 2D` map (before the last upsampling).
    fn decode_half(&self, g: &mut Graph<'_>, levels: &[Level], h: usize, w: usize) -> Result<(Var, usize, usize)> {
        if levels.len() != 4 {
            return Err(Error::Config(format!("{} pyramid levels, 4 required", levels.len())));
        }
        let (qh, qw) = (h / 4, w / 4);
        let mut unified = Vec::with_capacity(4);
        for (lvl, unify) in levels.iter().zip(&self.decoder.unify) {
            let u = unify.forward(g, lvl.var)?;
            let u = if (lvl.h, lvl.w) == (qh, qw) {
                u
            } else {
                g.mix(u, Rc::new(MixPlan::bilinear(lvl.h, lvl.w, qh, qw)))?
            };
            unified.push(u);
        }
        let cat = g.concat_cols(&unified)?;
        let fused = self.decoder.fuse.forward(g, cat)?;
        let up = g.mix(fused, Rc::new(MixPlan::bilinear(qh, qw, h / 2, w / 2)))?;
        Ok((self.decoder.lift.forward(g, up)?, h / 2, w / 2))
    }

    fn decode_head(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let r = self.decoder.refine.forward(g, x)?;
        self.decoder.out.forward(g, r)
    }

    /// Full-resolution decoder output `[H·W, D]`.
    pub fn decode_graph(&self, g: &mut Graph<'_>, levels: &[Level], h: usize, w: usize) -> Result<Var> {
        let (half, hh, hw) = self.decode_half(g, levels, h, w)?;
        let up = g.mix(half, Rc::new(MixPlan::bilinear(hh, hw, h, w)))?;
        self.decode_head(g, up)
    }

    /// Decoder output evaluated only at the given flat pixel indices: `[N, D]`.
    ///
    /// The head after the last upsampling is pointwise, so this equals
    /// gathering those rows from [`Self::decode_graph`].
    pub fn decode_at_graph(&self, g: &mut Graph<'_>, levels: &[Level], h: usize, w: usize, pixels: &[usize]) -> Result<Var> {
        if let Some(&bad) = pixels.iter().find(|&&p| p >= h * w) {
            return Err(Error::IndexOutOfRange { index: bad, bound: h * w });
        }
        let (half, hh, hw) = self.decode_half(g, levels, h, w)?;
        let up = g.mix(half, Rc::new(MixPlan::bilinear_at(hh, hw, h, w, pixels)))?;
        self.decode_head(g, up)
    }

    /// Tape-free stage-`i` patch embedding of an `[h, w, C_{i-1}]` grid.
    pub fn overlapped_patch_embed(&self, ps: &ParamSet, stage: usize, x: &Tensor) -> Result<Tensor> {
        let [h, w, _] = grid(x, "overlapped_patch_embed")?;
        let s = self.stage(stage)?;
        let mut g = Graph::new(ps);
        let xi = g.input(x.clone());
        let (y, oh, ow) = s.embed(&mut g, xi, h, w)?;
        g.value(y).clone().reshape(&[oh, ow, s.cfg.channels])
    }

    pub fn stage(&self, i: usize) -> Result<&PixelStage> {
        self.stages.get(i).ok_or(Error::IndexOutOfRange { index: i, bound: self.stages.len() })
    }

    pub fn encode(&self, ps: &ParamSet, img: &Tensor) -> Result<PyramidFeatures> {
        let [h, w, c] = grid(img, "pixelformer")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape("pixelformer input channels", self.cfg.in_channels, c));
        }
        let mut g = Graph::new(ps);
        let x = g.input(img.clone());
        let levels = self.encode_graph(&mut g, x, h, w)?;
        levels
            .iter()
            .zip(&self.cfg.stages)
            .map(|(l, s)| g.value(l.var).clone().reshape(&[l.h, l.w, s.channels]))
            .collect::<Result<Vec<_>>>()
            .map(|levels| PyramidFeatures { levels })
    }

    pub fn decode(&self, ps: &ParamSet, pf: &PyramidFeatures) -> Result<AppearanceMap> {
        if pf.levels.len() != 4 {
            return Err(Error::Config(format!("{} pyramid levels, 4 required", pf.levels.len())));
        }
        let mut g = Graph::new(ps);
        let mut levels = Vec::with_capacity(4);
        for (t, s) in pf.levels.iter().zip(&self.cfg.stages) {
            let [h, w, c] = grid(t, "pyramid level")?;
            if c != s.channels {
                return Err(Error::shape("pyramid level channels", s.channels, c));
            }
            levels.push(Level { var: g.input(t.clone()), h, w });
        }
        let (h, w) = (levels[0].h * 4, levels[0].w * 4);
        let y = self.decode_graph(&mut g, &levels, h, w)?;
        Ok(AppearanceMap(g.value(y).clone().reshape(&[h, w, self.cfg.out_dim])?))
    }

    /// Encoder then decoder on an `[H, W, 3]` image.
    pub fn forward(&self, ps: &ParamSet, img: &Tensor) -> Result<AppearanceMap> {
        let [h, w, _] = grid(img, "pixelformer")?;
        let mut g = Graph::new(ps);
        let x = g.input(img.clone());
        let levels = self.encode_graph(&mut g, x, h, w)?;
        let y = self.decode_graph(&mut g, &levels, h, w)?;
        Ok(AppearanceMap(g.value(y).clone().reshape(&[h, w, self.cfg.out_dim])?))
    }
}

/// The embedding must shrink the grid by exactly its stride.
fn tiles(geom: &PatchGeom) -> bool {
    geom.h % geom.stride == 0
        && geom.w % geom.stride == 0
        && geom.h + 2 * geom.pad >= geom.k
        && geom.w + 2 * geom.pad >= geom.k
        && geom.out_h() == geom.h / geom.stride
        && geom.out_w() == geom.w / geom.stride
}

fn grid(x: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *x.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::shape(op, "[H, W, C]", x.shape())),
    }
}
