//! Dataset manifests and per-sample directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{Matrix3, Vector3};
use posevit_core::metrics::SymmetryTag;
use posevit_core::msa::{PixelPointIndex, ShapePrior};
use posevit_core::pipeline::Profile;
use posevit_core::pointformer::PointCloud;
use posevit_core::pose::Pose;
use posevit_core::synth::{build_prior, make_sample, Category, GenParams, PoseRanges, SynthSample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::formats;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub category: String,
    pub seed: u64,
    /// Directory relative to the manifest.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub category: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub profile: String,
    pub categories: Vec<String>,
    pub per_category: usize,
    pub seed: u64,
    pub prior_seed: u64,
    pub prior_instances: usize,
    pub mug_handle: bool,
    /// Tilt limit of the up axis in degrees; absent for uniform rotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tilt: Option<f64>,
    pub priors: Vec<PriorEntry>,
    pub samples: Vec<SampleEntry>,
}

/// Settings for `gen`.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub categories: Vec<Category>,
    pub per_category: usize,
    pub seed: u64,
    pub profile: Profile,
    pub prior_seed: u64,
    pub prior_instances: usize,
    pub mug_handle: bool,
    pub max_tilt: Option<f64>,
}

/// Sample seed for instance `i` of `category`; a splitmix64 finaliser over
/// the dataset seed, category id and index.
pub fn sample_seed(seed: u64, category: Category, i: usize) -> u64 {
    let mut z = seed
        .wrapping_add((category.id() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample metadata stored next to the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SampleMeta {
    category: String,
    symmetric: bool,
    /// Row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
    scale: f64,
}

impl Manifest {
    pub fn profile(&self) -> Result<Profile> {
        Ok(Profile::parse(&self.profile)?)
    }

    pub fn gen_params(&self) -> Result<GenParams> {
        Ok(GenParams { mug_handle: self.mug_handle, ..GenParams::for_profile(self.profile()?) })
    }

    pub fn categories(&self) -> Result<Vec<Category>> {
        self.categories.iter().map(|c| Ok(Category::parse(c)?)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| {
            let offset = line_col_offset(&text, e.line(), e.column());
            anyhow!("{}: byte {offset}: {e}", path.display())
        })?;
        if m.version != MANIFEST_VERSION {
            bail!("{}: unsupported manifest version {}", path.display(), m.version);
        }
        m.profile()?;
        m.categories()?;
        Ok(m)
    }
}

fn line_col_offset(text: &str, line: usize, col: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + col.saturating_sub(1)
}

/// Directory containing the manifest file (or the path itself if it is a directory).
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn root_of(manifest_file: &Path) -> &Path {
    manifest_file.parent().unwrap_or(Path::new("."))
}

/// Generates every sample and prior and writes them with the manifest.
pub fn generate(cfg: &GenConfig, out: &Path) -> Result<Manifest> {
    if cfg.categories.is_empty() {
        bail!("no categories given");
    }
    let params = GenParams { mug_handle: cfg.mug_handle, ..GenParams::for_profile(cfg.profile) };
    let ranges = PoseRanges { max_tilt: cfg.max_tilt.map(f64::to_radians), ..PoseRanges::default() };
    let mut entries = Vec::new();
    for &cat in &cfg.categories {
        for i in 0..cfg.per_category {
            entries.push(SampleEntry {
                id: format!("{}/{i:04}", cat.name()),
                category: cat.name().to_string(),
                seed: sample_seed(cfg.seed, cat, i),
                dir: format!("{}/{i:04}", cat.name()),
            });
        }
    }
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let cat = Category::parse(&e.category)?;
        let s = make_sample(cat, e.seed, cfg.profile, &params, &ranges).with_context(|| format!("generating {}", e.id))?;
        write_sample(&out.join(&e.dir), &s)
    })?;
    let priors = cfg
        .categories
        .par_iter()
        .map(|&cat| -> Result<PriorEntry> {
            let p = build_prior(cat, cfg.prior_instances, cfg.prior_seed, &params)?;
            let file = format!("priors/{}.txt", cat.name());
            formats::write_points(&out.join(&file), p.points())?;
            Ok(PriorEntry { category: cat.name().to_string(), file })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        version: MANIFEST_VERSION,
        profile: cfg.profile.name().to_string(),
        categories: cfg.categories.iter().map(|c| c.name().to_string()).collect(),
        per_category: cfg.per_category,
        seed: cfg.seed,
        prior_seed: cfg.prior_seed,
        prior_instances: cfg.prior_instances,
        mug_handle: cfg.mug_handle,
        max_tilt: cfg.max_tilt,
        priors,
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&m)? + "\n";
    formats::write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(m)
}

pub fn write_sample(dir: &Path, s: &SynthSample) -> Result<()> {
    formats::write_image(&dir.join("image.bin"), &s.image)?;
    formats::write_points(&dir.join("points.txt"), s.points.points())?;
    formats::write_indices(&dir.join("index.txt"), &s.index.0)?;
    formats::write_points(&dir.join("model.txt"), &s.model)?;
    formats::write_points(&dir.join("nocs.txt"), &s.nocs)?;
    let r = &s.pose.rotation;
    let meta = SampleMeta {
        category: s.category.name().to_string(),
        symmetric: s.sym == SymmetryTag::AxisY,
        rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
        translation: s.pose.translation.into(),
        scale: s.pose.scale,
    };
    formats::write_file(&dir.join("meta.json"), (serde_json::to_string_pretty(&meta)? + "\n").as_bytes())?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<SynthSample> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| {
        anyhow!("{}: byte {}: {e}", meta_path.display(), line_col_offset(&text, e.line(), e.column()))
    })?;
    let rotation = Matrix3::from_row_slice(&meta.rotation);
    let pose = Pose::new(rotation, Vector3::from(meta.translation), meta.scale)
        .with_context(|| format!("{}: invalid pose", meta_path.display()))?;
    let s = SynthSample {
        category: Category::parse(&meta.category)?,
        sym: if meta.symmetric { SymmetryTag::AxisY } else { SymmetryTag::None },
        image: formats::read_image(&dir.join("image.bin"))?,
        points: PointCloud::new(formats::read_points(&dir.join("points.txt"))?)?,
        index: PixelPointIndex(formats::read_indices(&dir.join("index.txt"))?),
        pose,
        model: formats::read_points(&dir.join("model.txt"))?,
        nocs: formats::read_points(&dir.join("nocs.txt"))?,
    };
    let &[h, w, _] = s.image.shape() else { unreachable!("image reader returns rank 3") };
    s.index.validate(h * w).with_context(|| format!("{}: pixel index", dir.display()))?;
    if s.index.0.len() != s.points.len() || s.nocs.rows() != s.points.len() {
        bail!("{}: {} points, {} pixel indices and {} NOCS rows", dir.display(), s.points.len(), s.index.0.len(), s.nocs.rows());
    }
    Ok(s)
}

/// A manifest with its samples and priors loaded into memory.
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub samples: Vec<(SampleEntry, SynthSample)>,
    pub priors: Vec<(Category, ShapePrior)>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let manifest = Manifest::load(&file)?;
        let root = root_of(&file).to_path_buf();
        let profile = manifest.profile()?;
        let samples = manifest
            .samples
            .par_iter()
            .map(|e| -> Result<_> {
                let s = read_sample(&root.join(&e.dir))?;
                if s.image.shape()[0] != profile.image_size() || s.points.len() != profile.points() {
                    bail!("sample {} does not match the {profile} profile", e.id);
                }
                if s.category.name() != e.category {
                    bail!("sample {} is labelled {} but stores {}", e.id, e.category, s.category);
                }
                Ok((e.clone(), s))
            })
            .collect::<Result<Vec<_>>>()?;
        let priors = manifest
            .priors
            .iter()
            .map(|p| -> Result<_> {
                let cat = Category::parse(&p.category)?;
                let pts = formats::read_points(&root.join(&p.file))?;
                Ok((cat, ShapePrior::new(pts, cat.id())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, root, samples, priors })
    }

    pub fn prior(&self, cat: Category) -> Result<&ShapePrior> {
        self.priors
            .iter()
            .find(|(c, _)| *c == cat)
            .map(|(_, p)| p)
            .ok_or_else(|| anyhow!("manifest has no prior for {cat}"))
    }
}
