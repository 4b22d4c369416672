//! Model weights files: the parameter tensors plus a profile marker.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use posevit_core::pipeline::{Model, Profile};
use posevit_core::Tensor;

use crate::formats;

const PROFILE_PREFIX: &str = "profile/";

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let marker = (format!("{PROFILE_PREFIX}{}", model.profile()), Tensor::zeros(&[0]));
    let items = std::iter::once((marker.0.as_str(), &marker.1)).chain(model.params.iter());
    formats::write_weights(path, items)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut tensors = formats::read_weights(path)?;
    let k = tensors
        .iter()
        .position(|(n, _)| n.starts_with(PROFILE_PREFIX))
        .ok_or_else(|| anyhow!("{}: no profile marker", path.display()))?;
    let (name, _) = tensors.remove(k);
    let profile = Profile::parse(&name[PROFILE_PREFIX.len()..])?;
    Model::from_tensors(profile, tensors).with_context(|| format!("{}: weights do not fit the {profile} model", path.display()))
}
