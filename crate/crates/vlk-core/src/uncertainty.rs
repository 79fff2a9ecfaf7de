//! Test-time-augmentation orchestration: K augmented inferences, inversion
//! back to native space, and the per-voxel consensus label plus vote-spread
//! uncertainty map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::transforms::{
    apply_forward, invert_coordinate_guided, invert_standard, sample_tta_transform,
    RigidTransform, DEFAULT_SEARCH_RADIUS,
};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionMode {
    Standard,
    CoordinateGuided,
}

/// K inverted hard-label layers over the same grid, with the transforms that
/// produced them.
#[derive(Debug)]
pub struct PredictionStack {
    pub layers: Vec<Volume>,
    pub transforms: Vec<RigidTransform>,
    pub mode: InversionMode,
}

impl PredictionStack {
    fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::invalid(format!(
                "consensus needs at least 2 layers, got {}",
                self.layers.len()
            )));
        }
        if self.transforms.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "{} transforms for {} layers",
                self.transforms.len(),
                self.layers.len()
            )));
        }
        for l in &self.layers[1..] {
            self.layers[0].check_same_dims(l)?;
        }
        Ok(())
    }
}

/// One augmented inference: transform the mask, predict, harden, invert.
fn tta_layer(
    seg: &Volume,
    predictor: &dyn Predictor,
    t: &RigidTransform,
    mode: InversionMode,
    index: usize,
) -> Result<Volume> {
    let run = || -> Result<Volume> {
        let augmented = apply_forward(seg, t)?;
        let pred = predictor.predict(&augmented, t)?;
        let hard = pred.hard_labels();
        match mode {
            InversionMode::Standard => invert_standard(&hard, t),
            InversionMode::CoordinateGuided => {
                invert_coordinate_guided(&hard, t, seg, DEFAULT_SEARCH_RADIUS)
            }
        }
    };
    run().map_err(|e| Error::Predictor(format!("transform {index}: {e}")))
}

/// Run the full stack for explicitly given transforms (test hook; `run_tta`
/// samples them from the seed).
pub fn run_tta_with_transforms(
    seg: &Volume,
    predictor: &dyn Predictor,
    transforms: &[RigidTransform],
    mode: InversionMode,
) -> Result<PredictionStack> {
    if transforms.len() < 2 {
        return Err(Error::invalid(format!(
            "test-time augmentation needs at least 2 transforms, got {}",
            transforms.len()
        )));
    }
    let layers: Vec<Volume> = transforms
        .par_iter()
        .enumerate()
        .map(|(i, t)| tta_layer(seg, predictor, t, mode, i))
        .collect::<Result<_>>()?;
    Ok(PredictionStack {
        layers,
        transforms: transforms.to_vec(),
        mode,
    })
}

/// K augmented predictions with transforms drawn deterministically from the
/// seed, inverted per `mode`.
pub fn run_tta(
    seg: &Volume,
    predictor: &dyn Predictor,
    k: u32,
    seed: u64,
    mode: InversionMode,
) -> Result<PredictionStack> {
    let transforms: Vec<RigidTransform> =
        (0..k).map(|i| sample_tta_transform(seed, i)).collect();
    run_tta_with_transforms(seg, predictor, &transforms, mode)
}

/// Per-voxel modal label (ties break to the smaller class id) and vote
/// spread sqrt(1 - sum_c f_c^2), the root of the summed one-hot variances.
/// Zero exactly where all layers agree.
pub fn consensus_and_uncertainty(stack: &PredictionStack) -> Result<(Volume, Volume)> {
    stack.validate()?;
    let first = &stack.layers[0];
    let n = first.len();
    let k = stack.layers.len() as f64;

    let mut max_label = 0u8;
    let layer_data: Vec<&[u8]> = stack
        .layers
        .iter()
        .map(|l| {
            let d = l.u8_data()?;
            max_label = max_label.max(d.iter().copied().max().unwrap_or(0));
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let classes = max_label as usize + 1;

    let mut labels = vec![0u8; n];
    let mut spread = vec![0f32; n];
    let mut counts = vec![0u32; classes];
    for i in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for d in &layer_data {
            counts[d[i] as usize] += 1;
        }
        let mut best_c = 0usize;
        let mut best_n = 0u32;
        let mut sum_sq = 0.0f64;
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > best_n {
                best_n = cnt;
                best_c = c;
            }
            let f = cnt as f64 / k;
            sum_sq += f * f;
        }
        labels[i] = best_c as u8;
        spread[i] = (1.0 - sum_sq).max(0.0).sqrt() as f32;
    }
    Ok((
        Volume::from_u8(first.dims(), first.spacing(), labels)?,
        Volume::from_f32(first.dims(), first.spacing(), spread)?,
    ))
}
