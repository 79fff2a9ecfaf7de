//! Preprocessing for the two inference styles: fixed-size scale/pad/crop for
//! whole-volume networks, and sliding-window patch planning plus weighted
//! stitching for patch-based inference.
//!
//! All rounding of fractional voxel counts is round-half-away-from-zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::Prediction;
use crate::volume::{Volume, VoxelData};

/// Inclusive voxel index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }
}

/// Smallest box containing every nonzero voxel.
pub fn tight_bbox(seg: &Volume) -> Result<BoundingBox> {
    let data = seg.u8_data()?;
    let [nx, ny, nz] = seg.dims();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if data[x + nx * (y + ny * z)] != 0 {
                    any = true;
                    let v = [x, y, z];
                    for a in 0..3 {
                        min[a] = min[a].min(v[a]);
                        max[a] = max[a].max(v[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyInput(
            "bounding box of an all-zero segmentation".into(),
        ));
    }
    Ok(BoundingBox { min, max })
}

/// Extend each side by `round(fraction * extent)` voxels, clamped to the
/// volume bounds.
pub fn pad_bbox(b: &BoundingBox, fraction: f64, dims: [usize; 3]) -> BoundingBox {
    let mut out = *b;
    for a in 0..3 {
        let pad = (fraction * b.extent()[a] as f64).round() as usize;
        out.min[a] = b.min[a].saturating_sub(pad);
        out.max[a] = (b.max[a] + pad).min(dims[a] - 1);
    }
    out
}

/// Copy the box out of the volume.
pub fn crop(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    let [nx, ny, _] = v.dims();
    let dims = v.dims();
    for a in 0..3 {
        if b.min[a] > b.max[a] || b.max[a] >= dims[a] {
            return Err(Error::invalid(format!(
                "bounding box {b:?} does not fit volume dims {dims:?}"
            )));
        }
    }
    let e = b.extent();
    let out = match v.data() {
        VoxelData::U8(src) => {
            let mut data = Vec::with_capacity(e[0] * e[1] * e[2]);
            for z in b.min[2]..=b.max[2] {
                for y in b.min[1]..=b.max[1] {
                    let row = b.min[0] + nx * (y + ny * z);
                    data.extend_from_slice(&src[row..row + e[0]]);
                }
            }
            Volume::from_u8(e, v.spacing(), data)?
        }
        VoxelData::F32(src) => {
            let mut data = Vec::with_capacity(e[0] * e[1] * e[2]);
            for z in b.min[2]..=b.max[2] {
                for y in b.min[1]..=b.max[1] {
                    let row = b.min[0] + nx * (y + ny * z);
                    data.extend_from_slice(&src[row..row + e[0]]);
                }
            }
            Volume::from_f32(e, v.spacing(), data)?
        }
    };
    Ok(out)
}

pub const DEFAULT_TARGET: [usize; 3] = [128, 256, 256];

/// Scale a label volume isotropically so it fits every target axis (the
/// tightest axis binds), resample nearest-neighbor, then center with zero
/// padding to exactly `target`. Output spacing is input spacing divided by
/// the scale factor. Labels pass through unblended.
pub fn scale_crop_to_target(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let src = v.u8_data()?;
    let dims = v.dims();
    if target.iter().any(|&t| t == 0) {
        return Err(Error::invalid("target dims must be positive"));
    }
    let s = (0..3)
        .map(|a| target[a] as f64 / dims[a] as f64)
        .fold(f64::INFINITY, f64::min);
    // scaled_a = round(dims_a * s) <= target_a: on the binding axis the
    // product is exactly target, elsewhere strictly below an integer bound
    let scaled = [
        (dims[0] as f64 * s).round() as usize,
        (dims[1] as f64 * s).round() as usize,
        (dims[2] as f64 * s).round() as usize,
    ];
    debug_assert!((0..3).all(|a| scaled[a] <= target[a] && scaled[a] >= 1));
    let offset = [
        (target[0] - scaled[0]) / 2,
        (target[1] - scaled[1]) / 2,
        (target[2] - scaled[2]) / 2,
    ];

    let [nx, ny, _] = dims;
    let mut out = vec![0u8; target[0] * target[1] * target[2]];
    for z in 0..scaled[2] {
        let sz = (((z as f64 + 0.5) / s) as usize).min(dims[2] - 1);
        for y in 0..scaled[1] {
            let sy = (((y as f64 + 0.5) / s) as usize).min(dims[1] - 1);
            for x in 0..scaled[0] {
                let sx = (((x as f64 + 0.5) / s) as usize).min(dims[0] - 1);
                let val = src[sx + nx * (sy + ny * sz)];
                let o = (x + offset[0])
                    + target[0] * ((y + offset[1]) + target[1] * (z + offset[2]));
                out[o] = val;
            }
        }
    }
    let spacing = v.spacing();
    Volume::from_u8(target, [spacing[0] / s, spacing[1] / s, spacing[2] / s], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StitchWeights {
    Uniform,
    Gaussian,
}

/// Sliding-window plan: patch shape plus the lexicographically sorted patch
/// offsets. Patches always end exactly at the volume edge; volumes smaller
/// than the patch are treated as zero-padded up to patch size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patch_dims: [usize; 3],
    pub offsets: Vec<[usize; 3]>,
    pub weights: StitchWeights,
}

pub const DEFAULT_PATCH: [usize; 3] = [80, 224, 160];

pub fn plan_patches(
    dims: [usize; 3],
    patch: [usize; 3],
    step_fraction: f64,
) -> Result<PatchPlan> {
    if !(step_fraction > 0.0 && step_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "step_fraction must be in (0, 1], got {step_fraction}"
        )));
    }
    if dims.iter().any(|&d| d == 0) || patch.iter().any(|&p| p == 0) {
        return Err(Error::invalid("dims and patch must be positive"));
    }
    let mut axis_positions: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        let limit = dims[a].max(patch[a]) - patch[a];
        let stride = ((patch[a] as f64 * step_fraction).ceil() as usize).max(1);
        let mut p = 0usize;
        loop {
            axis_positions[a].push(p.min(limit));
            if p >= limit {
                break;
            }
            p += stride;
        }
    }
    let mut offsets = Vec::new();
    for &x in &axis_positions[0] {
        for &y in &axis_positions[1] {
            for &z in &axis_positions[2] {
                offsets.push([x, y, z]);
            }
        }
    }
    Ok(PatchPlan {
        patch_dims: patch,
        offsets,
        weights: StitchWeights::Uniform,
    })
}

/// Copy a patch out of the volume, zero-filling anything past the edge
/// (volumes smaller than the patch).
pub fn extract_patch(v: &Volume, offset: [usize; 3], patch: [usize; 3]) -> Result<Volume> {
    let src = v.u8_data()?;
    let [nx, ny, nz] = v.dims();
    let mut out = vec![0u8; patch[0] * patch[1] * patch[2]];
    for z in 0..patch[2] {
        let sz = offset[2] + z;
        if sz >= nz {
            continue;
        }
        for y in 0..patch[1] {
            let sy = offset[1] + y;
            if sy >= ny {
                continue;
            }
            let avail = patch[0].min(nx.saturating_sub(offset[0]));
            if avail == 0 {
                continue;
            }
            let srow = offset[0] + nx * (sy + ny * sz);
            let orow = patch[0] * (y + patch[1] * z);
            out[orow..orow + avail].copy_from_slice(&src[srow..srow + avail]);
        }
    }
    Volume::from_u8(patch, v.spacing(), out)
}

/// Patch view of a prediction (per-class), zero-filled past the edge.
pub fn extract_prediction_patch(
    pred: &Prediction,
    offset: [usize; 3],
    patch: [usize; 3],
) -> Prediction {
    let [nx, ny, nz] = pred.dims();
    let n_out = patch[0] * patch[1] * patch[2];
    let c_total = pred.num_classes();
    let mut probs = vec![0f32; n_out * c_total];
    for c in 0..c_total {
        let src = pred.class_slice(c);
        let dst = &mut probs[c * n_out..(c + 1) * n_out];
        for z in 0..patch[2] {
            let sz = offset[2] + z;
            if sz >= nz {
                continue;
            }
            for y in 0..patch[1] {
                let sy = offset[1] + y;
                if sy >= ny {
                    continue;
                }
                let avail = patch[0].min(nx.saturating_sub(offset[0]));
                if avail == 0 {
                    continue;
                }
                let srow = offset[0] + nx * (sy + ny * sz);
                let orow = patch[0] * (y + patch[1] * z);
                dst[orow..orow + avail].copy_from_slice(&src[srow..srow + avail]);
            }
        }
    }
    Prediction::new(patch, pred.spacing(), c_total, probs).expect("shape is consistent")
}

fn gaussian_weight_grid(patch: [usize; 3]) -> Vec<f64> {
    let sigma = [
        patch[0] as f64 / 8.0,
        patch[1] as f64 / 8.0,
        patch[2] as f64 / 8.0,
    ];
    let center = [
        (patch[0] as f64 - 1.0) / 2.0,
        (patch[1] as f64 - 1.0) / 2.0,
        (patch[2] as f64 - 1.0) / 2.0,
    ];
    let mut w = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            for x in 0..patch[0] {
                let e = ((x as f64 - center[0]) / sigma[0]).powi(2)
                    + ((y as f64 - center[1]) / sigma[1]).powi(2)
                    + ((z as f64 - center[2]) / sigma[2]).powi(2);
                w.push((-0.5 * e).exp());
            }
        }
    }
    w
}

/// Weighted per-voxel average of overlapping probability patches,
/// renormalized per voxel. Voxels no patch covers become background one-hot.
/// Accumulation is in double precision so the result does not depend on
/// patch order beyond 1e-6.
pub fn stitch(
    patches: &[([usize; 3], Prediction)],
    dims: [usize; 3],
    weights: StitchWeights,
) -> Result<Prediction> {
    if patches.is_empty() {
        return Err(Error::EmptyInput("stitch with no patches".into()));
    }
    let c_total = patches[0].1.num_classes();
    let spacing = patches[0].1.spacing();
    let n = dims[0] * dims[1] * dims[2];
    for (offset, p) in patches {
        if p.num_classes() != c_total {
            return Err(Error::invalid(format!(
                "patch class count {} does not match {}",
                p.num_classes(),
                c_total
            )));
        }
        if (0..3).any(|a| offset[a] >= dims[a]) {
            return Err(Error::invalid(format!(
                "patch offset {offset:?} outside volume dims {dims:?}"
            )));
        }
    }

    let mut wsum = vec![0f64; n];
    let mut acc = vec![0f64; n * c_total];
    for (offset, p) in patches {
        let pd = p.dims();
        let np = p.voxel_count();
        let wgrid = match weights {
            StitchWeights::Uniform => None,
            StitchWeights::Gaussian => Some(gaussian_weight_grid(pd)),
        };
        for z in 0..pd[2] {
            let oz = offset[2] + z;
            if oz >= dims[2] {
                continue;
            }
            for y in 0..pd[1] {
                let oy = offset[1] + y;
                if oy >= dims[1] {
                    continue;
                }
                for x in 0..pd[0] {
                    let ox = offset[0] + x;
                    if ox >= dims[0] {
                        continue;
                    }
                    let li = x + pd[0] * (y + pd[1] * z);
                    let gi = ox + dims[0] * (oy + dims[1] * oz);
                    let w = wgrid.as_ref().map_or(1.0, |g| g[li]);
                    wsum[gi] += w;
                    for c in 0..c_total {
                        acc[c * n + gi] += w * p.probs()[c * np + li] as f64;
                    }
                }
            }
        }
    }

    let mut probs = vec![0f32; n * c_total];
    for i in 0..n {
        if wsum[i] == 0.0 {
            probs[i] = 1.0; // background one-hot where nothing covered
            continue;
        }
        let total: f64 = (0..c_total).map(|c| acc[c * n + i]).sum();
        if !(total > 0.0) {
            probs[i] = 1.0;
            continue;
        }
        for c in 0..c_total {
            probs[c * n + i] = (acc[c * n + i] / total) as f32;
        }
    }
    Prediction::new(dims, spacing, c_total, probs)
}
