//! Rigid test-time-augmentation transforms and their two inversion routes.
//!
//! A transform rotates about the volume center (Euler angles applied in
//! Z·Y·X order) and then translates in voxel units. The standard inversion
//! resamples the prediction through the analytic inverse with
//! nearest-neighbor lookup; the coordinate-guided inversion instead carries
//! each original segmentation voxel forward, rounds, and reads the
//! prediction there, falling back to the nearest nonzero prediction within a
//! small Chebyshev window. The coordinate-guided route never invents
//! foreground outside the original mask and loses far fewer labeled voxels
//! to rounding.
//!
//! All coordinate rounding is round-half-away-from-zero (`f64::round`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::NON_ANNOTATED;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::volume::Volume;

/// Rotation (degrees, about x/y/z, composed Z·Y·X about the volume center)
/// followed by a translation in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub euler_deg: [f64; 3],
    pub translation_vox: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            euler_deg: [0.0; 3],
            translation_vox: [0.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.euler_deg == [0.0; 3] && self.translation_vox == [0.0; 3]
    }

    /// Composite rotation matrix `Rz * Ry * Rx`.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.euler_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        mat_mul(&mat_mul(&rz, &ry), &rx)
    }

    /// `t(p) = R (p - c) + c + T`.
    pub fn forward_point(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        let d = mat_vec(&r, sub(p, center));
        [
            d[0] + center[0] + self.translation_vox[0],
            d[1] + center[1] + self.translation_vox[1],
            d[2] + center[2] + self.translation_vox[2],
        ]
    }

    /// `t⁻¹(q) = Rᵀ (q - c - T) + c`.
    pub fn inverse_point(&self, q: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        let d = [
            q[0] - center[0] - self.translation_vox[0],
            q[1] - center[1] - self.translation_vox[1],
            q[2] - center[2] - self.translation_vox[2],
        ];
        let b = mat_vec_t(&r, d);
        [b[0] + center[0], b[1] + center[1], b[2] + center[2]]
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Multiply by the transpose (the rotation inverse).
#[inline]
fn mat_vec_t(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Geometric center of the voxel grid: `((n_i - 1) / 2)` per axis.
pub fn volume_center(dims: [usize; 3]) -> [f64; 3] {
    [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ]
}

pub const TTA_MAX_ROTATION_DEG: f64 = 18.0;
pub const TTA_MAX_TRANSLATION_VOX: f64 = 5.0;

/// Augmentation transform `index` under `rng_seed`: six independent uniform
/// draws, angles within ±18° and translations within ±5 voxels per axis.
/// Draw `j` of transform `i` hashes `(seed, i, j)`, so transforms are
/// reproducible regardless of evaluation order.
pub fn sample_tta_transform(rng_seed: u64, index: u32) -> RigidTransform {
    let rng = CounterRng::new(rng_seed);
    let stream = index as u64;
    let draw = |j: u64, half: f64| -> f64 { rng.uniform(stream, j, -half, half) };
    RigidTransform {
        euler_deg: [
            draw(0, TTA_MAX_ROTATION_DEG),
            draw(1, TTA_MAX_ROTATION_DEG),
            draw(2, TTA_MAX_ROTATION_DEG),
        ],
        translation_vox: [
            draw(3, TTA_MAX_TRANSLATION_VOX),
            draw(4, TTA_MAX_TRANSLATION_VOX),
            draw(5, TTA_MAX_TRANSLATION_VOX),
        ],
    }
}

/// Nearest-neighbor resample: output voxel `o` reads the input at `map(o)`,
/// rounded half-away-from-zero; out-of-bounds reads become 0.
fn resample_nn(
    input: &Volume,
    map: &(dyn Fn([f64; 3]) -> [f64; 3] + Sync),
) -> Result<Volume> {
    let src = input.u8_data()?;
    let [nx, ny, nz] = input.dims();
    let mut out = vec![0u8; src.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    let q = map([x as f64, y as f64, z as f64]);
                    let xi = q[0].round() as i64;
                    let yi = q[1].round() as i64;
                    let zi = q[2].round() as i64;
                    if xi >= 0
                        && xi < nx as i64
                        && yi >= 0
                        && yi < ny as i64
                        && zi >= 0
                        && zi < nz as i64
                    {
                        plane[x + nx * y] =
                            src[xi as usize + nx * (yi as usize + ny * zi as usize)];
                    }
                }
            }
        });
    Volume::from_u8(input.dims(), input.spacing(), out)
}

/// Apply `t` to a label volume: output voxel `o` samples the input at
/// `t⁻¹(o)` (inverse mapping) with nearest-neighbor lookup.
pub fn apply_forward(labels: &Volume, t: &RigidTransform) -> Result<Volume> {
    let center = volume_center(labels.dims());
    resample_nn(labels, &|o| t.inverse_point(o, center))
}

/// Standard affine inversion: resample the transformed-space prediction
/// through the analytic inverse of `t` (output voxel `o` reads `t(o)`).
pub fn invert_standard(pred: &Volume, t: &RigidTransform) -> Result<Volume> {
    let center = volume_center(pred.dims());
    resample_nn(pred, &|o| t.forward_point(o, center))
}

pub const DEFAULT_SEARCH_RADIUS: usize = 2;

/// Coordinate-guided inversion. For each voxel `v` with `original_seg(v)=1`,
/// round the forward-mapped coordinate `p = round(t(v))` and take `pred(p)`
/// if nonzero; otherwise take the nearest (Euclidean, ties to the smaller
/// linear index) nonzero prediction within Chebyshev radius `search_radius`
/// of `p`; if none exists, assign the non-annotated class. Voxels outside
/// the mask stay 0, so the output support equals the mask support.
pub fn invert_coordinate_guided(
    pred: &Volume,
    t: &RigidTransform,
    original_seg: &Volume,
    search_radius: usize,
) -> Result<Volume> {
    pred.check_same_dims(original_seg)?;
    original_seg.check_binary()?;
    let pv = pred.u8_data()?;
    let seg = original_seg.u8_data()?;
    let [nx, ny, nz] = pred.dims();
    let center = volume_center(pred.dims());
    let r = search_radius as i64;

    let mut out = vec![0u8; pv.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    if seg[x + nx * (y + ny * z)] == 0 {
                        continue;
                    }
                    let q = t.forward_point([x as f64, y as f64, z as f64], center);
                    let px = q[0].round() as i64;
                    let py = q[1].round() as i64;
                    let pz = q[2].round() as i64;

                    let direct = lookup(pv, [nx, ny, nz], [px, py, pz]);
                    let label = if direct != 0 {
                        direct
                    } else {
                        nearest_nonzero(pv, [nx, ny, nz], [px, py, pz], r)
                            .unwrap_or(NON_ANNOTATED)
                    };
                    plane[x + nx * y] = label;
                }
            }
        });
    Volume::from_u8(pred.dims(), pred.spacing(), out)
}

#[inline]
fn lookup(data: &[u8], dims: [usize; 3], p: [i64; 3]) -> u8 {
    let [nx, ny, nz] = dims;
    if p[0] >= 0
        && p[0] < nx as i64
        && p[1] >= 0
        && p[1] < ny as i64
        && p[2] >= 0
        && p[2] < nz as i64
    {
        data[p[0] as usize + nx * (p[1] as usize + ny * p[2] as usize)]
    } else {
        0
    }
}

/// Nearest nonzero voxel to `p` within Chebyshev radius `r`, by squared
/// Euclidean distance with ties broken toward the smaller linear index.
fn nearest_nonzero(data: &[u8], dims: [usize; 3], p: [i64; 3], r: i64) -> Option<u8> {
    let [nx, ny, nz] = dims;
    let mut best: Option<(i64, usize, u8)> = None;
    for qz in (p[2] - r).max(0)..=(p[2] + r).min(nz as i64 - 1) {
        for qy in (p[1] - r).max(0)..=(p[1] + r).min(ny as i64 - 1) {
            for qx in (p[0] - r).max(0)..=(p[0] + r).min(nx as i64 - 1) {
                let idx = qx as usize + nx * (qy as usize + ny * qz as usize);
                let v = data[idx];
                if v == 0 {
                    continue;
                }
                let d2 = (qx - p[0]).pow(2) + (qy - p[1]).pow(2) + (qz - p[2]).pow(2);
                // ascending scan order makes strict < keep the smaller index on ties
                if best.map_or(true, |(bd, bi, _)| (d2, idx) < (bd, bi)) {
                    best = Some((d2, idx, v));
                }
            }
        }
    }
    best.map(|(_, _, v)| v)
}

/// Fraction of voxels with a nonzero original label whose recovered label
/// differs. Background voxels round-trip trivially and are excluded.
pub fn misassigned_fraction(truth: &Volume, recovered: &Volume) -> Result<f64> {
    truth.check_same_dims(recovered)?;
    let t = truth.u8_data()?;
    let r = recovered.u8_data()?;
    let mut labeled = 0u64;
    let mut wrong = 0u64;
    for (a, b) in t.iter().zip(r.iter()) {
        if *a != 0 {
            labeled += 1;
            if a != b {
                wrong += 1;
            }
        }
    }
    if labeled == 0 {
        return Err(Error::EmptyInput(
            "misassigned_fraction needs at least one labeled voxel".into(),
        ));
    }
    Ok(wrong as f64 / labeled as f64)
}

/// Mean, sample standard deviation (n-1), and median of a sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        assert!(n > 0, "summary of empty sample");
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        SummaryStats { mean, sd, median }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionTrial {
    pub index: u32,
    pub transform: RigidTransform,
    pub standard: f64,
    pub coordinate_guided: f64,
}

/// Round-trip misassignment comparison of the two inversion routes over `n`
/// sampled augmentation transforms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionReport {
    pub seed: u64,
    pub num_trials: u32,
    pub trials: Vec<InversionTrial>,
    pub standard: SummaryStats,
    pub coordinate_guided: SummaryStats,
    /// Trials where the coordinate-guided fraction is strictly lower.
    pub coordinate_guided_strictly_lower: u32,
}

/// For each of `n` transforms: augment `labels`, invert both ways, measure
/// the misassigned fraction against the original labels. `seg` must be the
/// binary support of `labels`.
pub fn inversion_experiment(
    labels: &Volume,
    seg: &Volume,
    n: u32,
    seed: u64,
) -> Result<InversionReport> {
    labels.check_same_dims(seg)?;
    seg.check_binary()?;
    let trials: Result<Vec<InversionTrial>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = sample_tta_transform(seed, i);
            let transformed = apply_forward(labels, &t)?;
            let std_rec = invert_standard(&transformed, &t)?;
            let cg_rec =
                invert_coordinate_guided(&transformed, &t, seg, DEFAULT_SEARCH_RADIUS)?;
            Ok(InversionTrial {
                index: i,
                transform: t,
                standard: misassigned_fraction(labels, &std_rec)?,
                coordinate_guided: misassigned_fraction(labels, &cg_rec)?,
            })
        })
        .collect();
    let trials = trials?;
    let std_fracs: Vec<f64> = trials.iter().map(|t| t.standard).collect();
    let cg_fracs: Vec<f64> = trials.iter().map(|t| t.coordinate_guided).collect();
    let strictly_lower = trials
        .iter()
        .filter(|t| t.coordinate_guided < t.standard)
        .count() as u32;
    Ok(InversionReport {
        seed,
        num_trials: n,
        standard: SummaryStats::of(&std_fracs),
        coordinate_guided: SummaryStats::of(&cg_fracs),
        coordinate_guided_strictly_lower: strictly_lower,
        trials,
    })
}
