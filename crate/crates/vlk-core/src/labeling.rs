//! Voxel label generation from labeled centerlines.
//!
//! Every foreground voxel looks for centerline points inside the axis-aligned
//! cube of side `neighborhood` (default 7) centered on it and takes the label
//! of the Euclidean-closest one; foreground without any candidate becomes the
//! non-annotated class. Distances are in voxel units regardless of spacing:
//! the rule is stated in voxels on near-isotropic data, so physical distance
//! would only blur it.
//!
//! A real-valued point p is inside voxel v's cube iff
//! |p_i - v_i| <= (neighborhood-1)/2 + 0.5 on every axis: the point falls
//! within the cube of whole voxels, which is what "voxel neighborhood" means
//! for fractional coordinates.

use rayon::prelude::*;

use crate::classes::NON_ANNOTATED;
use crate::error::{Error, Result};
use crate::phantom::CenterlineSet;
use crate::volume::Volume;

/// Flattened centerline points bucketed by rounded voxel cell (CSR layout)
/// so each voxel scans only nearby buckets.
struct PointGrid {
    offsets: Vec<u32>,
    /// point index per bucket slot
    slots: Vec<u32>,
    points: Vec<[f64; 3]>,
    labels: Vec<u8>,
}

impl PointGrid {
    fn build(dims: [usize; 3], centerlines: &CenterlineSet) -> Result<Self> {
        let mut points = Vec::with_capacity(centerlines.total_points());
        let mut labels = Vec::with_capacity(points.capacity());
        for line in &centerlines.lines {
            if !(1..=9).contains(&line.label) {
                return Err(Error::invalid(format!(
                    "centerline label {} outside vessel range 1..=9",
                    line.label
                )));
            }
            for p in &line.points {
                points.push(*p);
                labels.push(line.label);
            }
        }

        let [nx, ny, nz] = dims;
        let n = nx * ny * nz;
        // clamping is lossless: a point whose rounded cell clamps inward can
        // only be within reach of voxels whose scan window covers that edge
        let bucket = |p: &[f64; 3]| -> usize {
            let bx = (p[0].round() as i64).clamp(0, nx as i64 - 1) as usize;
            let by = (p[1].round() as i64).clamp(0, ny as i64 - 1) as usize;
            let bz = (p[2].round() as i64).clamp(0, nz as i64 - 1) as usize;
            bx + nx * (by + ny * bz)
        };
        let mut counts = vec![0u32; n + 1];
        for p in &points {
            counts[bucket(p) + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut slots = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let b = bucket(p);
            slots[cursor[b] as usize] = i as u32;
            cursor[b] += 1;
        }
        Ok(PointGrid {
            offsets,
            slots,
            points,
            labels,
        })
    }
}

/// Assign a vessel class to every foreground voxel: the label of the closest
/// centerline point within the `neighborhood`-cube (ties to the smaller
/// class id), or the non-annotated class when no point is in reach.
/// Background voxels stay 0.
pub fn assign_voxel_labels(
    segmentation: &Volume,
    centerlines: &CenterlineSet,
    neighborhood: usize,
) -> Result<Volume> {
    segmentation.check_binary()?;
    if neighborhood == 0 || neighborhood % 2 == 0 {
        return Err(Error::invalid(format!(
            "neighborhood must be odd and positive, got {neighborhood}"
        )));
    }
    let [nx, ny, nz] = segmentation.dims();
    let grid = PointGrid::build(segmentation.dims(), centerlines)?;
    let seg = segmentation.u8_data()?;

    let reach = (neighborhood as f64 - 1.0) / 2.0 + 0.5;
    // cells at distance > (neighborhood+1)/2 cannot hold a point in reach
    let scan = ((neighborhood + 1) / 2) as i64;

    let mut out = vec![0u8; seg.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    if seg[x + nx * (y + ny * z)] == 0 {
                        continue;
                    }
                    let v = [x as f64, y as f64, z as f64];
                    let mut best: Option<(f64, u8)> = None;
                    let z0 = (z as i64 - scan).max(0) as usize;
                    let z1 = ((z as i64 + scan) as usize).min(nz - 1);
                    let y0 = (y as i64 - scan).max(0) as usize;
                    let y1 = ((y as i64 + scan) as usize).min(ny - 1);
                    let x0 = (x as i64 - scan).max(0) as usize;
                    let x1 = ((x as i64 + scan) as usize).min(nx - 1);
                    for bz in z0..=z1 {
                        for by in y0..=y1 {
                            for bx in x0..=x1 {
                                let b = bx + nx * (by + ny * bz);
                                let lo = grid.offsets[b] as usize;
                                let hi = grid.offsets[b + 1] as usize;
                                for &slot in &grid.slots[lo..hi] {
                                    let p = grid.points[slot as usize];
                                    if (p[0] - v[0]).abs() > reach
                                        || (p[1] - v[1]).abs() > reach
                                        || (p[2] - v[2]).abs() > reach
                                    {
                                        continue;
                                    }
                                    let d2 = (p[0] - v[0]).powi(2)
                                        + (p[1] - v[1]).powi(2)
                                        + (p[2] - v[2]).powi(2);
                                    let lab = grid.labels[slot as usize];
                                    let better = match best {
                                        None => true,
                                        Some((bd, bl)) => {
                                            d2 < bd || (d2 == bd && lab < bl)
                                        }
                                    };
                                    if better {
                                        best = Some((d2, lab));
                                    }
                                }
                            }
                        }
                    }
                    plane[x + nx * y] = best.map_or(NON_ANNOTATED, |(_, l)| l);
                }
            }
        });
    Volume::from_u8(segmentation.dims(), segmentation.spacing(), out)
}

/// Random multi-tube phantom for oracle comparisons in tests.
#[cfg(test)]
pub(crate) fn random_tube_phantom(dims: [usize; 3], seed: u64) -> (Volume, CenterlineSet) {
    use crate::phantom::{generate_phantom, PhantomSpec, TubeSpec};
    use crate::rng::CounterRng;

    let rng = CounterRng::new(seed);
    let n_tubes = 1 + (rng.raw(0, 0) % 4) as usize;
    let mut labels: Vec<u8> = (1..=9).collect();
    // Fisher-Yates with counter draws
    for i in (1..labels.len()).rev() {
        let j = (rng.raw(0, 10 + i as u64) % (i as u64 + 1)) as usize;
        labels.swap(i, j);
    }
    let mut segments = Vec::new();
    for k in 0..n_tubes {
        let stream = 1 + k as u64;
        let n_pts = 2 + (rng.raw(stream, 0) % 3) as usize;
        let mut pts = Vec::new();
        for i in 0..n_pts {
            let mut p = [0.0; 3];
            for a in 0..3 {
                let margin = 6.0;
                p[a] = rng.uniform(
                    stream,
                    (1 + i * 3 + a) as u64,
                    margin,
                    (dims[a] - 1) as f64 - margin,
                );
            }
            pts.push(p);
        }
        let radius = rng.uniform(stream, 90, 1.2, 4.0);
        segments.push(TubeSpec {
            label: labels[k],
            control_points: pts,
            radius: vec![radius],
        });
    }
    let peaks = vec![20.0; segments.len()];
    let spec = PhantomSpec {
        dims,
        spacing: [1.0; 3],
        segments,
        noise_seed: seed,
        stenoses: Vec::new(),
        velocity_peak_cm_s: peaks,
    };
    match generate_phantom(&spec) {
        Ok((seg, lines, _)) => (seg, lines),
        // sharp random bends can overshoot the margin; retry deterministically
        Err(_) => random_tube_phantom(dims, seed.wrapping_add(0x9e37)),
    }
}
