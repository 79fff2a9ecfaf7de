//! Evaluation metrics (per-class Dice, average surface distance) and the
//! training loss schedule (cross-entropy, Dice loss, epoch-dependent hybrid).
//!
//! All reductions accumulate in f64.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::Prediction;
use crate::volume::Volume;

fn check_grid(pred: &Prediction, gt: &Volume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            a: pred.dims(),
            b: gt.dims(),
        });
    }
    Ok(())
}

/// Soft Dice of one class: 2 sum(p*g) / (sum(p) + sum(g)) with g the one-hot
/// ground truth. Both sums zero (class absent everywhere) counts as perfect
/// agreement and returns 1.
pub fn dice_per_class(pred: &Prediction, gt: &Volume, c: usize) -> Result<f64> {
    check_grid(pred, gt)?;
    if c >= pred.num_classes() {
        return Err(Error::invalid(format!(
            "class {c} out of range for {} classes",
            pred.num_classes()
        )));
    }
    let labels = gt.u8_data()?;
    let p = pred.class_slice(c);
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut gsum = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        let pv = p[i] as f64;
        psum += pv;
        if l as usize == c {
            gsum += 1.0;
            inter += pv;
        }
    }
    if psum == 0.0 && gsum == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (psum + gsum))
}

/// Hard-label Dice of one class between two label volumes. Vacuous case
/// (class absent from both) returns 1.
pub fn dice_labels(a: &Volume, b: &Volume, c: u8) -> Result<f64> {
    a.check_same_dims(b)?;
    let av = a.u8_data()?;
    let bv = b.u8_data()?;
    let mut inter = 0usize;
    let mut asum = 0usize;
    let mut bsum = 0usize;
    for i in 0..av.len() {
        let ina = av[i] == c;
        let inb = bv[i] == c;
        asum += ina as usize;
        bsum += inb as usize;
        inter += (ina && inb) as usize;
    }
    if asum + bsum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (asum + bsum) as f64)
}

/// Dice loss: 1 minus the mean per-class Dice. Averages over all classes
/// including background by default; `exclude_background` drops class 0 from
/// the mean.
pub fn dice_loss(pred: &Prediction, gt: &Volume, exclude_background: bool) -> Result<f64> {
    let first = if exclude_background { 1 } else { 0 };
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for c in first..pred.num_classes() {
        sum += dice_per_class(pred, gt, c)?;
        count += 1;
    }
    Ok(1.0 - sum / count as f64)
}

/// Log clamp floor for cross-entropy.
pub const CE_EPSILON: f64 = 1e-7;

/// Mean over voxels of -log p at the true class, probabilities clamped to
/// [1e-7, 1] before the log.
pub fn cross_entropy(pred: &Prediction, gt: &Volume) -> Result<f64> {
    check_grid(pred, gt)?;
    let labels = gt.u8_data()?;
    let c_total = pred.num_classes();
    let n = pred.voxel_count();
    let mut sum = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c >= c_total {
            return Err(Error::invalid(format!(
                "ground-truth label {l} out of range for {c_total} classes"
            )));
        }
        let p = (pred.probs()[c * n + i] as f64).clamp(CE_EPSILON, 1.0);
        sum -= p.ln();
    }
    Ok(sum / n as f64)
}

/// Epoch boundaries of the loss schedule: pure cross-entropy through `beta`,
/// a sliding blend through `gamma`, then a fixed 0.9/0.1 Dice/CE mix to
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossScheduleParams {
    pub beta: u32,
    pub gamma: u32,
    pub total: u32,
}

impl LossScheduleParams {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0 && self.beta < self.gamma && self.gamma <= self.total) {
            return Err(Error::invalid(format!(
                "loss schedule requires 0 < beta < gamma <= total, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Cross-entropy weight in the blend regime:
/// 0.8 * (1 - (epoch - beta)/(gamma - beta)) + 0.1.
/// Defined on [beta, gamma]; the left endpoint evaluates to 0.9, the right
/// to 0.1.
pub fn alpha(epoch: u32, params: &LossScheduleParams) -> Result<f64> {
    params.validate()?;
    if epoch < params.beta || epoch > params.gamma {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside blend range [{}, {}]",
            params.beta, params.gamma
        )));
    }
    let t = (epoch - params.beta) as f64 / (params.gamma - params.beta) as f64;
    Ok(0.8 * (1.0 - t) + 0.1)
}

/// Scheduled loss: CE up to beta, alpha-blend of CE and Dice loss through
/// gamma, then 0.9 Dice + 0.1 CE to the end. Continuous at gamma.
pub fn hybrid_loss(
    pred: &Prediction,
    gt: &Volume,
    epoch: u32,
    params: &LossScheduleParams,
) -> Result<f64> {
    params.validate()?;
    if epoch > params.total {
        return Err(Error::invalid(format!(
            "epoch {epoch} beyond schedule total {}",
            params.total
        )));
    }
    let ce = cross_entropy(pred, gt)?;
    if epoch <= params.beta {
        return Ok(ce);
    }
    let dice = dice_loss(pred, gt, false)?;
    if epoch <= params.gamma {
        let a = alpha(epoch, params)?;
        Ok(a * ce + (1.0 - a) * dice)
    } else {
        Ok(0.9 * dice + 0.1 * ce)
    }
}

/// Binary mask of one class.
pub fn class_mask(v: &Volume, c: u8) -> Result<Volume> {
    let data = v.u8_data()?;
    let mask: Vec<u8> = data.iter().map(|&l| (l == c) as u8).collect();
    Volume::from_u8(v.dims(), v.spacing(), mask)
}

const FACES: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Region voxels with at least one 6-connected neighbor outside the region;
/// out-of-bounds counts as outside.
fn surface_points(v: &Volume) -> Result<Vec<[usize; 3]>> {
    v.check_binary()?;
    let data = v.u8_data()?;
    let [nx, ny, nz] = v.dims();
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if data[x + nx * (y + ny * z)] == 0 {
                    continue;
                }
                let boundary = FACES.iter().any(|d| {
                    let p = [x as isize + d[0], y as isize + d[1], z as isize + d[2]];
                    if p[0] < 0 || p[1] < 0 || p[2] < 0 {
                        return true;
                    }
                    let (px, py, pz) = (p[0] as usize, p[1] as usize, p[2] as usize);
                    px >= nx || py >= ny || pz >= nz
                        || data[px + nx * (py + ny * pz)] == 0
                });
                if boundary {
                    pts.push([x, y, z]);
                }
            }
        }
    }
    Ok(pts)
}

/// Distance in mm from one voxel center to the nearest marked voxel,
/// searched by expanding Chebyshev shells over a presence grid. A shell at
/// index radius r+1 can hold nothing closer than (r+1) * min_spacing, which
/// bounds the early exit.
fn nearest_mm(
    from: [usize; 3],
    present: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> f64 {
    let [nx, ny, nz] = dims;
    let min_sp = spacing[0].min(spacing[1]).min(spacing[2]);
    let max_r = (0..3)
        .map(|a| from[a].max(dims[a] - 1 - from[a]))
        .max()
        .unwrap();
    let mut best = f64::INFINITY;
    let fx = from[0] as isize;
    let fy = from[1] as isize;
    let fz = from[2] as isize;
    for r in 0..=max_r as isize {
        for dz in -r..=r {
            let z = fz + dz;
            if z < 0 || z as usize >= nz {
                continue;
            }
            for dy in -r..=r {
                let y = fy + dy;
                if y < 0 || y as usize >= ny {
                    continue;
                }
                let on_face = dz.abs() == r || dy.abs() == r;
                let mut dx = -r;
                while dx <= r {
                    let x = fx + dx;
                    if x >= 0 && (x as usize) < nx {
                        let i = x as usize + nx * (y as usize + ny * z as usize);
                        if present[i] {
                            let d = ((dx as f64 * spacing[0]).powi(2)
                                + (dy as f64 * spacing[1]).powi(2)
                                + (dz as f64 * spacing[2]).powi(2))
                            .sqrt();
                            best = best.min(d);
                        }
                    }
                    // interior rows of the cube skip to the far face
                    if !on_face && dx == -r && r > 0 {
                        dx = r;
                    } else {
                        dx += 1;
                    }
                }
            }
        }
        if best <= (r + 1) as f64 * min_sp {
            break;
        }
    }
    best
}

/// Average surface distance in mm: symmetric mean of nearest-surface
/// distances over both surfaces, Euclidean in physical units.
pub fn asd(a: &Volume, b: &Volume, spacing: [f64; 3]) -> Result<f64> {
    a.check_same_dims(b)?;
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("bad spacing {spacing:?}")));
    }
    let sa = surface_points(a)?;
    let sb = surface_points(b)?;
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptyInput(
            "average surface distance of an empty region".into(),
        ));
    }
    let dims = a.dims();
    let n = a.len();
    let mut present_a = vec![false; n];
    for p in &sa {
        present_a[p[0] + dims[0] * (p[1] + dims[1] * p[2])] = true;
    }
    let mut present_b = vec![false; n];
    for p in &sb {
        present_b[p[0] + dims[0] * (p[1] + dims[1] * p[2])] = true;
    }
    // order-preserving collect keeps the sums deterministic
    let da: Vec<f64> = sa
        .par_iter()
        .map(|&p| nearest_mm(p, &present_b, dims, spacing))
        .collect();
    let db: Vec<f64> = sb
        .par_iter()
        .map(|&p| nearest_mm(p, &present_a, dims, spacing))
        .collect();
    let sum_a: f64 = da.iter().sum();
    let sum_b: f64 = db.iter().sum();
    Ok((sum_a + sum_b) / (sa.len() + sb.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::NUM_CLASSES;

    fn labels(dims: [usize; 3], data: Vec<u8>) -> Volume {
        Volume::from_u8(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn dice_of_one_hot_is_one() {
        let mut data = vec![0u8; 27];
        data[3] = 1;
        data[4] = 1;
        data[10] = 7;
        let gt = labels([3, 3, 3], data);
        let pred = Prediction::from_labels(&gt, NUM_CLASSES).unwrap();
        for c in [0usize, 1, 7] {
            assert_eq!(dice_per_class(&pred, &gt, c).unwrap(), 1.0);
        }
        // class absent from both: vacuous 1
        assert_eq!(dice_per_class(&pred, &gt, 5).unwrap(), 1.0);
    }

    #[test]
    fn dice_half_overlap() {
        // gt has 10 voxels of class 3; pred marks 5 of them plus 5 others
        let mut gt_data = vec![0u8; 64];
        for i in 0..10 {
            gt_data[i] = 3;
        }
        let mut pred_data = vec![0u8; 64];
        for i in 0..5 {
            pred_data[i] = 3;
        }
        for i in 10..15 {
            pred_data[i] = 3;
        }
        let gt = labels([4, 4, 4], gt_data);
        let pred_labels = labels([4, 4, 4], pred_data);
        let pred = Prediction::from_labels(&pred_labels, NUM_CLASSES).unwrap();
        assert_eq!(dice_per_class(&pred, &gt, 3).unwrap(), 0.5);
        assert_eq!(dice_labels(&pred_labels, &gt, 3).unwrap(), 0.5);
        // hard-label dice is symmetric
        assert_eq!(
            dice_labels(&gt, &pred_labels, 3).unwrap(),
            dice_labels(&pred_labels, &gt, 3).unwrap()
        );
    }

    #[test]
    fn dice_loss_uniform_prediction() {
        // 2x2x2 volume entirely class 1, uniform probabilities 1/11:
        // dice(1) = 2*(8/11) / (8/11 + 8) = 1/6, all other classes 0,
        // so loss = 1 - (1/6)/11 = 65/66
        let n = 8;
        let gt = labels([2, 2, 2], vec![1u8; n]);
        let probs = vec![1.0f32 / NUM_CLASSES as f32; n * NUM_CLASSES];
        let pred = Prediction::new([2, 2, 2], [1.0; 3], NUM_CLASSES, probs).unwrap();
        let loss = dice_loss(&pred, &gt, false).unwrap();
        assert!((loss - 65.0 / 66.0).abs() < 1e-6, "{loss}");

        let perfect = Prediction::from_labels(&gt, NUM_CLASSES).unwrap();
        assert_eq!(dice_loss(&perfect, &gt, false).unwrap(), 0.0);
        assert_eq!(dice_loss(&perfect, &gt, true).unwrap(), 0.0);
    }

    #[test]
    fn dice_loss_disjoint_one_hots() {
        // two voxels: gt [1,2], pred [2,1]; classes 1 and 2 score 0,
        // the other nine classes are vacuous -> loss = 1 - 9/11 = 2/11
        let gt = labels([2, 1, 1], vec![1, 2]);
        let pred_labels = labels([2, 1, 1], vec![2, 1]);
        let pred = Prediction::from_labels(&pred_labels, NUM_CLASSES).unwrap();
        let loss = dice_loss(&pred, &gt, false).unwrap();
        assert!((loss - 2.0 / 11.0).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn cross_entropy_cases() {
        let gt = labels([2, 2, 2], vec![1u8; 8]);
        let perfect = Prediction::from_labels(&gt, NUM_CLASSES).unwrap();
        let ce = cross_entropy(&perfect, &gt).unwrap();
        assert!(ce >= 0.0 && ce < 1e-6, "{ce}");

        let probs = vec![1.0f32 / NUM_CLASSES as f32; 8 * NUM_CLASSES];
        let uniform = Prediction::new([2, 2, 2], [1.0; 3], NUM_CLASSES, probs).unwrap();
        let ce = cross_entropy(&uniform, &gt).unwrap();
        assert!((ce - (NUM_CLASSES as f64).ln()).abs() < 1e-6, "{ce}");

        // zero probability at the true class: clamped to -ln(1e-7)
        let wrong_labels = labels([2, 2, 2], vec![2u8; 8]);
        let wrong = Prediction::from_labels(&wrong_labels, NUM_CLASSES).unwrap();
        let ce = cross_entropy(&wrong, &gt).unwrap();
        assert!((ce - 16.11809565095832).abs() < 1e-9, "{ce}");
    }

    #[test]
    fn alpha_schedule_endpoints() {
        let params = LossScheduleParams { beta: 100, gamma: 200, total: 300 };
        assert_eq!(alpha(100, &params).unwrap(), 0.9);
        assert_eq!(alpha(200, &params).unwrap(), 0.1);
        assert_eq!(alpha(150, &params).unwrap(), 0.5);
        assert!(alpha(99, &params).is_err());
        assert!(alpha(201, &params).is_err());

        let bad = LossScheduleParams { beta: 0, gamma: 10, total: 20 };
        assert!(alpha(5, &bad).is_err());
        let bad = LossScheduleParams { beta: 10, gamma: 10, total: 20 };
        assert!(alpha(10, &bad).is_err());
        let bad = LossScheduleParams { beta: 5, gamma: 30, total: 20 };
        assert!(alpha(10, &bad).is_err());
    }

    #[test]
    fn hybrid_loss_regimes_and_continuity() {
        let mut gt_data = vec![0u8; 27];
        for i in 0..9 {
            gt_data[i] = 1 + (i % 3) as u8;
        }
        let gt = labels([3, 3, 3], gt_data.clone());
        let mut pred_data = gt_data;
        pred_data[0] = 5; // some disagreement so both losses are nonzero
        pred_data[13] = 9;
        let pred =
            Prediction::from_labels(&labels([3, 3, 3], pred_data), NUM_CLASSES).unwrap();
        let params = LossScheduleParams { beta: 100, gamma: 200, total: 300 };

        let ce = cross_entropy(&pred, &gt).unwrap();
        let dice = dice_loss(&pred, &gt, false).unwrap();
        assert!(ce > 0.0 && dice > 0.0);

        assert_eq!(hybrid_loss(&pred, &gt, 0, &params).unwrap(), ce);
        assert_eq!(hybrid_loss(&pred, &gt, 100, &params).unwrap(), ce);

        let at_gamma = hybrid_loss(&pred, &gt, 200, &params).unwrap();
        let regime3 = 0.9 * dice + 0.1 * ce;
        assert!((at_gamma - regime3).abs() < 1e-12, "{at_gamma} vs {regime3}");
        assert_eq!(hybrid_loss(&pred, &gt, 201, &params).unwrap(), regime3);
        assert_eq!(hybrid_loss(&pred, &gt, 300, &params).unwrap(), regime3);

        let mid = hybrid_loss(&pred, &gt, 150, &params).unwrap();
        assert!((mid - (0.5 * ce + 0.5 * dice)).abs() < 1e-12);

        assert!(hybrid_loss(&pred, &gt, 301, &params).is_err());
    }

    fn slab(dims: [usize; 3], x: usize) -> Volume {
        let mut v = Volume::zeros_u8(dims, [1.0; 3]).unwrap();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let i = v.index(x, y, z);
                v.u8_data_mut().unwrap()[i] = 1;
            }
        }
        v
    }

    #[test]
    fn asd_identical_and_slabs() {
        let a = slab([8, 5, 7], 2);
        assert_eq!(asd(&a, &a, [1.0; 3]).unwrap(), 0.0);

        let b = slab([8, 5, 7], 5);
        let d = asd(&a, &b, [1.0; 3]).unwrap();
        assert!((d - 3.0).abs() < 1e-12, "{d}");
        assert_eq!(asd(&b, &a, [1.0; 3]).unwrap(), d);

        // anisotropic spacing scales the distance
        let d = asd(&a, &b, [2.0, 1.0, 1.0]).unwrap();
        assert!((d - 6.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn asd_rejects_empty_regions() {
        let a = slab([4, 4, 4], 1);
        let empty = Volume::zeros_u8([4, 4, 4], [1.0; 3]).unwrap();
        assert!(matches!(asd(&a, &empty, [1.0; 3]), Err(Error::EmptyInput(_))));
        assert!(matches!(asd(&empty, &a, [1.0; 3]), Err(Error::EmptyInput(_))));
    }

    // independent O(n^2) reference: same 6-connected surface rule, brute
    // double loop over point pairs
    fn brute_asd(a: &Volume, b: &Volume, spacing: [f64; 3]) -> f64 {
        fn surf(v: &Volume) -> Vec<[f64; 3]> {
            let d = v.u8_data().unwrap();
            let [nx, ny, nz] = v.dims();
            let inside = |x: isize, y: isize, z: isize| -> bool {
                x >= 0
                    && y >= 0
                    && z >= 0
                    && (x as usize) < nx
                    && (y as usize) < ny
                    && (z as usize) < nz
                    && d[x as usize + nx * (y as usize + ny * z as usize)] != 0
            };
            let mut out = Vec::new();
            for z in 0..nz as isize {
                for y in 0..ny as isize {
                    for x in 0..nx as isize {
                        if !inside(x, y, z) {
                            continue;
                        }
                        if !inside(x - 1, y, z)
                            || !inside(x + 1, y, z)
                            || !inside(x, y - 1, z)
                            || !inside(x, y + 1, z)
                            || !inside(x, y, z - 1)
                            || !inside(x, y, z + 1)
                        {
                            out.push([x as f64, y as f64, z as f64]);
                        }
                    }
                }
            }
            out
        }
        let sa = surf(a);
        let sb = surf(b);
        let min_d = |p: &[f64; 3], set: &[[f64; 3]]| -> f64 {
            set.iter()
                .map(|q| {
                    ((p[0] - q[0]) * spacing[0]).powi(2)
                        + ((p[1] - q[1]) * spacing[1]).powi(2)
                        + ((p[2] - q[2]) * spacing[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        };
        let sum_a: f64 = sa.iter().map(|p| min_d(p, &sb)).sum();
        let sum_b: f64 = sb.iter().map(|p| min_d(p, &sa)).sum();
        (sum_a + sum_b) / (sa.len() + sb.len()) as f64
    }

    fn random_region(dims: [usize; 3], seed: u64, blobs: usize) -> Volume {
        let rng = crate::rng::CounterRng::new(seed);
        let mut v = Volume::zeros_u8(dims, [1.0; 3]).unwrap();
        for b in 0..blobs {
            let c = [
                rng.uniform(b as u64, 0, 0.0, (dims[0] - 1) as f64),
                rng.uniform(b as u64, 1, 0.0, (dims[1] - 1) as f64),
                rng.uniform(b as u64, 2, 0.0, (dims[2] - 1) as f64),
            ];
            let r = rng.uniform(b as u64, 3, 1.0, 4.0);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let d2 = (x as f64 - c[0]).powi(2)
                            + (y as f64 - c[1]).powi(2)
                            + (z as f64 - c[2]).powi(2);
                        if d2 <= r * r {
                            let i = v.index(x, y, z);
                            v.u8_data_mut().unwrap()[i] = 1;
                        }
                    }
                }
            }
        }
        v
    }

    #[test]
    fn asd_matches_brute_force() {
        for seed in [3u64, 11, 29, 57] {
            let a = random_region([14, 12, 10], seed, 2);
            let b = random_region([14, 12, 10], seed + 1000, 2);
            if a.u8_data().unwrap().iter().all(|&x| x == 0)
                || b.u8_data().unwrap().iter().all(|&x| x == 0)
            {
                continue;
            }
            let fast = asd(&a, &b, [0.75, 1.0, 1.25]).unwrap();
            let brute = brute_asd(&a, &b, [0.75, 1.0, 1.25]);
            assert!((fast - brute).abs() < 1e-9, "seed {seed}: {fast} vs {brute}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn asd_equals_oracle_on_random_regions(
                seed_a in proptest::num::u64::ANY,
                seed_b in proptest::num::u64::ANY,
                sx in 0.5f64..2.0, sy in 0.5f64..2.0, sz in 0.5f64..2.0,
            ) {
                let dims = [12usize, 11, 9];
                let a = random_region(dims, seed_a, 2);
                let b = random_region(dims, seed_b, 2);
                prop_assume!(a.u8_data().unwrap().iter().any(|&x| x != 0));
                prop_assume!(b.u8_data().unwrap().iter().any(|&x| x != 0));
                let spacing = [sx, sy, sz];
                let fast = asd(&a, &b, spacing).unwrap();
                let brute = brute_asd(&a, &b, spacing);
                prop_assert!((fast - brute).abs() < 1e-9);
                prop_assert!(fast >= 0.0);
                // symmetry
                prop_assert_eq!(asd(&b, &a, spacing).unwrap(), fast);
            }
        }
    }
}
