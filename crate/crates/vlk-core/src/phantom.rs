//! Synthetic Circle-of-Willis phantoms: tube segmentations swept along
//! Catmull-Rom centerlines, the labeled centerline polylines themselves, and
//! a parabolic (Poiseuille) velocity field. Everything downstream is
//! exercised against these at desk scale.
//!
//! Geometry convention: x left-right, y anterior(0)-posterior(1), z
//! inferior(0)-superior(1), all in voxel coordinates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::volume::Volume;

/// One tube: a class label, ≥2 control points (voxel coordinates), and a
/// radius in voxels, either constant (length 1) or per control point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub label: u8,
    pub control_points: Vec<[f64; 3]>,
    pub radius: Vec<f64>,
}

impl TubeSpec {
    /// Base radius on segment `i` at local parameter `t`, before stenosis.
    fn base_radius(&self, i: usize, t: f64) -> f64 {
        if self.radius.len() == 1 {
            self.radius[0]
        } else {
            self.radius[i] + t * (self.radius[i + 1] - self.radius[i])
        }
    }
}

/// Focal narrowing: at tube parameter `center_t` the radius is scaled by
/// `1 - severity * bump(t)` with a cosine window of width `extent` (in tube
/// parameter units). `severity` 1 pinches the radius to zero, disconnecting
/// the tube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stenosis {
    pub segment: usize,
    pub center_t: f64,
    pub severity: f64,
    pub extent: f64,
}

impl Stenosis {
    /// Cosine bump: 1 at `center_t`, 0 outside `|t - center_t| > extent/2`.
    fn bump(&self, t: f64) -> f64 {
        let d = (t - self.center_t).abs();
        if d > self.extent / 2.0 {
            0.0
        } else {
            0.5 * (1.0 + (2.0 * std::f64::consts::PI * d / self.extent).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub segments: Vec<TubeSpec>,
    pub noise_seed: u64,
    pub stenoses: Vec<Stenosis>,
    /// Axis peak velocity per segment, cm/s.
    pub velocity_peak_cm_s: Vec<f64>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invariant("phantom spec needs at least 1 segment"));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invariant("phantom dims must be positive"));
        }
        if self.velocity_peak_cm_s.len() != self.segments.len() {
            return Err(Error::invariant(format!(
                "{} velocity peaks for {} segments",
                self.velocity_peak_cm_s.len(),
                self.segments.len()
            )));
        }
        if self
            .velocity_peak_cm_s
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invariant("velocity peaks must be finite and >= 0"));
        }
        for (i, tube) in self.segments.iter().enumerate() {
            if !(1..=9).contains(&tube.label) {
                return Err(Error::invariant(format!(
                    "segment {i}: label {} outside vessel range 1..=9",
                    tube.label
                )));
            }
            if tube.control_points.len() < 2 {
                return Err(Error::invariant(format!(
                    "segment {i}: needs at least 2 control points"
                )));
            }
            for p in &tube.control_points {
                for a in 0..3 {
                    if !(p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64) {
                        return Err(Error::invariant(format!(
                            "segment {i}: control point {p:?} outside volume dims {:?}",
                            self.dims
                        )));
                    }
                }
            }
            if tube.radius.is_empty()
                || (tube.radius.len() != 1 && tube.radius.len() != tube.control_points.len())
            {
                return Err(Error::invariant(format!(
                    "segment {i}: radius must have length 1 or {} entries",
                    tube.control_points.len()
                )));
            }
            if tube.radius.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::invariant(format!("segment {i}: radius must be > 0")));
            }
        }
        for (k, s) in self.stenoses.iter().enumerate() {
            if s.segment >= self.segments.len() {
                return Err(Error::invariant(format!(
                    "stenosis {k}: segment id {} out of range",
                    s.segment
                )));
            }
            if !(0.0..=1.0).contains(&s.center_t)
                || !(0.0..=1.0).contains(&s.severity)
                || !(s.extent > 0.0 && s.extent <= 1.0)
            {
                return Err(Error::invariant(format!(
                    "stenosis {k}: parameters out of range (t in [0,1], severity in [0,1], extent in (0,1])"
                )));
            }
        }
        Ok(())
    }
}

/// One labeled centerline polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub label: u8,
    pub points: Vec<[f64; 3]>,
}

/// Labeled centerlines, stored on disk as a JSON list of
/// `{"label": int, "points": [[x,y,z], ...]}` objects.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CenterlineSet {
    pub lines: Vec<Centerline>,
}

impl CenterlineSet {
    pub fn validate(&self) -> Result<()> {
        for (i, line) in self.lines.iter().enumerate() {
            if !(1..=9).contains(&line.label) {
                return Err(Error::invariant(format!(
                    "centerline {i}: label {} outside vessel range 1..=9",
                    line.label
                )));
            }
            if line.points.len() < 2 {
                return Err(Error::invariant(format!(
                    "centerline {i}: needs at least 2 points"
                )));
            }
            for w in line.points.windows(2) {
                let d2: f64 = (0..3).map(|a| (w[1][a] - w[0][a]).powi(2)).sum();
                if d2 > 4.0 {
                    return Err(Error::invariant(format!(
                        "centerline {i}: consecutive points more than 2 voxels apart"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        self.lines.iter().map(|l| l.points.len()).sum()
    }
}

pub fn write_centerlines(set: &CenterlineSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(set).expect("centerline serialization is infallible");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_centerlines(path: impl AsRef<Path>) -> Result<CenterlineSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: CenterlineSet = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    set.validate()?;
    Ok(set)
}

pub fn write_phantom_spec(spec: &PhantomSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(spec).expect("spec serialization is infallible");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_phantom_spec(path: impl AsRef<Path>) -> Result<PhantomSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: PhantomSpec = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Catmull-Rom point for the segment P1->P2 with neighbors P0, P3. The basis
/// weights sum to 1, so collinear control points trace an exactly straight
/// line.
fn catmull_rom(p: [[f64; 3]; 4], t: f64) -> [f64; 3] {
    let t2 = t * t;
    let t3 = t2 * t;
    let b0 = 0.5 * (-t + 2.0 * t2 - t3);
    let b1 = 0.5 * (2.0 - 5.0 * t2 + 3.0 * t3);
    let b2 = 0.5 * (t + 4.0 * t2 - 3.0 * t3);
    let b3 = 0.5 * (-t2 + t3);
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = b0 * p[0][a] + b1 * p[1][a] + b2 * p[2][a] + b3 * p[3][a];
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct FineSample {
    p: [f64; 3],
    /// Radius after stenosis scaling; may be 0 under severity 1.
    r: f64,
}

const FINE_STEP: f64 = 0.2;

/// Densely sample a tube's spline with stenosis-scaled radii. Sample spacing
/// is about [`FINE_STEP`] voxels along the curve.
fn fine_samples(tube: &TubeSpec, stenoses: &[&Stenosis]) -> Vec<FineSample> {
    let pts = &tube.control_points;
    let m = pts.len();
    let n_segs = m - 1;
    let ctrl = |i: isize| -> [f64; 3] { pts[i.clamp(0, m as isize - 1) as usize] };

    let mut out = Vec::new();
    for i in 0..n_segs {
        let window = [
            ctrl(i as isize - 1),
            ctrl(i as isize),
            ctrl(i as isize + 1),
            ctrl(i as isize + 2),
        ];
        // coarse pass to estimate this segment's arc length
        let coarse = 16;
        let mut len = 0.0;
        let mut prev = catmull_rom(window, 0.0);
        for j in 1..=coarse {
            let q = catmull_rom(window, j as f64 / coarse as f64);
            len += dist(prev, q);
            prev = q;
        }
        let steps = ((len / FINE_STEP).ceil() as usize).max(1);
        let start = if i == 0 { 0 } else { 1 }; // skip shared knot
        for j in start..=steps {
            let t = j as f64 / steps as f64;
            let u = (i as f64 + t) / n_segs as f64;
            let mut r = tube.base_radius(i, t);
            for s in stenoses {
                r *= 1.0 - s.severity * s.bump(u);
            }
            out.push(FineSample {
                p: catmull_rom(window, t),
                r,
            });
        }
    }
    out
}

#[inline]
fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Resample a polyline at equal arc-length steps of `total/ceil(total)` (≤ 1
/// voxel). Keeps both endpoints exactly.
fn resample_arc(fine: &[FineSample]) -> Vec<[f64; 3]> {
    let total: f64 = fine.windows(2).map(|w| dist(w[0].p, w[1].p)).sum();
    if total == 0.0 {
        return vec![fine[0].p, fine[fine.len() - 1].p];
    }
    let n = total.ceil().max(1.0) as usize;
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    out.push(fine[0].p);
    let mut walked = 0.0;
    let mut target = step;
    for w in fine.windows(2) {
        let seg = dist(w[0].p, w[1].p);
        while target <= walked + seg && out.len() < n {
            let u = (target - walked) / seg;
            let mut q = [0.0; 3];
            for a in 0..3 {
                q[a] = w[0].p[a] + u * (w[1].p[a] - w[0].p[a]);
            }
            out.push(q);
            target += step;
        }
        walked += seg;
    }
    out.push(fine[fine.len() - 1].p);
    out
}

/// Generate the binary segmentation, labeled centerlines, and velocity field
/// of a phantom. A voxel is foreground iff its center lies within the
/// (stenosis-scaled) radius of some tube's spline; velocity inside is the
/// parabolic profile `peak * (1 - (d/r)^2)`, maximized over tubes where they
/// overlap. Pure function of the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, CenterlineSet, Volume)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;
    let mut seg = vec![0u8; n];
    let mut vel = vec![0f32; n];
    let mut lines = Vec::with_capacity(spec.segments.len());

    for (si, tube) in spec.segments.iter().enumerate() {
        let stenoses: Vec<&Stenosis> = spec
            .stenoses
            .iter()
            .filter(|s| s.segment == si)
            .collect();
        let fine = fine_samples(tube, &stenoses);
        for s in &fine {
            for a in 0..3 {
                if !(s.p[a] >= 0.0 && s.p[a] <= (spec.dims[a] - 1) as f64) {
                    return Err(Error::invalid(format!(
                        "segment {si} (label {}): centerline exits volume bounds at {:?}",
                        tube.label, s.p
                    )));
                }
            }
        }
        let peak = spec.velocity_peak_cm_s[si];

        // rasterize each fine sub-segment as a capsule with lerped radius
        for w in fine.windows(2) {
            let (a, b) = (w[0], w[1]);
            let rmax = a.r.max(b.r);
            if rmax <= 0.0 {
                continue;
            }
            let lo = |axis: usize| {
                ((a.p[axis].min(b.p[axis]) - rmax).floor().max(0.0)) as usize
            };
            let hi = |axis: usize| {
                ((a.p[axis].max(b.p[axis]) + rmax).ceil() as usize).min(spec.dims[axis] - 1)
            };
            let d = [b.p[0] - a.p[0], b.p[1] - a.p[1], b.p[2] - a.p[2]];
            let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            for z in lo(2)..=hi(2) {
                for y in lo(1)..=hi(1) {
                    for x in lo(0)..=hi(0) {
                        let v = [x as f64, y as f64, z as f64];
                        let w0 = [v[0] - a.p[0], v[1] - a.p[1], v[2] - a.p[2]];
                        let u = if dd > 0.0 {
                            ((w0[0] * d[0] + w0[1] * d[1] + w0[2] * d[2]) / dd).clamp(0.0, 1.0)
                        } else {
                            0.0
                        };
                        let q = [a.p[0] + u * d[0], a.p[1] + u * d[1], a.p[2] + u * d[2]];
                        let r_loc = a.r + u * (b.r - a.r);
                        if r_loc <= 0.0 {
                            continue;
                        }
                        let ratio = dist(v, q) / r_loc;
                        // spline evaluation carries ~1e-13 noise; keep voxels
                        // sitting exactly on the wall inside
                        if ratio <= 1.0 + 1e-9 {
                            let idx = x + nx * (y + ny * z);
                            seg[idx] = 1;
                            let cand = (peak * (1.0 - ratio * ratio)).max(0.0) as f32;
                            if cand > vel[idx] {
                                vel[idx] = cand;
                            }
                        }
                    }
                }
            }
        }

        lines.push(Centerline {
            label: tube.label,
            points: resample_arc(&fine),
        });
    }

    let seg = Volume::from_u8(spec.dims, spec.spacing, seg)?;
    let vel = Volume::from_f32(spec.dims, spec.spacing, vel)?;
    let set = CenterlineSet { lines };
    set.validate()?;
    Ok((seg, set, vel))
}

pub const MIN_COW_DIM: usize = 64;

/// Nine-segment Circle-of-Willis-like layout: basilar artery rising on the
/// posterior midline, paired internal carotids lateral, middle cerebral
/// branches running laterally, anterior cerebrals climbing anterosuperior
/// near the midline, posterior cerebrals fanning back above the basilar tip.
/// Control points sit at fixed fractions of the volume extent, jittered by
/// the seed (±1% of extent per coordinate, ±5% radius). Segments are kept
/// separated by several voxels so labels never compete at shared walls, and
/// everything stays inside the ball that rigid TTA transforms keep in
/// bounds.
pub fn default_cow_spec(dims: [usize; 3], seed: u64) -> Result<PhantomSpec> {
    if dims.iter().any(|&d| d < MIN_COW_DIM) {
        return Err(Error::invalid(format!(
            "default phantom needs dims >= {MIN_COW_DIM} per axis, got {dims:?}"
        )));
    }
    let ext = [
        (dims[0] - 1) as f64,
        (dims[1] - 1) as f64,
        (dims[2] - 1) as f64,
    ];
    let rng = CounterRng::new(seed);

    // (label, control point fractions, radius vox, peak velocity cm/s)
    struct Proto {
        label: u8,
        points: &'static [[f64; 3]],
        radius: f64,
        peak: f64,
    }
    const BA: &[[f64; 3]] = &[[0.50, 0.64, 0.16], [0.50, 0.62, 0.30], [0.50, 0.60, 0.42]];
    const RICA: &[[f64; 3]] = &[
        [0.38, 0.45, 0.14],
        [0.39, 0.50, 0.24],
        [0.37, 0.43, 0.33],
        [0.38, 0.47, 0.44],
    ];
    const LICA: &[[f64; 3]] = &[
        [0.62, 0.45, 0.14],
        [0.61, 0.50, 0.24],
        [0.63, 0.43, 0.33],
        [0.62, 0.47, 0.44],
    ];
    const RMCA: &[[f64; 3]] = &[[0.27, 0.44, 0.52], [0.20, 0.43, 0.54], [0.13, 0.42, 0.55]];
    const LMCA: &[[f64; 3]] = &[[0.73, 0.44, 0.52], [0.80, 0.43, 0.54], [0.87, 0.42, 0.55]];
    const RACA: &[[f64; 3]] = &[[0.43, 0.36, 0.55], [0.44, 0.30, 0.62], [0.45, 0.25, 0.69]];
    const LACA: &[[f64; 3]] = &[[0.57, 0.36, 0.55], [0.56, 0.30, 0.62], [0.55, 0.25, 0.69]];
    const RPCA: &[[f64; 3]] = &[[0.42, 0.68, 0.50], [0.33, 0.72, 0.53], [0.25, 0.75, 0.55]];
    const LPCA: &[[f64; 3]] = &[[0.58, 0.68, 0.50], [0.67, 0.72, 0.53], [0.75, 0.75, 0.55]];
    let protos = [
        Proto { label: 1, points: BA, radius: 2.6, peak: 45.0 },
        Proto { label: 2, points: RICA, radius: 2.8, peak: 50.0 },
        Proto { label: 3, points: LICA, radius: 2.8, peak: 50.0 },
        Proto { label: 4, points: RMCA, radius: 2.0, peak: 40.0 },
        Proto { label: 5, points: LMCA, radius: 2.0, peak: 40.0 },
        Proto { label: 6, points: RACA, radius: 1.6, peak: 28.0 },
        Proto { label: 7, points: LACA, radius: 1.6, peak: 28.0 },
        Proto { label: 8, points: RPCA, radius: 1.6, peak: 30.0 },
        Proto { label: 9, points: LPCA, radius: 1.6, peak: 30.0 },
    ];

    let mut segments = Vec::with_capacity(9);
    let mut peaks = Vec::with_capacity(9);
    for (k, proto) in protos.iter().enumerate() {
        let stream = k as u64;
        let points: Vec<[f64; 3]> = proto
            .points
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let jit = rng.uniform(stream, (3 * i + a) as u64, -0.01, 0.01);
                    p[a] = (f[a] + jit) * ext[a];
                }
                p
            })
            .collect();
        let radius = proto.radius * rng.uniform(stream, 100, 0.95, 1.05);
        segments.push(TubeSpec {
            label: proto.label,
            control_points: points,
            radius: vec![radius],
        });
        peaks.push(proto.peak);
    }

    let spec = PhantomSpec {
        dims,
        spacing: [1.0; 3],
        segments,
        noise_seed: seed,
        stenoses: Vec::new(),
        velocity_peak_cm_s: peaks,
    };
    spec.validate()?;
    Ok(spec)
}
