//! Voxel classifiers: per-class probability output, a geometric oracle that
//! reapplies the centerline labeling rule, a deliberately corrupted oracle
//! for driving uncertainty, and a subprocess protocol for plugging in real
//! models without recompilation.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::labeling::assign_voxel_labels;
use crate::phantom::{Centerline, CenterlineSet};
use crate::rng::CounterRng;
use crate::transforms::{volume_center, RigidTransform};
use crate::volume::{read_volume, write_volume, Volume};

/// Per-class probabilities over a volume grid, stored class-major:
/// `probs[c * n + i]` is class `c` at linear voxel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: usize,
    probs: Vec<f32>,
}

impl Prediction {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        num_classes: usize,
        probs: Vec<f32>,
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if num_classes == 0 {
            return Err(Error::invariant("prediction needs at least one class"));
        }
        if probs.len() != n * num_classes {
            return Err(Error::LengthMismatch {
                expected: n * num_classes,
                actual: probs.len(),
            });
        }
        Ok(Prediction {
            dims,
            spacing,
            num_classes,
            probs,
        })
    }

    /// One-hot probabilities from a hard label volume.
    pub fn from_labels(labels: &Volume, num_classes: usize) -> Result<Self> {
        let data = labels.u8_data()?;
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let n = data.len();
        let mut probs = vec![0f32; n * num_classes];
        for (i, &l) in data.iter().enumerate() {
            probs[l as usize * n + i] = 1.0;
        }
        Prediction::new(labels.dims(), labels.spacing(), num_classes, probs)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn class_slice(&self, c: usize) -> &[f32] {
        let n = self.voxel_count();
        &self.probs[c * n..(c + 1) * n]
    }

    /// Argmax per voxel, ties to the smaller class id.
    pub fn hard_labels(&self) -> Volume {
        let n = self.voxel_count();
        let mut out = vec![0u8; n];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut best_c = 0usize;
            let mut best_p = self.probs[i];
            for c in 1..self.num_classes {
                let p = self.probs[c * n + i];
                if p > best_p {
                    best_p = p;
                    best_c = c;
                }
            }
            *slot = best_c as u8;
        }
        Volume::from_u8(self.dims, self.spacing, out).expect("shape is consistent")
    }

    /// Largest absolute deviation of any voxel's probability sum from 1.
    pub fn max_normalization_deviation(&self) -> f64 {
        let n = self.voxel_count();
        let mut worst = 0f64;
        for i in 0..n {
            let mut sum = 0f64;
            for c in 0..self.num_classes {
                sum += self.probs[c * n + i] as f64;
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let dev = self.max_normalization_deviation();
        if dev > tol {
            return Err(Error::invariant(format!(
                "probabilities deviate from sum 1 by {dev:.3e} (tolerance {tol:.0e})"
            )));
        }
        Ok(())
    }

    /// Rescale every voxel's probabilities to sum to 1. A voxel with an
    /// all-zero (or non-finite) vector is unrecoverable.
    pub fn renormalize(&mut self) -> Result<()> {
        let n = self.voxel_count();
        for i in 0..n {
            let mut sum = 0f64;
            for c in 0..self.num_classes {
                sum += self.probs[c * n + i] as f64;
            }
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::Predictor(format!(
                    "voxel {i}: probability sum {sum} cannot be renormalized"
                )));
            }
            for c in 0..self.num_classes {
                self.probs[c * n + i] = (self.probs[c * n + i] as f64 / sum) as f32;
            }
        }
        Ok(())
    }
}

/// A voxel classifier for (possibly augmented) binary segmentations. The
/// augmentation transform that produced `seg` is passed along so geometric
/// predictors can move their reference geometry into the same space; a real
/// model simply ignores it.
pub trait Predictor: Sync {
    fn predict(&self, seg: &Volume, transform: &RigidTransform) -> Result<Prediction>;
}

/// Forward-map every centerline point (continuous, no rounding).
pub fn transform_centerlines(
    lines: &CenterlineSet,
    t: &RigidTransform,
    dims: [usize; 3],
) -> CenterlineSet {
    let center = volume_center(dims);
    CenterlineSet {
        lines: lines
            .lines
            .iter()
            .map(|l| Centerline {
                label: l.label,
                points: l.points.iter().map(|p| t.forward_point(*p, center)).collect(),
            })
            .collect(),
    }
}

/// Exact geometric classifier: carries the ground-truth centerlines into the
/// augmented space and reapplies the neighborhood labeling rule.
pub struct OraclePredictor {
    pub centerlines: CenterlineSet,
    pub neighborhood: usize,
}

impl OraclePredictor {
    pub fn new(centerlines: CenterlineSet) -> Self {
        OraclePredictor {
            centerlines,
            neighborhood: 7,
        }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, seg: &Volume, transform: &RigidTransform) -> Result<Prediction> {
        let moved = transform_centerlines(&self.centerlines, transform, seg.dims());
        let labels = assign_voxel_labels(seg, &moved, self.neighborhood)?;
        Prediction::from_labels(&labels, NUM_CLASSES)
    }
}

/// Oracle with labels corrupted at `flip_rate`: each foreground voxel is,
/// with that probability, resampled uniformly over classes 1..=10 (it may
/// land back on the original class). Deterministic in (seed, voxel index).
pub struct NoisyOraclePredictor {
    pub centerlines: CenterlineSet,
    pub neighborhood: usize,
    pub flip_rate: f64,
    pub seed: u64,
}

impl Predictor for NoisyOraclePredictor {
    fn predict(&self, seg: &Volume, transform: &RigidTransform) -> Result<Prediction> {
        if !(0.0..1.0).contains(&self.flip_rate) {
            return Err(Error::invalid(format!(
                "flip_rate must be in [0,1), got {}",
                self.flip_rate
            )));
        }
        let moved = transform_centerlines(&self.centerlines, transform, seg.dims());
        let mut labels = assign_voxel_labels(seg, &moved, self.neighborhood)?;
        let rng = CounterRng::new(self.seed);
        for (i, l) in labels.u8_data_mut()?.iter_mut().enumerate() {
            if *l == 0 {
                continue;
            }
            if rng.unit(0, i as u64) < self.flip_rate {
                *l = 1 + (rng.raw(1, i as u64) % 10) as u8;
            }
        }
        Prediction::from_labels(&labels, NUM_CLASSES)
    }
}

/// Identity-transform oracle prediction.
pub fn oracle_predict(seg: &Volume, centerlines: &CenterlineSet) -> Result<Prediction> {
    OraclePredictor::new(centerlines.clone()).predict(seg, &RigidTransform::identity())
}

/// Identity-transform corrupted oracle prediction.
pub fn noisy_oracle_predict(
    seg: &Volume,
    centerlines: &CenterlineSet,
    flip_rate: f64,
    seed: u64,
) -> Result<Prediction> {
    NoisyOraclePredictor {
        centerlines: centerlines.clone(),
        neighborhood: 7,
        flip_rate,
        seed,
    }
    .predict(seg, &RigidTransform::identity())
}

fn channel_stem(out_stem: &Path, c: usize) -> PathBuf {
    let mut os = out_stem.as_os_str().to_owned();
    os.push(format!(".c{c}"));
    PathBuf::from(os)
}

/// Write each class channel as its own volume at `<stem>.c<k>`.
pub fn write_prediction_channels(pred: &Prediction, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    for c in 0..pred.num_classes() {
        let v = Volume::from_f32(pred.dims(), pred.spacing(), pred.class_slice(c).to_vec())?;
        write_volume(&v, channel_stem(stem, c))?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct SubprocessOutcome {
    pub prediction: Prediction,
    /// Non-fatal protocol deviations, e.g. renormalization beyond tolerance.
    pub warnings: Vec<String>,
}

const NORMALIZATION_WARN_TOL: f64 = 1e-3;

/// Run an external classifier: write `seg` to `<in_stem>`, substitute the
/// `{in}`/`{out}` placeholders, execute via `sh -c`, then read the 11
/// channel volumes `<out_stem>.c0` .. `.c10`. Probabilities are always
/// renormalized; a deviation beyond 1e-3 is recorded as a warning, a
/// nonzero exit or missing/ill-shaped channel is an error.
pub fn subprocess_predict(
    seg: &Volume,
    command_template: &str,
    in_stem: impl AsRef<Path>,
    out_stem: impl AsRef<Path>,
) -> Result<SubprocessOutcome> {
    let in_stem = in_stem.as_ref();
    let out_stem = out_stem.as_ref();
    if !command_template.contains("{in}") || !command_template.contains("{out}") {
        return Err(Error::invalid(
            "command template must contain {in} and {out} placeholders",
        ));
    }
    write_volume(seg, in_stem)?;
    let command = command_template
        .replace("{in}", &in_stem.to_string_lossy())
        .replace("{out}", &out_stem.to_string_lossy());
    let output = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| Error::Predictor(format!("failed to launch `{command}`: {e}")))?;
    if !output.status.success() {
        return Err(Error::Predictor(format!(
            "external predictor exited with {}: stderr: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }

    let n = seg.len();
    let mut probs = vec![0f32; n * NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let stem = channel_stem(out_stem, c);
        let vol = read_volume(&stem).map_err(|e| {
            Error::Predictor(format!(
                "missing or unreadable channel {}: {e}",
                stem.display()
            ))
        })?;
        if vol.dims() != seg.dims() {
            return Err(Error::Predictor(format!(
                "channel {} dims {:?} do not match input {:?}",
                stem.display(),
                vol.dims(),
                seg.dims()
            )));
        }
        let data = vol.f32_data().map_err(|_| {
            Error::Predictor(format!("channel {} is not f32", stem.display()))
        })?;
        probs[c * n..(c + 1) * n].copy_from_slice(data);
    }

    let mut prediction = Prediction::new(seg.dims(), seg.spacing(), NUM_CLASSES, probs)?;
    let mut warnings = Vec::new();
    let dev = prediction.max_normalization_deviation();
    if dev > NORMALIZATION_WARN_TOL {
        warnings.push(format!(
            "probabilities deviated from sum 1 by up to {dev:.3e}; renormalized"
        ));
    }
    prediction.renormalize()?;
    Ok(SubprocessOutcome {
        prediction,
        warnings,
    })
}

/// [`Predictor`] adapter for the subprocess protocol. Each call gets its own
/// scratch stem so concurrent augmented inferences never share files.
pub struct SubprocessPredictor {
    command_template: String,
    scratch_dir: PathBuf,
    counter: AtomicU64,
    pub warn_sink: std::sync::Mutex<Vec<String>>,
}

impl SubprocessPredictor {
    pub fn new(command_template: impl Into<String>, scratch_dir: impl Into<PathBuf>) -> Self {
        SubprocessPredictor {
            command_template: command_template.into(),
            scratch_dir: scratch_dir.into(),
            counter: AtomicU64::new(0),
            warn_sink: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut self.warn_sink.lock().unwrap())
    }
}

impl Predictor for SubprocessPredictor {
    fn predict(&self, seg: &Volume, _transform: &RigidTransform) -> Result<Prediction> {
        let k = self.counter.fetch_add(1, Ordering::Relaxed);
        let in_stem = self.scratch_dir.join(format!("in_{k}"));
        let out_stem = self.scratch_dir.join(format!("out_{k}"));
        let outcome = subprocess_predict(seg, &self.command_template, in_stem, out_stem)?;
        if !outcome.warnings.is_empty() {
            self.warn_sink.lock().unwrap().extend(outcome.warnings);
        }
        Ok(outcome.prediction)
    }
}
