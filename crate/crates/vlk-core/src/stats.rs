//! Agreement analysis between manually and automatically labeled velocity
//! measurements: factor-2 downsampling, region means, Bland-Altman limits of
//! agreement, and the Wilcoxon signed-rank test.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Halve resolution of a label volume by modal pooling over 2x2x2 blocks
/// (ties break to the smaller class id). Output dims are ceil(dims/2),
/// trailing partial blocks pool whatever voxels exist; spacing doubles.
pub fn downsample2_labels(labels: &Volume) -> Result<Volume> {
    let data = labels.u8_data()?;
    let [nx, ny, nz] = labels.dims();
    let od = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
    let mut out = vec![0u8; od[0] * od[1] * od[2]];
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut block = [0u8; 8];
                let mut m = 0;
                for z in (2 * oz)..(2 * oz + 2).min(nz) {
                    for y in (2 * oy)..(2 * oy + 2).min(ny) {
                        for x in (2 * ox)..(2 * ox + 2).min(nx) {
                            block[m] = data[x + nx * (y + ny * z)];
                            m += 1;
                        }
                    }
                }
                let mut best = block[0];
                let mut best_count = 0;
                for &cand in &block[..m] {
                    let count = block[..m].iter().filter(|&&b| b == cand).count();
                    if count > best_count || (count == best_count && cand < best) {
                        best = cand;
                        best_count = count;
                    }
                }
                out[ox + od[0] * (oy + od[1] * oz)] = best;
            }
        }
    }
    let s = labels.spacing();
    Volume::from_u8(od, [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]], out)
}

/// Halve resolution of a scalar field by mean pooling over 2x2x2 blocks.
pub fn downsample2_mean(field: &Volume) -> Result<Volume> {
    let data = field.f32_data()?;
    let [nx, ny, nz] = field.dims();
    let od = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
    let mut out = vec![0f32; od[0] * od[1] * od[2]];
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut sum = 0.0f64;
                let mut m = 0;
                for z in (2 * oz)..(2 * oz + 2).min(nz) {
                    for y in (2 * oy)..(2 * oy + 2).min(ny) {
                        for x in (2 * ox)..(2 * ox + 2).min(nx) {
                            sum += data[x + nx * (y + ny * z)] as f64;
                            m += 1;
                        }
                    }
                }
                out[ox + od[0] * (oy + od[1] * oz)] = (sum / m as f64) as f32;
            }
        }
    }
    let s = field.spacing();
    Volume::from_f32(od, [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]], out)
}

/// Mean of the field over voxels carrying the given label.
pub fn region_mean(field: &Volume, labels: &Volume, class: u8) -> Result<f64> {
    field.check_same_dims(labels)?;
    let f = field.f32_data()?;
    let l = labels.u8_data()?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..f.len() {
        if l[i] == class {
            sum += f[i] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput(format!(
            "region mean of absent class {class}"
        )));
    }
    Ok(sum / n as f64)
}

/// Bias and limits of agreement over paired differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlandAltman {
    pub n: usize,
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub loa_width: f64,
}

/// Differences are auto - manual; with `percent_of_mean` each difference is
/// expressed as a percentage of its pair mean. Limits are bias +/- 1.96
/// sample standard deviations (n-1 denominator).
pub fn bland_altman(pairs: &[(f64, f64)], percent_of_mean: bool) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "Bland-Altman needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let mut diffs = Vec::with_capacity(pairs.len());
    for &(manual, auto) in pairs {
        let d = auto - manual;
        if percent_of_mean {
            let m = 0.5 * (auto + manual);
            if m == 0.0 {
                return Err(Error::invalid(
                    "percent-of-mean difference undefined for a zero pair mean",
                ));
            }
            diffs.push(100.0 * d / m);
        } else {
            diffs.push(d);
        }
    }
    let n = diffs.len();
    let bias = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - bias) * (d - bias)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let loa_low = bias - 1.96 * sd;
    let loa_high = bias + 1.96 * sd;
    Ok(BlandAltman {
        n,
        bias,
        loa_low,
        loa_high,
        loa_width: loa_high - loa_low,
    })
}

/// Largest n for which the signed-rank p-value is computed by full
/// enumeration of sign assignments.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Ranks of |d| (1-based, average ranks for ties), doubled so they stay
/// integers.
fn doubled_ranks(abs_d: &[f64]) -> Vec<u64> {
    let n = abs_d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_d[a].partial_cmp(&abs_d[b]).unwrap());
    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]] {
            j += 1;
        }
        // average of 1-based ranks i+1..=j+1, doubled: (i+1) + (j+1)
        let r2 = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            ranks2[idx] = r2;
        }
        i = j + 1;
    }
    ranks2
}

/// Exact two-sided p: enumerate all 2^n sign assignments, count those with
/// W+ at least as extreme as observed in either tail (the null distribution
/// is symmetric).
fn exact_p(ranks2: &[u64], w_min2: u64, s2: u64) -> f64 {
    let n = ranks2.len();
    let mut extreme = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut wp2 = 0u64;
        for (b, &r2) in ranks2.iter().enumerate() {
            if mask >> b & 1 == 1 {
                wp2 += r2;
            }
        }
        if wp2 <= w_min2 || wp2 >= s2 - w_min2 {
            extreme += 1;
        }
    }
    (extreme as f64 / (1u64 << n) as f64).min(1.0)
}

/// Standard normal CDF via a polynomial erf approximation (max error about
/// 1.5e-7, far below any p-value decision threshold used here).
fn phi(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    let erf = if x < 0.0 { -erf } else { erf };
    0.5 * (1.0 + erf)
}

/// Tie-corrected normal approximation with continuity correction.
fn normal_p(ranks2: &[u64], abs_d: &[f64], w_min2: u64) -> f64 {
    let n = ranks2.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // tie correction: subtract (t^3 - t)/48 per group of equal |d|
    let mut sorted = abs_d.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let w = w_min2 as f64 / 2.0;
    let z = (w - mu + 0.5) / var.sqrt();
    (2.0 * phi(z)).min(1.0)
}

/// Two-sided Wilcoxon signed-rank p-value on the differences auto - manual.
/// Zero differences are dropped; all-zero input returns p = 1. Exact by
/// enumeration up to n = 12, tie-corrected normal approximation above.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<f64> {
    let diffs: Vec<f64> = pairs.iter().map(|&(m, a)| a - m).collect();
    wilcoxon_signed_rank_from_diffs(&diffs)
}

pub fn wilcoxon_signed_rank_from_diffs(diffs: &[f64]) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::EmptyInput("signed-rank test with no pairs".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite difference"));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Ok(1.0);
    }
    let abs_d: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_ranks(&abs_d);
    let s2: u64 = ranks2.iter().sum();
    let wp2: u64 = nonzero
        .iter()
        .zip(&ranks2)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r2)| r2)
        .sum();
    let w_min2 = wp2.min(s2 - wp2);
    if nonzero.len() <= WILCOXON_EXACT_MAX_N {
        Ok(exact_p(&ranks2, w_min2, s2))
    } else {
        Ok(normal_p(&ranks2, &abs_d, w_min2))
    }
}

/// Full agreement summary for one vessel: native-unit and percent-of-mean
/// Bland-Altman plus the signed-rank p.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AgreementReport {
    pub n: usize,
    pub native: BlandAltman,
    pub percent_of_mean: BlandAltman,
    pub wilcoxon_p: f64,
}

pub fn agreement_report(pairs: &[(f64, f64)]) -> Result<AgreementReport> {
    let native = bland_altman(pairs, false)?;
    let percent = bland_altman(pairs, true)?;
    let p = wilcoxon_signed_rank(pairs)?;
    Ok(AgreementReport {
        n: pairs.len(),
        native,
        percent_of_mean: percent,
        wilcoxon_p: p,
    })
}
