//! Post-processing of trajectories: risk gap to the Bayes risk, moment
//! bounds, convergence verdicts, and the sphere probe of the potential.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::field::PotentialField;
use crate::flow::TrajectoryRecord;
use crate::stats::{dot, ls_slope, norm_sq, Estimate};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    ConvergingToMbr,
    Stalled,
    GrowingMoments,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::ConvergingToMbr => "converging-to-MBR",
            Verdict::Stalled => "stalled",
            Verdict::GrowingMoments => "growing-moments",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Decision thresholds, written into every report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// Risk gap counts as closed below this many combined standard errors.
    pub gap_sigmas: f64,
    /// Trailing fraction of the record used for the `log sup_g` trend.
    pub trend_fraction: f64,
    /// Standard errors of slack on the moment bounds.
    pub moment_sigmas: f64,
    /// A trend slope above `−stall_slope` means `sup_g` is not decaying.
    pub stall_slope: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { gap_sigmas: 3.0, trend_fraction: 0.5, moment_sigmas: 3.0, stall_slope: 1e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapPoint {
    pub t: f64,
    pub gap: f64,
    pub sigma: f64,
}

/// `risk(t) − MBR` with the combined standard error.
pub fn mbr_gap(rec: &TrajectoryRecord, mbr: Estimate) -> Vec<GapPoint> {
    (0..rec.len()).map(|i| GapPoint { t: rec.times[i], gap: rec.risk[i] - mbr.mean, sigma: rec.risk_stderr[i].hypot(mbr.stderr) }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundViolation {
    pub from: f64,
    pub to: f64,
    /// Amount by which `N` exceeds the bound plus tolerance.
    pub excess: f64,
}

/// Checks `N(t) ≤ 2[N(0) + R(0) t]` with slack `2 t · sigmas · stderr(R(0))`.
pub fn moment_bound_violations(rec: &TrajectoryRecord, sigmas: f64) -> Vec<BoundViolation> {
    if rec.is_empty() {
        return vec![];
    }
    (0..rec.len()).filter_map(|i| pair_violation(rec, 0, i, sigmas, false)).collect()
}

/// Checks `N(t) ≤ 2[N(T) + (t − T)(R(T) − R(t))]` for all recorded `T < t`.
pub fn refined_bound_violations(rec: &TrajectoryRecord, sigmas: f64) -> Vec<BoundViolation> {
    let mut out = vec![];
    for i in 0..rec.len() {
        for j in i + 1..rec.len() {
            out.extend(pair_violation(rec, i, j, sigmas, true));
        }
    }
    out
}

fn pair_violation(rec: &TrajectoryRecord, i: usize, j: usize, sigmas: f64, refined: bool) -> Option<BoundViolation> {
    let span = rec.times[j] - rec.times[i];
    let (drop, sigma) =
        if refined { (rec.risk[i] - rec.risk[j], rec.risk_stderr[i].hypot(rec.risk_stderr[j])) } else { (rec.risk[i], rec.risk_stderr[i]) };
    let bound = 2.0 * (rec.second_moment[i] + span * drop);
    let tol = 2.0 * span * sigmas * sigma + 1e-12 * (1.0 + bound.abs());
    let excess = rec.second_moment[j] - bound - tol;
    (excess > 0.0).then_some(BoundViolation { from: rec.times[i], to: rec.times[j], excess })
}

/// Least-squares slope of `ln N` over the records with `t ≥ from`.
pub fn log_growth_rate(rec: &TrajectoryRecord, from: f64) -> Option<f64> {
    let (ts, ln): (Vec<f64>, Vec<f64>) =
        rec.times.iter().zip(&rec.second_moment).filter(|(t, n)| **t >= from && **n > 0.0).map(|(t, n)| (*t, n.ln())).unzip();
    ls_slope(&ts, &ln)
}

/// Least-squares slope of `ln sup_g` over the trailing `fraction` of records.
pub fn sup_g_trend(rec: &TrajectoryRecord, fraction: f64) -> Option<f64> {
    let n = rec.len();
    let start = n - ((n as f64 * fraction).ceil() as usize).min(n);
    let (ts, ln): (Vec<f64>, Vec<f64>) = (start..n).filter(|&i| rec.sup_g[i] > 0.0).map(|i| (rec.times[i], rec.sup_g[i].ln())).unzip();
    ls_slope(&ts, &ln)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub mbr: Estimate,
    pub final_risk: Estimate,
    pub final_gap: f64,
    pub gap_sigma: f64,
    pub sup_g_trend: Option<f64>,
    /// `max sup_g / final sup_g`.
    pub sup_g_decay: f64,
    pub moment_violations: usize,
    /// Fitted slope of `ln N` over the frozen segment, if any.
    pub frozen_growth: Option<f64>,
    pub thresholds: Thresholds,
    pub verdict: Verdict,
}

/// Report using the last recorded batch risk.
pub fn convergence_report(rec: &TrajectoryRecord, mbr: Estimate) -> ConvergenceReport {
    let final_risk = match rec.len() {
        0 => Estimate { mean: f64::NAN, stderr: f64::NAN },
        n => Estimate { mean: rec.risk[n - 1], stderr: rec.risk_stderr[n - 1] },
    };
    convergence_report_with(rec, mbr, final_risk, Thresholds::default())
}

/// Verdict rules, in order:
/// fewer than 3 records, zero elapsed time or an unknown gap gives
/// `inconclusive`;
/// any violation of the sublinear moment bound gives `growing-moments`;
/// a gap within `gap_sigmas` with a negative `sup_g` trend gives
/// `converging-to-MBR`; a gap above `gap_sigmas` with a trend above
/// `−stall_slope` gives `stalled`; anything else is `inconclusive`.
pub fn convergence_report_with(rec: &TrajectoryRecord, mbr: Estimate, final_risk: Estimate, thresholds: Thresholds) -> ConvergenceReport {
    let final_gap = final_risk.mean - mbr.mean;
    let gap_sigma = final_risk.stderr.hypot(mbr.stderr);
    let trend = sup_g_trend(rec, thresholds.trend_fraction);
    let sup_g_decay = match rec.sup_g.last() {
        Some(&last) => rec.sup_g.iter().fold(0.0, |m: f64, v| m.max(*v)) / last,
        None => f64::NAN,
    };
    let moment_violations = moment_bound_violations(rec, thresholds.moment_sigmas).len();
    let frozen_growth = rec.frozen_from.and_then(|t| log_growth_rate(rec, t));
    let elapsed = rec.times.last().copied().unwrap_or(0.0) - rec.times.first().copied().unwrap_or(0.0);
    let closed = final_gap <= thresholds.gap_sigmas * gap_sigma;
    let verdict = if rec.len() < 3 || elapsed <= 0.0 || final_gap.is_nan() {
        Verdict::Inconclusive
    } else if moment_violations > 0 {
        Verdict::GrowingMoments
    } else {
        match trend {
            Some(s) if closed && s < 0.0 => Verdict::ConvergingToMbr,
            Some(s) if !closed && s > -thresholds.stall_slope => Verdict::Stalled,
            _ => Verdict::Inconclusive,
        }
    };
    ConvergenceReport {
        mbr,
        final_risk,
        final_gap,
        gap_sigma,
        sup_g_trend: trend,
        sup_g_decay,
        moment_violations,
        frozen_growth,
        thresholds,
        verdict,
    }
}

impl ConvergenceReport {
    /// `key,value` rows, thresholds included.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.16e}"));
        let f = |v: f64| format!("{v:.16e}");
        let rows: [(&str, String); 15] = [
            ("mbr", f(self.mbr.mean)),
            ("mbr_stderr", f(self.mbr.stderr)),
            ("final_risk", f(self.final_risk.mean)),
            ("final_risk_stderr", f(self.final_risk.stderr)),
            ("final_gap", f(self.final_gap)),
            ("gap_sigma", f(self.gap_sigma)),
            ("sup_g_trend", opt(self.sup_g_trend)),
            ("sup_g_decay", f(self.sup_g_decay)),
            ("moment_violations", self.moment_violations.to_string()),
            ("frozen_growth", opt(self.frozen_growth)),
            ("threshold_gap_sigmas", f(self.thresholds.gap_sigmas)),
            ("threshold_trend_fraction", f(self.thresholds.trend_fraction)),
            ("threshold_moment_sigmas", f(self.thresholds.moment_sigmas)),
            ("threshold_stall_slope", f(self.thresholds.stall_slope)),
            ("verdict", self.verdict.to_string()),
        ];
        w.write_record(["key", "value"])?;
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Relative threshold for near-critical points: `|∇^S g| < NEAR_CRITICAL · median`.
pub const NEAR_CRITICAL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub near_critical: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SardPoint {
    pub g: f64,
    pub tangential_norm: f64,
    /// `∇^S_a g` from the projected gradient.
    pub tangential_a: f64,
    /// `|∇^S_a g − (1/a − 2a) g|`, or `None` where the point was skipped.
    pub identity_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SardReport {
    pub points: Vec<SardPoint>,
    pub identity_residual_max: f64,
    pub near_critical_threshold: f64,
    pub histogram: Vec<LevelBin>,
}

/// Evaluates `g` and the tangential gradient `(I − θθᵀ)V` on unit grid
/// points, checks the identity `∇^S_a g = (1/a − 2a) g` where `|a| ≥ a_min`
/// and no sample kink lies within `kink_tol`, and bins `|∇^S g|` by level of
/// `g`.
pub fn sard_probe(field: &PotentialField, grid: &[Vec<f64>], bins: usize, a_min: f64, kink_tol: f64) -> SardReport {
    let points: Vec<SardPoint> = grid
        .par_iter()
        .map(|u| {
            let mut v = vec![0.0; u.len()];
            let g = field.potential_and_grad(u, &mut v);
            let radial = dot(u, &v);
            let tangential: Vec<f64> = v.iter().zip(u).map(|(vk, uk)| vk - radial * uk).collect();
            let a = u[0];
            let identity_residual =
                (a.abs() >= a_min && field.kink_distance(u) >= kink_tol).then(|| (tangential[0] - (1.0 / a - 2.0 * a) * g).abs());
            SardPoint { g, tangential_norm: norm_sq(&tangential).sqrt(), tangential_a: tangential[0], identity_residual }
        })
        .collect();
    let identity_residual_max = points.iter().filter_map(|p| p.identity_residual).fold(0.0, f64::max);

    let mut norms: Vec<f64> = points.iter().map(|p| p.tangential_norm).collect();
    norms.sort_by(f64::total_cmp);
    let median = if norms.is_empty() { 0.0 } else { norms[norms.len() / 2] };
    let near_critical_threshold = NEAR_CRITICAL * median;

    let bins = bins.max(1);
    let lo = points.iter().map(|p| p.g).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.g).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut histogram: Vec<LevelBin> =
        (0..bins).map(|k| LevelBin { lo: lo + k as f64 * width, hi: lo + (k + 1) as f64 * width, count: 0, near_critical: 0 }).collect();
    if !points.is_empty() {
        for p in &points {
            let k = (((p.g - lo) / width) as usize).min(bins - 1);
            histogram[k].count += 1;
            if p.tangential_norm < near_critical_threshold {
                histogram[k].near_critical += 1;
            }
        }
    }
    SardReport { points, identity_residual_max, near_critical_threshold, histogram }
}

impl SardReport {
    /// Histogram rows `level_lo,level_hi,count,near_critical`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level_lo", "level_hi", "count", "near_critical"])?;
        for b in &self.histogram {
            w.write_record([format!("{:.16e}", b.lo), format!("{:.16e}", b.hi), b.count.to_string(), b.near_critical.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
