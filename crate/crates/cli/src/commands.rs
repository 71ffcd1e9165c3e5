//! Subcommand implementations. Each returns an [`Outcome`]; hard failures
//! (I/O, bad input files) come back as errors.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mflab::data::{admissible, STREAM_EVAL};
use mflab::diagnostics::{convergence_report_with, sard_probe, ConvergenceReport};
use mflab::field::{risk_estimate, PotentialField};
use mflab::flow::{self, TrajectoryRecord};
use mflab::params::Ensemble;
use mflab::stats::Estimate;
use mflab::Error;

use crate::config::{ConfigFile, Experiment};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Aborted,
    CheckFailed,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Completed => 0,
            Outcome::Aborted => 2,
            Outcome::CheckFailed => 3,
        }
    }

    fn worst(self, other: Outcome) -> Outcome {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> mflab::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

/// Finished run: trajectory, final ensemble and report.
pub struct RunResult {
    pub record: TrajectoryRecord,
    pub ensemble: Ensemble,
    pub report: ConvergenceReport,
}

/// Runs the flow and the convergence diagnostics without touching the disk.
pub fn simulate(exp: &Experiment, perturb: f64) -> mflab::Result<RunResult> {
    let cfg = flow::FlowConfig { perturb, ..exp.flow };
    let (record, ensemble) = flow::run(&exp.ensemble, &cfg, &exp.model, &exp.loss, &exp.grid)?;
    let mbr = match exp.loss.mbr_estimate(&exp.model, exp.mbr_samples) {
        Ok(m) => m,
        Err(e @ (Error::MbrNotAttained(_) | Error::NoBayesPredictor)) => {
            eprintln!("warning: {e}; the verdict ignores the risk gap");
            Estimate { mean: f64::NAN, stderr: f64::NAN }
        }
        Err(e) => return Err(e),
    };
    let final_risk = if exp.eval_samples > 0 {
        let batch = exp.model.sample(exp.eval_samples, STREAM_EVAL)?;
        risk_estimate(&ensemble, &exp.flow.activation, &exp.loss, &batch)
    } else {
        let n = record.len();
        Estimate { mean: record.risk[n - 1], stderr: record.risk_stderr[n - 1] }
    };
    let report = convergence_report_with(&record, mbr, final_risk, exp.thresholds);
    Ok(RunResult { record, ensemble, report })
}

/// Writes `trajectory.csv`, `report.csv`, `verdict.txt` and
/// `final_ensemble.csv` into `out`. An aborted run leaves
/// `aborted_ensemble.csv` with the last finite state instead.
pub fn run(exp: &Experiment, out: &Path, perturb: f64) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    match simulate(exp, perturb) {
        Ok(r) => {
            write_with(&out.join("trajectory.csv"), |w| r.record.write_csv(w))?;
            write_with(&out.join("final_ensemble.csv"), |w| r.ensemble.write_csv(w))?;
            write_with(&out.join("report.csv"), |w| r.report.write_csv(w))?;
            let mut v = create(&out.join("verdict.txt"))?;
            writeln!(v, "verdict={}", r.report.verdict)?;
            v.flush()?;
            println!(
                "verdict={} final_risk={:.6} mbr={:.6} gap/sigma={:.2} sup_g_decay={:.2}",
                r.report.verdict,
                r.report.final_risk.mean,
                r.report.mbr.mean,
                r.report.final_gap / r.report.gap_sigma,
                r.report.sup_g_decay
            );
            Ok(Outcome::Completed)
        }
        Err(Error::Aborted { step, time, reason, dump }) => {
            write_with(&out.join("aborted_ensemble.csv"), |w| dump.write_csv(w))?;
            eprintln!("run aborted at step {step} (t = {time}): {reason}");
            Ok(Outcome::Aborted)
        }
        Err(e) => Err(e.into()),
    }
}

/// Delta-sweep table for the configured data law, also written to
/// `admissible.csv`.
pub fn admissible_cmd(exp: &Experiment, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let a = &exp.admissible;
    let report = admissible(&exp.model, a.pairs, a.samples, a.delta)?;
    let path = out.join("admissible.csv");
    let mut w = create(&path)?;
    writeln!(w, "delta,ratio_max")?;
    println!("{:>12} {:>14}", "delta", "ratio_max");
    for row in &report.rows {
        writeln!(w, "{:.16e},{:.16e}", row.delta, row.ratio_max)?;
        println!("{:>12.3e} {:>14.6}", row.delta, row.ratio_max);
    }
    w.flush()?;
    println!("verdict={} variation={:.3} growth_per_decade={:.3}", report.verdict, report.variation, report.growth_per_decade);
    Ok(Outcome::Completed)
}

/// Level-set histogram of `g` with near-critical counts, written to
/// `sard.csv`.
pub fn sard_cmd(exp: &Experiment, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let s = &exp.sard;
    let ensemble = exp.sard_ensemble.as_ref().unwrap_or(&exp.ensemble);
    let batch = exp.model.sample(s.samples, STREAM_EVAL)?;
    let field = PotentialField::new(ensemble, &batch, &exp.loss, exp.flow.activation);
    let report = sard_probe(&field, &exp.grid, s.bins, s.a_min, s.kink_tol);
    write_with(&out.join("sard.csv"), |w| report.write_csv(w))?;
    let checked = report.points.iter().filter(|p| p.identity_residual.is_some()).count();
    let near: usize = report.histogram.iter().map(|b| b.near_critical).sum();
    println!(
        "points={} identity_checked={} identity_residual_max={:.3e} sup_residual={:.3e} near_critical={}",
        report.points.len(),
        checked,
        report.identity_residual_max,
        field.sup_residual(),
        near
    );
    Ok(Outcome::Completed)
}

/// One run per sweep cell in `out/cell-NNN`, indexed by `out/cells.csv`.
/// Cells that fail validation are reported and skipped.
pub fn sweep(config: &ConfigFile, out: &Path, perturb: f64) -> Result<(Outcome, bool)> {
    let cells = config.sweep_cells()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let keys: Vec<String> = cells.first().map(|(l, _)| l.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut index = create(&out.join("cells.csv"))?;
    writeln!(index, "cell,{}verdict", keys.iter().map(|k| format!("{k},")).collect::<String>())?;
    let mut outcome = Outcome::Completed;
    let mut config_error = false;
    for (i, (labels, cell)) in cells.iter().enumerate() {
        let name = format!("cell-{i:03}");
        let values: String = labels.iter().map(|(_, v)| format!("{v},")).collect();
        let verdict = match cell.build() {
            Err(e) => {
                eprintln!("{name}: {e}");
                config_error = true;
                "invalid".to_string()
            }
            Ok(exp) => {
                println!("{name}: {}", labels.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "));
                let dir = out.join(&name);
                let o = run(&exp, &dir, perturb)?;
                outcome = outcome.worst(o);
                match o {
                    Outcome::Completed => fs::read_to_string(dir.join("verdict.txt"))?.trim().trim_start_matches("verdict=").to_string(),
                    _ => "aborted".to_string(),
                }
            }
        };
        writeln!(index, "{name},{values}{verdict}")?;
    }
    index.flush()?;
    Ok((outcome, config_error))
}
