//! Invariant suite run by `mflab check`, at reduced sizes.

use mflab::data::{admissible, AdmissibilityVerdict, ClassProbability, DataModel, InputLaw, LabelModel};
use mflab::diagnostics::{convergence_report, moment_bound_violations, refined_bound_violations, sard_probe, Verdict};
use mflab::field::{probe_grid, realize, ActivationSpec, PotentialField};
use mflab::flow::{self, dissipation, mean_potential, FlowConfig, Freeze, FrozenProfile, Integrator};
use mflab::loss::{golden_section, LossKind, LossModel};
use mflab::params::{Ensemble, Particle};
use mflab::rng::stream_rng;
use mflab::stats::{dot, mean, norm_sq, pairwise_sum, Estimate};
use rand::Rng;

use crate::config::Experiment;

/// Outcome of one invariant.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, passed, detail: detail.into() }
    }
}

/// Sizes used by the suite.
#[derive(Clone, Copy, Debug)]
pub struct CheckSizes {
    pub particles: usize,
    pub batch: usize,
    pub points: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        Self { particles: 256, batch: 512, points: 1000 }
    }
}

const SEED: u64 = 0x5eed;

/// Runs every invariant against the configured data, loss and activation.
/// `perturb` injects a relative error into every gradient.
pub fn run_checks(exp: &Experiment, perturb: f64, sizes: CheckSizes) -> Vec<Check> {
    let mut out = Vec::new();
    let d = exp.model.dim;
    let m = sizes.particles.min(exp.ensemble.len()).max(2);
    let e = Ensemble::new(exp.ensemble.particles()[..m].to_vec(), exp.ensemble.seed).expect("nonempty prefix");

    out.extend(params_checks(&e, exp, sizes));
    out.extend(data_checks(exp, d));
    out.extend(loss_checks(exp));
    out.extend(field_checks(&e, exp, perturb, sizes));
    out.extend(flow_checks(&e, exp, perturb, sizes));
    out
}

fn params_checks(e: &Ensemble, exp: &Experiment, sizes: CheckSizes) -> Vec<Check> {
    let d = e.dim();
    let mut rng = stream_rng(SEED, 1);
    let randoms: Vec<Particle> = (0..sizes.points)
        .map(|_| {
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            Particle::new(rng.gen_range(-3.0..3.0), &w, rng.gen_range(-3.0..3.0))
        })
        .collect();
    let flips = randoms.iter().filter(|p| p.sym_flip().minkowski() != p.minkowski()).count();

    let omni = Ensemble::init_omni(sizes.points, d, SEED).expect("valid sizes");
    let min_m0 = omni.min_minkowski();

    let act = exp.flow.activation;
    let xs = exp.model.sample_inputs(sizes.points, 1);
    let back = e.sphere_project().reparametrize_minimizer();
    let round_trip = (0..sizes.points)
        .map(|j| {
            let x = &xs[j * d..(j + 1) * d];
            (realize(e, &act, x) - realize(&back, &act, x)).abs()
        })
        .fold(0.0, f64::max);
    let rt_tol = 1e-10 * (1.0 + e.second_moment());

    let lambda = 2.7;
    let rescaled = e.map(|p| p.rebalance(lambda));
    let barron_rel = (rescaled.barron_estimate() - e.barron_estimate()).abs() / e.barron_estimate().max(f64::MIN_POSITIVE);
    let out_diff = (0..sizes.points.min(200))
        .map(|j| {
            let x = &xs[j * d..(j + 1) * d];
            (realize(e, &act, x) - realize(&rescaled, &act, x)).abs()
        })
        .fold(0.0, f64::max);

    vec![
        Check::new("params.sym_flip_preserves_minkowski", flips == 0, format!("{flips} mismatches over {}", randoms.len())),
        Check::new("params.init_omni_in_cone", min_m0 >= 0.0, format!("min minkowski {min_m0:.3e}")),
        Check::new("params.sphere_round_trip", round_trip <= rt_tol, format!("sup |f - f'| = {round_trip:.3e} (tol {rt_tol:.3e})")),
        Check::new(
            "params.rescaling_invariance",
            barron_rel <= 1e-12 && out_diff <= 1e-12 * (1.0 + e.second_moment()),
            format!("barron rel {barron_rel:.3e}, output {out_diff:.3e}"),
        ),
    ]
}

fn data_checks(exp: &Experiment, d: usize) -> Vec<Check> {
    let model = &exp.model;
    let mut out = Vec::new();
    let reproducible = match (model.sample(500, 7), model.sample(500, 7)) {
        (Ok(a), Ok(b)) => a.xs == b.xs && a.ys == b.ys,
        _ => false,
    };
    out.push(Check::new("data.batch_reproducible", reproducible, "same (seed, stream, n)"));

    let ball = DataModel::new(InputLaw::UniformBall { radius: 1.0 }, model.labels.clone(), d, SEED).expect("valid");
    let mut rng = stream_rng(SEED, 2);
    let points: Vec<Vec<f64>> = (0..10).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let atoms = DataModel::new(InputLaw::Empirical(points), model.labels.clone(), d, SEED).expect("valid");
    let verdicts = (admissible(&ball, 100, 20_000, 0.1), admissible(&atoms, 100, 20_000, 0.1));
    out.push(match verdicts {
        (Ok(b), Ok(a)) => Check::new(
            "data.admissible_monotone",
            b.verdict == AdmissibilityVerdict::Pass && a.verdict == AdmissibilityVerdict::Fail,
            format!("ball {} (variation {:.2}), 10 atoms {} (growth {:.2})", b.verdict, b.variation, a.verdict, a.growth_per_decade),
        ),
        (b, a) => Check::new("data.admissible_monotone", false, format!("{:?} / {:?}", b.err(), a.err())),
    });

    let binary = match &model.labels {
        LabelModel::Binary(_) => model.clone(),
        LabelModel::Regression { .. } => {
            DataModel::new(model.input.clone(), LabelModel::Binary(ClassProbability::Logistic { w: vec![1.0; d], b: 0.3 }), d, model.seed)
                .expect("valid")
        }
    };
    let lambda = match &binary.labels {
        LabelModel::Binary(l) => l.clone(),
        LabelModel::Regression { .. } => unreachable!(),
    };
    let n_oracle = 1_000_000;
    let xs = binary.sample_inputs(n_oracle, 3);
    let lam: Vec<f64> = (0..n_oracle).map(|j| 2.0 * lambda.eval(&xs[j * d..(j + 1) * d]) - 1.0).collect();
    let expected = mean(&lam);
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for (k, n) in [1_000usize, 10_000, 100_000].into_iter().enumerate() {
        match binary.sample(n, 10 + k as u64) {
            Ok(b) => {
                let z = (mean(&b.ys) - expected).abs() * (n as f64).sqrt();
                worst = worst.max(z);
                detail.push_str(&format!("n={n}: sqrt(n)|err|={z:.2} "));
            }
            Err(e) => {
                worst = f64::INFINITY;
                detail.push_str(&e.to_string());
            }
        }
    }
    out.push(Check::new("data.label_mean_rate", worst <= 4.0, detail.trim_end().to_string()));
    out
}

fn loss_checks(exp: &Experiment) -> Vec<Check> {
    let lm = exp.loss;
    let mut rng = stream_rng(SEED, 4);
    let mut out = Vec::new();

    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let (y0, y1, yl, t) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0), rng.gen::<f64>());
        let lhs = lm.eval(t * y0 + (1.0 - t) * y1, yl);
        let rhs = t * lm.eval(y0, yl) + (1.0 - t) * lm.eval(y1, yl);
        worst = worst.max((lhs - rhs) / (1.0 + rhs.abs()));
    }
    out.push(Check::new("loss.convex_first_slot", worst <= 1e-12, format!("max excess {worst:.3e}")));

    if lm.lipschitz_constant().is_some() {
        let sup = (0..100_000)
            .map(|_| {
                let y = rng.gen_range(-1e3..1e3);
                let yl = match lm.kind {
                    LossKind::Softplus => {
                        if rng.gen::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    _ => rng.gen_range(-1e3..1e3),
                };
                lm.d1(y, yl).abs()
            })
            .fold(0.0, f64::max);
        out.push(Check::new("loss.bounded_derivative", sup <= 1.0, format!("sup |d1| = {sup:.6}")));
    } else {
        out.push(Check::new("loss.bounded_derivative", true, format!("not applicable to {}", lm.kind)));
    }

    let h = 1e-5;
    let mut fd_worst: f64 = 0.0;
    let mut tested = 0;
    while tested < 1000 {
        let (y, yl) = (rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0));
        let r: f64 = y - yl;
        let near_kink = match lm.kind {
            LossKind::Huber => (r.abs() - 1.0).abs() < 1e-3,
            LossKind::Power(_) => r.abs() < 1e-2,
            _ => false,
        };
        if near_kink {
            continue;
        }
        tested += 1;
        let fd = (lm.eval(y + h, yl) - lm.eval(y - h, yl)) / (2.0 * h);
        fd_worst = fd_worst.max((fd - lm.d1(y, yl)).abs() / (1.0 + lm.d1(y, yl).abs()));
    }
    out.push(Check::new("loss.d1_matches_differences", fd_worst <= 1e-6, format!("max rel error {fd_worst:.3e}")));

    out.push(clip_check(exp));
    out
}

fn clip_check(exp: &Experiment) -> Check {
    let name = "loss.clip_keeps_minimizers";
    let d = exp.model.dim;
    let xs = exp.model.sample_inputs(8, 5);
    let base = LossModel { clip: None, ..exp.loss };
    let mut worst: f64 = 0.0;
    for j in 0..8 {
        let x = &xs[j * d..(j + 1) * d];
        let f = |lm: LossModel| move |a: f64| lm.augmented(&exp.model.labels, x, a);
        let star = golden_section(f(base), -20.0, 20.0, 1e-10);
        let clipped = match base.with_clip(star.abs() + 1.0) {
            Ok(c) => c,
            Err(e) => return Check::new(name, false, e.to_string()),
        };
        let star_c = golden_section(f(clipped), -20.0, 20.0, 1e-10);
        worst = worst.max((f(base)(star_c) - f(base)(star)).abs());
    }
    Check::new(name, worst <= 1e-9, format!("max L_x difference at minimizers {worst:.3e}"))
}

fn field_checks(e: &Ensemble, exp: &Experiment, perturb: f64, sizes: CheckSizes) -> Vec<Check> {
    let d = e.dim();
    let batch = match exp.model.sample(sizes.batch, 20) {
        Ok(b) => b,
        Err(err) => return vec![Check::new("field.batch", false, err.to_string())],
    };
    let field = PotentialField::new(e, &batch, &exp.loss, exp.flow.activation).with_gradient_perturbation(perturb);
    let sup_r = field.sup_residual();
    let mut rng = stream_rng(SEED, 6);
    let grid = probe_grid(d, sizes.points, SEED);

    let mut euler = 0.0f64;
    let mut skipped = 0;
    for u in &grid {
        let scale = rng.gen_range(0.5..2.0);
        let p: Vec<f64> = u.iter().map(|v| v * scale).collect();
        if field.kink_distance(&p) < 1e-8 {
            skipped += 1;
            continue;
        }
        let mut v = vec![0.0; p.len()];
        let g = field.potential_and_grad(&p, &mut v);
        let excess = (g - 0.5 * dot(&p, &v)).abs() / ((1.0 + norm_sq(&p)) * sup_r.max(f64::MIN_POSITIVE));
        euler = euler.max(excess);
    }

    let mut tangency = 0.0f64;
    for u in &grid {
        let inner = norm_sq(&u[1..]).sqrt();
        let mut p = u.clone();
        p[0] = inner;
        let n = norm_sq(&p).sqrt();
        p.iter_mut().for_each(|v| *v /= n);
        if field.kink_distance(&p) < 1e-8 {
            continue;
        }
        let v = field.potential_grad(&p);
        let mut flipped = p.clone();
        flipped[0] = -p[0];
        tangency = tangency.max(dot(&v, &flipped).abs() / sup_r.max(f64::MIN_POSITIVE));
    }

    let lip = mflab::field::lipschitz_estimate(&field, sizes.points, SEED);
    let c_l = exp.loss.lipschitz_constant();
    vec![
        Check::new(
            "field.euler_identity",
            euler <= 1e-10,
            format!("max |g - <p,V>/2| / ((1+|p|^2) sup|r|) = {euler:.3e} ({skipped} near kinks skipped)"),
        ),
        Check::new("field.tangent_on_cone_boundary", tangency <= 1e-8, format!("max |<V,(-a,w,b)>| / sup|r| = {tangency:.3e}")),
        Check::new(
            "field.lipschitz_estimate",
            lip.is_finite(),
            match c_l {
                Some(c) => format!("L = {lip:.4} (C = {:.4} with C_l = {c})", lip / c),
                None => format!("L = {lip:.4}"),
            },
        ),
    ]
}

fn short_config(exp: &Experiment, sizes: CheckSizes, perturb: f64) -> FlowConfig {
    FlowConfig {
        dt: 0.05,
        horizon: 1.0,
        integrator: Integrator::Rk4,
        batch_size: sizes.batch,
        batch_mode: flow::BatchMode::Fresh,
        record_every: 1,
        freeze: None,
        activation: ActivationSpec { cutoff: false, ..exp.flow.activation },
        perturb,
        cone_tol: exp.flow.cone_tol,
    }
}

fn flow_checks(e: &Ensemble, exp: &Experiment, perturb: f64, sizes: CheckSizes) -> Vec<Check> {
    let mut out = Vec::new();
    let grid = probe_grid(e.dim(), 64, SEED);
    let base = short_config(exp, sizes, perturb);

    let mut drifts = Vec::new();
    let mut violations = 0;
    for k in 0..3 {
        let cfg = FlowConfig { dt: base.dt / f64::from(1 << k), record_every: usize::MAX / 2, ..base };
        match flow::run(e, &cfg, &exp.model, &exp.loss, &grid) {
            Ok((_, fin)) => {
                drifts.push(fin.max_minkowski_drift());
                violations += fin.cone_violations(cfg.cone_tol);
            }
            Err(err) => {
                out.push(Check::new("flow.minkowski_conservation", false, err.to_string()));
                return out;
            }
        }
    }
    let ratios: Vec<String> = drifts.windows(2).map(|w| format!("{:.2}", w[0] / w[1])).collect();
    let scale = 1.0 + e.particles().iter().map(|p| p.m0.abs()).fold(0.0, f64::max);
    out.push(Check::new(
        "flow.minkowski_conservation",
        drifts[2] <= 1e-6 * scale,
        format!(
            "rk4 drift at dt = {}, {}, {}: {:.3e}, {:.3e}, {:.3e}; halving ratios {}",
            base.dt,
            base.dt / 2.0,
            base.dt / 4.0,
            drifts[0],
            drifts[1],
            drifts[2],
            ratios.join(", ")
        ),
    ));
    out.push(Check::new("flow.cone_preserved", violations == 0, format!("{violations} violations at tol {:.1e}", base.cone_tol)));

    let mut snapshots = Vec::new();
    let cfg = FlowConfig { horizon: 2.0, ..base };
    let result = flow::run_observed(e, &cfg, &exp.model, &exp.loss, &grid, |s, _, en| {
        if s > 0 && s % 8 == 0 {
            snapshots.push(en.clone());
        }
    });
    let (rec, _) = match result {
        Ok(r) => r,
        Err(err) => {
            out.push(Check::new("flow.moment_bound", false, err.to_string()));
            return out;
        }
    };
    let sigmas = exp.thresholds.moment_sigmas;
    let v1 = moment_bound_violations(&rec, sigmas);
    let v2 = refined_bound_violations(&rec, sigmas);
    out.push(Check::new("flow.moment_bound", v1.is_empty(), format!("{} violations over {} records", v1.len(), rec.len())));
    out.push(Check::new("flow.refined_moment_bound", v2.is_empty(), format!("{} violating pairs", v2.len())));
    out.push(homogeneity_check(&snapshots, exp, perturb, sizes));

    let report = convergence_report(&rec, Estimate::exact(0.0));
    let sound = (report.verdict == Verdict::GrowingMoments) == !v1.is_empty();
    let frozen_cfg = FlowConfig { horizon: 4.0, freeze: Some(Freeze { at: 0.0, profile: FrozenProfile::Constant(-0.5) }), ..base };
    let frozen = flow::run(e, &frozen_cfg, &exp.model, &exp.loss, &grid)
        .map(|(r, _)| (convergence_report(&r, Estimate::exact(0.0)).verdict, moment_bound_violations(&r, sigmas).len()));
    let frozen_ok = matches!(frozen, Ok((Verdict::GrowingMoments, n)) if n > 0);
    out.push(Check::new(
        "diagnostics.verdict_soundness",
        sound && frozen_ok,
        format!("free run {} with {} violations; frozen run {:?}", report.verdict, v1.len(), frozen.map_err(|e| e.to_string())),
    ));

    out.push(sard_linearity(e, exp, sizes));

    let mut a = Vec::new();
    let mut b = Vec::new();
    let same = report.write_csv(&mut a).is_ok() && convergence_report(&rec, Estimate::exact(0.0)).write_csv(&mut b).is_ok() && a == b;
    out.push(Check::new("diagnostics.report_deterministic", same, "two reports from one record"));

    let bytes = || -> Option<Vec<u8>> {
        let (r, _) = flow::run(e, &base, &exp.model, &exp.loss, &grid).ok()?;
        let mut buf = Vec::new();
        r.write_csv(&mut buf).ok()?;
        Some(buf)
    };
    let first = bytes();
    let rerun = first.is_some() && first == bytes();
    out.push(Check::new("cli.rerun_bit_identical", rerun, "trajectory bytes of two identical runs"));
    out
}

/// Finite-difference `dN/dt` over one tiny Euler step against `−4·mean g`,
/// on a shared batch.
fn homogeneity_check(snapshots: &[Ensemble], exp: &Experiment, perturb: f64, sizes: CheckSizes) -> Check {
    let name = "flow.homogeneity_identity";
    let dt = 1e-6;
    let batch = match exp.model.sample(4 * sizes.batch, 30) {
        Ok(b) => b,
        Err(err) => return Check::new(name, false, err.to_string()),
    };
    let act = ActivationSpec { cutoff: false, ..exp.flow.activation };
    let mut worst: f64 = 0.0;
    for e in snapshots {
        let field = PotentialField::new(e, &batch, &exp.loss, act).with_gradient_perturbation(perturb);
        let g = mean_potential(e, &field);
        let next = flow::step(e, dt, Integrator::Euler, |_| |t: &[f64], o: &mut [f64]| field.potential_and_grad(t, o));
        let dn: Vec<f64> = e
            .particles()
            .iter()
            .zip(next.particles())
            .map(|(p, q)| p.theta().iter().zip(q.theta()).map(|(x, y)| (y - x) * (y + x)).sum::<f64>())
            .collect();
        let fd = pairwise_sum(&dn) / e.len() as f64 / dt;
        let tol = 1e-5 * (4.0 * g).abs() + 2.0 * dt * dissipation(e, &field) + 1e-14;
        worst = worst.max((fd + 4.0 * g).abs() / tol);
    }
    Check::new(name, worst <= 1.0, format!("max error / tolerance = {worst:.3e} over {} snapshots", snapshots.len()))
}

fn sard_linearity(e: &Ensemble, exp: &Experiment, sizes: CheckSizes) -> Check {
    let name = "diagnostics.sard_residual_linear";
    let batch = match exp.model.sample(sizes.batch, 40) {
        Ok(b) => b,
        Err(err) => return Check::new(name, false, err.to_string()),
    };
    let field = PotentialField::new(e, &batch, &exp.loss, exp.flow.activation);
    let grid = probe_grid(e.dim(), 200, SEED);
    let r1 = sard_probe(&field, &grid, 10, 1e-3, 1e-8).identity_residual_max;
    let r2 = sard_probe(&field.scaled(2.0), &grid, 10, 1e-3, 1e-8).identity_residual_max;
    let ok = (r2 - 2.0 * r1).abs() <= 1e-9 * r2.abs().max(f64::MIN_POSITIVE);
    Check::new(name, ok, format!("residual {r1:.3e} -> {r2:.3e} after doubling"))
}
