//! Time integration of `θ̇_i = −V(π; θ_i)` for all particles at once.

use std::io::Write;

use rayon::prelude::*;

use crate::data::{Batch, DataModel, STREAM_POOL};
use crate::field::{probe_sup, risk_estimate, ActivationSpec, PotentialField};
use crate::loss::{LossKind, LossModel};
use crate::params::Ensemble;
use crate::stats::{mean, norm_sq};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// A new i.i.d. batch every step, drawn from stream = step index.
    Fresh,
    /// One pool of the given size reused as the batch of every step.
    FixedPool(usize),
}

/// Residual profile used once the field is frozen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrozenProfile {
    /// Keep the residuals of the ensemble at the freeze time.
    Snapshot,
    /// Every residual equal to the given value.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Freeze {
    pub at: f64,
    pub profile: FrozenProfile,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub record_every: usize,
    pub freeze: Option<Freeze>,
    pub activation: ActivationSpec,
    /// Relative gradient error injected into every field (0 in real runs).
    pub perturb: f64,
    /// Particles with Minkowski norm below `−cone_tol` count as violations.
    pub cone_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            horizon: 1.0,
            integrator: Integrator::Rk4,
            batch_size: 1024,
            batch_mode: BatchMode::Fresh,
            record_every: 10,
            freeze: None,
            activation: ActivationSpec::RELU,
            perturb: 0.0,
            cone_tol: 1e-9,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.dt < self.horizon) || !self.horizon.is_finite() {
            return bad(format!("need dt < T, got dt = {} and T = {}", self.dt, self.horizon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let BatchMode::FixedPool(0) = self.batch_mode {
            return bad("fixed pool size must be >= 1".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be >= 1".into());
        }
        if let Some(f) = self.freeze {
            if !(f.at >= 0.0) {
                return bad(format!("freeze time must be >= 0, got {}", f.at));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Anything that yields `V(θ)` (into `out`) and `g(θ)` (returned).
pub trait VelocityField: Sync {
    fn eval(&self, theta: &[f64], out: &mut [f64]) -> f64;
}

impl VelocityField for PotentialField<'_> {
    fn eval(&self, theta: &[f64], out: &mut [f64]) -> f64 {
        self.potential_and_grad(theta, out)
    }
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> VelocityField for F {
    fn eval(&self, theta: &[f64], out: &mut [f64]) -> f64 {
        self(theta, out)
    }
}

fn velocities<F: VelocityField>(field: &F, state: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; state.len()];
    out.par_chunks_mut(width).zip(state.par_chunks(width)).for_each(|(o, t)| {
        field.eval(t, o);
        o.iter_mut().for_each(|v| *v = -*v);
    });
    out
}

fn axpy(y: &[f64], c: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + c * b).collect()
}

fn rebuild(template: &Ensemble, state: &[f64]) -> Ensemble {
    let width = template.dim() + 2;
    let particles = template.particles().iter().zip(state.chunks(width)).map(|(p, t)| p.moved_to(t.to_vec())).collect();
    template.with_particles(particles)
}

/// One integrator step. `field_at` builds the field from a stage ensemble;
/// RK4 calls it four times, so all stages must share one batch.
pub fn step<F: VelocityField>(e: &Ensemble, dt: f64, integrator: Integrator, mut field_at: impl FnMut(&Ensemble) -> F) -> Ensemble {
    let width = e.dim() + 2;
    let y: Vec<f64> = e.particles().iter().flat_map(|p| p.theta().iter().copied()).collect();
    let next = match integrator {
        Integrator::Euler => axpy(&y, dt, &velocities(&field_at(e), &y, width)),
        Integrator::Rk4 => {
            let k1 = velocities(&field_at(e), &y, width);
            let y2 = axpy(&y, 0.5 * dt, &k1);
            let k2 = velocities(&field_at(&rebuild(e, &y2)), &y2, width);
            let y3 = axpy(&y, 0.5 * dt, &k2);
            let k3 = velocities(&field_at(&rebuild(e, &y3)), &y3, width);
            let y4 = axpy(&y, dt, &k3);
            let k4 = velocities(&field_at(&rebuild(e, &y4)), &y4, width);
            (0..y.len()).map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
        }
    };
    rebuild(e, &next)
}

/// `D = (1/m) Σ |V(θ_i)|²`, the instantaneous rate `−dR/dt`.
pub fn dissipation<F: VelocityField>(e: &Ensemble, field: &F) -> f64 {
    let sq: Vec<f64> = e
        .particles()
        .par_iter()
        .map(|p| {
            let mut v = vec![0.0; p.theta().len()];
            field.eval(p.theta(), &mut v);
            norm_sq(&v)
        })
        .collect();
    mean(&sq)
}

/// `(1/m) Σ g(θ_i)`.
pub fn mean_potential<F: VelocityField>(e: &Ensemble, field: &F) -> f64 {
    let g: Vec<f64> = e
        .particles()
        .par_iter()
        .map(|p| {
            let mut v = vec![0.0; p.theta().len()];
            field.eval(p.theta(), &mut v)
        })
        .collect();
    mean(&g)
}

pub const TRAJECTORY_HEADER: &str = "t,risk,N,sup_g,sup_V,mink_drift,cone_violations,dissipation,barron";

/// Diagnostic series sampled every `record_every` steps and at the end.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub risk: Vec<f64>,
    pub risk_stderr: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub sup_g: Vec<f64>,
    pub sup_v: Vec<f64>,
    pub mink_drift: Vec<f64>,
    pub cone_violations: Vec<usize>,
    pub dissipation: Vec<f64>,
    pub barron: Vec<f64>,
    /// `(1/m) Σ g(θ_i)`; `dN/dt = −4` times this.
    pub mean_potential: Vec<f64>,
    /// Time from which the field was frozen.
    pub frozen_from: Option<f64>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_HEADER.split(','))?;
        for i in 0..self.len() {
            let f = |v: f64| format!("{v:.16e}");
            w.write_record([
                f(self.times[i]),
                f(self.risk[i]),
                f(self.second_moment[i]),
                f(self.sup_g[i]),
                f(self.sup_v[i]),
                f(self.mink_drift[i]),
                self.cone_violations[i].to_string(),
                f(self.dissipation[i]),
                f(self.barron[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn push(&mut self, t: f64, e: &Ensemble, field: &PotentialField, lm: &LossModel, grid: &[Vec<f64>], cone_tol: f64) {
        let risk = field.risk().unwrap_or_else(|| risk_estimate(e, &field.activation(), lm, field.batch()));
        let sup = probe_sup(field, grid);
        self.times.push(t);
        self.risk.push(risk.mean);
        self.risk_stderr.push(risk.stderr);
        self.second_moment.push(e.second_moment());
        self.sup_g.push(sup.sup_g);
        self.sup_v.push(sup.sup_v);
        self.mink_drift.push(e.max_minkowski_drift());
        self.cone_violations.push(e.cone_violations(cone_tol));
        self.dissipation.push(dissipation(e, field));
        self.barron.push(e.barron_estimate());
        self.mean_potential.push(mean_potential(e, field));
    }
}

fn check_finite(e: &Ensemble, last: &Ensemble, step: usize, time: f64) -> Result<()> {
    if let Some(i) = e.particles().iter().position(|p| !p.is_finite()) {
        return Err(Error::Aborted { step, time, reason: format!("particle {i} became non-finite"), dump: Box::new(last.clone()) });
    }
    Ok(())
}

/// Integrates from `e0` over `[0, T]`. Deterministic given the ensemble and
/// data seeds; runs sharing a data seed see the same batches.
pub fn run(e0: &Ensemble, cfg: &FlowConfig, model: &DataModel, lm: &LossModel, grid: &[Vec<f64>]) -> Result<(TrajectoryRecord, Ensemble)> {
    run_observed(e0, cfg, model, lm, grid, |_, _, _| {})
}

/// An unclipped power loss needs inputs and labels with bounded support.
pub fn check_compatibility(model: &DataModel, lm: &LossModel) -> Result<()> {
    if let (LossKind::Power(p), None) = (lm.kind, lm.clip) {
        if model.input.support_radius().is_none() || !model.labels.is_bounded() {
            return Err(Error::InvalidParameter(format!(
                "power({p}) loss without clip requires data with compact support; set a clip or use bounded inputs and labels"
            )));
        }
    }
    Ok(())
}

/// [`run`], calling `observe(step, t, ensemble)` before every step and once
/// at the end.
pub fn run_observed(
    e0: &Ensemble,
    cfg: &FlowConfig,
    model: &DataModel,
    lm: &LossModel,
    grid: &[Vec<f64>],
    mut observe: impl FnMut(usize, f64, &Ensemble),
) -> Result<(TrajectoryRecord, Ensemble)> {
    cfg.validate()?;
    check_compatibility(model, lm)?;
    if e0.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: e0.dim() });
    }
    if grid.is_empty() {
        return Err(Error::Empty("probe grid"));
    }
    let steps = cfg.steps();
    let pool = match cfg.batch_mode {
        BatchMode::FixedPool(size) => Some(model.sample(size, STREAM_POOL)?),
        BatchMode::Fresh => None,
    };
    let batch_for = |s: usize| -> Result<Batch> {
        match &pool {
            Some(p) => Ok(p.clone()),
            None => model.sample(cfg.batch_size, s as u64),
        }
    };
    let freeze_step = cfg.freeze.map(|f| ((f.at / cfg.dt) - 1e-9).ceil().max(0.0) as usize);
    let live = |e: &Ensemble, batch: &Batch| -> Vec<f64> { PotentialField::new(e, batch, lm, cfg.activation).residuals().to_vec() };

    let mut record = TrajectoryRecord { frozen_from: freeze_step.map(|s| s as f64 * cfg.dt), ..Default::default() };
    let mut frozen: Option<(Batch, Vec<f64>)> = None;
    let mut e = e0.clone();
    for s in 0..=steps {
        let t = s as f64 * cfg.dt;
        if frozen.is_none() && freeze_step.is_some_and(|fs| s >= fs) {
            let batch = batch_for(s)?;
            let residuals = match cfg.freeze.expect("freeze set").profile {
                FrozenProfile::Snapshot => live(&e, &batch),
                FrozenProfile::Constant(c) => vec![c; batch.len()],
            };
            frozen = Some((batch, residuals));
        }
        let fresh;
        let batch = match &frozen {
            Some((b, _)) => b,
            None => {
                fresh = batch_for(s)?;
                &fresh
            }
        };
        let build = |stage: &Ensemble| -> PotentialField {
            let f = match &frozen {
                Some((b, r)) => PotentialField::from_residuals(b, r.clone(), cfg.activation).expect("frozen residuals match batch"),
                None => PotentialField::new(stage, batch, lm, cfg.activation),
            };
            f.with_gradient_perturbation(cfg.perturb)
        };
        observe(s, t, &e);
        if s % cfg.record_every == 0 || s == steps {
            let field = build(&e);
            record.push(t, &e, &field, lm, grid, cfg.cone_tol);
        }
        if s == steps {
            break;
        }
        let next = step(&e, cfg.dt, cfg.integrator, build);
        check_finite(&next, &e, s + 1, t + cfg.dt)?;
        e = next;
    }
    Ok((record, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassProbability, InputLaw, LabelModel, NoiseLaw, Target};
    use crate::field::probe_grid;
    use crate::params::Particle;

    fn model(p: f64) -> DataModel {
        DataModel::new(InputLaw::UniformSphere { radius: 1.0 }, LabelModel::Binary(ClassProbability::Constant(p)), 2, 11).unwrap()
    }

    fn softplus() -> LossModel {
        LossModel::new(LossKind::Softplus).unwrap()
    }

    #[test]
    fn zero_field_leaves_ensemble_unchanged() {
        let e = Ensemble::init_omni(32, 2, 1).unwrap();
        let batch = model(0.5).sample(100, 0).unwrap();
        for integrator in [Integrator::Euler, Integrator::Rk4] {
            let next = step(&e, 0.1, integrator, |_: &Ensemble| {
                PotentialField::from_residuals(&batch, vec![0.0; 100], ActivationSpec::RELU).unwrap()
            });
            assert_eq!(next, e);
        }
    }

    #[test]
    fn rk4_matches_linear_oracle() {
        // g = a w₁: ȧ = −w₁, ẇ₁ = −a.
        let field = |t: &[f64], v: &mut [f64]| {
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = t[1];
            v[1] = t[0];
            t[0] * t[1]
        };
        let (a0, w0) = (0.3, 0.8);
        let mut e = Ensemble::new(vec![Particle::new(a0, &[w0, 0.1], -0.2)], 0).unwrap();
        for _ in 0..1000 {
            e = step(&e, 1e-3, Integrator::Rk4, |_: &Ensemble| field);
        }
        let p = &e.particles()[0];
        let one = 1f64;
        let sum = (a0 + w0) * (-one).exp();
        let diff = (a0 - w0) * one.exp();
        assert!((p.a() - 0.5 * (sum + diff)).abs() < 1e-10);
        assert!((p.w()[0] - 0.5 * (sum - diff)).abs() < 1e-10);
        assert_eq!(p.w()[1], 0.1);
    }

    #[test]
    fn m0_is_untouched_by_steps() {
        let e = Ensemble::init_omni(16, 2, 2).unwrap();
        let batch = model(0.8).sample(200, 0).unwrap();
        let next = step(&e, 0.05, Integrator::Rk4, |s: &Ensemble| PotentialField::new(s, &batch, &softplus(), ActivationSpec::RELU));
        assert_ne!(next, e);
        for (p, q) in e.particles().iter().zip(next.particles()) {
            assert_eq!(p.m0, q.m0);
        }
    }

    #[test]
    fn dissipation_examples() {
        let e = Ensemble::init_omni(32, 2, 3).unwrap();
        let batch = model(0.8).sample(500, 0).unwrap();
        let zero = PotentialField::from_residuals(&batch, vec![0.0; 500], ActivationSpec::RELU).unwrap();
        assert_eq!(dissipation(&e, &zero), 0.0);
        let field = PotentialField::new(&e, &batch, &softplus(), ActivationSpec::RELU);
        let d = dissipation(&e, &field);
        assert!((dissipation(&e, &field.scaled(3.0)) - 9.0 * d).abs() < 1e-12 * d.max(1.0));
    }

    #[test]
    fn dissipation_matches_risk_decrease() {
        let e = Ensemble::init_omni(64, 2, 4).unwrap().map(|p| p.scaled(2.0));
        let batch = model(0.9).sample(2000, 0).unwrap();
        let build = |s: &Ensemble| PotentialField::new(s, &batch, &softplus(), ActivationSpec::RELU);
        let field = build(&e);
        let d = dissipation(&e, &field);
        let dt = 1e-4;
        let next = step(&e, dt, Integrator::Rk4, build);
        let rate = (field.risk().unwrap().mean - build(&next).risk().unwrap().mean) / dt;
        assert!((rate - d).abs() < 0.1 * d, "{rate} vs {d}");
    }

    #[test]
    fn run_records_consistent_series() {
        let cfg = FlowConfig { dt: 0.05, horizon: 1.0, batch_size: 256, record_every: 4, ..Default::default() };
        let e = Ensemble::init_omni(32, 2, 5).unwrap();
        let grid = probe_grid(2, 64, 1);
        let (rec, last) = run(&e, &cfg, &model(0.8), &softplus(), &grid).unwrap();
        assert_eq!(rec.len(), 6);
        assert!(rec.times.windows(2).all(|w| w[1] > w[0]));
        assert!((rec.times[5] - 1.0).abs() < 1e-12);
        assert_eq!(rec.second_moment[5], last.second_moment());
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(TRAJECTORY_HEADER));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = FlowConfig { dt: 0.1, horizon: 1.0, batch_size: 128, record_every: 2, ..Default::default() };
        let e = Ensemble::init_omni(24, 2, 6).unwrap();
        let grid = probe_grid(2, 32, 2);
        let a = run(&e, &cfg, &model(0.7), &softplus(), &grid).unwrap();
        let b = run(&e, &cfg, &model(0.7), &softplus(), &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unclipped_power_loss_needs_bounded_data() {
        let lm = LossModel::new(LossKind::Power(2.0)).unwrap();
        let gauss =
            DataModel::new(InputLaw::standard_gaussian(2), LabelModel::Regression { target: Target::Zero, noise: NoiseLaw::None }, 2, 1)
                .unwrap();
        assert!(check_compatibility(&gauss, &lm).is_err());
        assert!(check_compatibility(&gauss, &lm.with_clip(5.0).unwrap()).is_ok());
        let sphere = DataModel { input: InputLaw::UniformSphere { radius: 1.0 }, ..gauss.clone() };
        assert!(check_compatibility(&sphere, &lm).is_ok());
        let noisy = DataModel { labels: LabelModel::Regression { target: Target::Zero, noise: NoiseLaw::Gaussian(0.1) }, ..sphere };
        assert!(check_compatibility(&noisy, &lm).is_err());
    }

    #[test]
    fn fixed_pool_and_freeze_run() {
        let cfg = FlowConfig {
            dt: 0.1,
            horizon: 2.0,
            batch_mode: BatchMode::FixedPool(200),
            record_every: 5,
            freeze: Some(Freeze { at: 1.0, profile: FrozenProfile::Snapshot }),
            ..Default::default()
        };
        let e = Ensemble::init_omni(16, 2, 7).unwrap();
        let (rec, _) = run(&e, &cfg, &model(0.9), &softplus(), &probe_grid(2, 16, 3)).unwrap();
        assert_eq!(rec.frozen_from, Some(1.0));
        assert_eq!(rec.len(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig { dt: 2.0, horizon: 1.0, ..Default::default() }.validate().is_err());
        assert!(FlowConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(FlowConfig { record_every: 0, ..Default::default() }.validate().is_err());
        assert!(FlowConfig::default().validate().is_ok());
    }

    #[test]
    fn non_finite_state_aborts_with_dump() {
        let e = Ensemble::init_omni(8, 2, 8).unwrap();
        let blowup = |_: &[f64], v: &mut [f64]| {
            v.iter_mut().for_each(|x| *x = f64::NAN);
            0.0
        };
        let next = step(&e, 0.1, Integrator::Euler, |_: &Ensemble| blowup);
        match check_finite(&next, &e, 1, 0.1) {
            Err(Error::Aborted { step: 1, dump, .. }) => assert_eq!(*dump, e),
            other => panic!("{other:?}"),
        }
    }
}
