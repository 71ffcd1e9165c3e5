//! Realization, risk and the velocity potential `g = δR(π; ·)` with its
//! gradient `V = ∇g`, the right-hand side of the particle dynamics.

use std::io::Read;

use rayon::prelude::*;

use crate::data::Batch;
use crate::loss::LossModel;
use crate::params::{minkowski_of, Ensemble};
use crate::rng::{stream_rng, unit_vector};
use crate::stats::{dot, mean, norm_sq, pairwise_sum, Estimate};
use crate::{Error, Result};

/// `σ(z) = max(z, αz)`, optionally wrapped in the cone cutoff
/// `η((a² − |w|² − b²) / |θ|²)` that switches the neuron off outside the
/// closed cone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationSpec {
    pub leak: f64,
    pub cutoff: bool,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::RELU
    }
}

impl ActivationSpec {
    pub const RELU: Self = Self { leak: 0.0, cutoff: false };

    pub fn new(leak: f64, cutoff: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&leak) {
            return Err(Error::InvalidParameter(format!("leak must lie in [0, 1), got {leak}")));
        }
        Ok(Self { leak, cutoff })
    }

    #[inline]
    pub fn sigma(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.leak * z
        }
    }

    /// Left derivative at the kink, so `σ'(0) = α` (zero for ReLU).
    #[inline]
    pub fn dsigma(&self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.leak
        }
    }
}

/// Quintic smoothstep on `[0, 1]`.
fn smoothstep(u: f64) -> f64 {
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

/// Cutoff: 1 on `z ≤ 0`, 0 on `z ≥ ½`, C² and non-increasing.
pub fn eta(z: f64) -> f64 {
    if z <= 0.0 {
        1.0
    } else if z >= 0.5 {
        0.0
    } else {
        1.0 - smoothstep(2.0 * z)
    }
}

pub fn eta_prime(z: f64) -> f64 {
    if z <= 0.0 || z >= 0.5 {
        0.0
    } else {
        let u = 2.0 * z;
        -60.0 * u * u * (1.0 - u) * (1.0 - u)
    }
}

/// `q = (a² − |w|² − b²) / |θ|²` and `∇q`, or `None` at the origin.
fn cutoff_argument(theta: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = norm_sq(theta);
    if n == 0.0 {
        return None;
    }
    let q = -minkowski_of(theta) / n;
    let mut grad: Vec<f64> = theta.iter().map(|u| -2.0 * u * (1.0 + q) / n).collect();
    grad[0] = 2.0 * theta[0] * (1.0 - q) / n;
    Some((q, grad))
}

/// Pre-activation `wᵀx + b` for packed `θ = (a, w, b)`.
#[inline]
pub fn preactivation(theta: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    dot(&theta[1..=d], x) + theta[d + 1]
}

/// `φ(θ; x) = a σ(wᵀx + b)`, times the cutoff if enabled.
pub fn activation(spec: &ActivationSpec, theta: &[f64], x: &[f64]) -> f64 {
    let plain = theta[0] * spec.sigma(preactivation(theta, x));
    if spec.cutoff {
        cutoff_argument(theta).map_or(0.0, |(q, _)| eta(q) * plain)
    } else {
        plain
    }
}

/// `∇_θ φ(θ; x)`.
pub fn grad_activation(spec: &ActivationSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let a = theta[0];
    let z = preactivation(theta, x);
    let (s, ds) = (spec.sigma(z), spec.dsigma(z));
    let mut g = Vec::with_capacity(d + 2);
    g.push(s);
    g.extend(x.iter().map(|xk| a * ds * xk));
    g.push(a * ds);
    if spec.cutoff {
        apply_cutoff(theta, a * s, &mut g);
    }
    g
}

/// Turns `(S, a W, a B)` into the gradient of `η(q) · value`.
fn apply_cutoff(theta: &[f64], value: f64, grad: &mut [f64]) {
    match cutoff_argument(theta) {
        None => grad.iter_mut().for_each(|g| *g = 0.0),
        Some((q, dq)) => {
            let (e, de) = (eta(q), eta_prime(q));
            for (g, dqk) in grad.iter_mut().zip(&dq) {
                *g = e * *g + de * value * dqk;
            }
        }
    }
}

/// `f_π(x) = (1/m) Σ φ(θ_i; x)`.
pub fn realize(e: &Ensemble, spec: &ActivationSpec, x: &[f64]) -> f64 {
    let values: Vec<f64> = e.particles().iter().map(|p| activation(spec, p.theta(), x)).collect();
    mean(&values)
}

fn predictions(e: &Ensemble, spec: &ActivationSpec, batch: &Batch) -> Vec<f64> {
    let d = batch.dim;
    let thetas: Vec<f64> = e.particles().iter().flat_map(|p| p.theta().iter().copied()).collect();
    let etas: Option<Vec<f64>> =
        spec.cutoff.then(|| thetas.chunks_exact(d + 2).map(|t| cutoff_argument(t).map_or(0.0, |(q, _)| eta(q))).collect());
    (0..batch.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(e.len()),
            |buf: &mut Vec<f64>, j| {
                let x = batch.x(j);
                buf.clear();
                match d {
                    1 => fill_activations::<1>(&thetas, x, spec.leak, buf),
                    2 => fill_activations::<2>(&thetas, x, spec.leak, buf),
                    3 => fill_activations::<3>(&thetas, x, spec.leak, buf),
                    4 => fill_activations::<4>(&thetas, x, spec.leak, buf),
                    _ => buf.extend(thetas.chunks_exact(d + 2).map(|t| {
                        let z = dot(&t[1..=d], x) + t[d + 1];
                        t[0] * z * if z > 0.0 { 1.0 } else { spec.leak }
                    })),
                }
                if let Some(etas) = &etas {
                    buf.iter_mut().zip(etas).for_each(|(v, eta)| *v *= eta);
                }
                pairwise_sum(buf) / buf.len() as f64
            },
        )
        .collect()
}

/// Plain `a σ(wᵀx + b)` for every packed particle, with `d` fixed at compile time.
fn fill_activations<const D: usize>(thetas: &[f64], x: &[f64], leak: f64, buf: &mut Vec<f64>) {
    let x: [f64; D] = x.try_into().expect("input dimension");
    buf.extend(thetas.chunks_exact(D + 2).map(|t| {
        let mut z = t[D + 1];
        for k in 0..D {
            z += t[1 + k] * x[k];
        }
        t[0] * z * if z > 0.0 { 1.0 } else { leak }
    }));
}

/// Adds `Σ r σ(z)`, `Σ r σ'(z) x` and `Σ r σ'(z)` over one block into `acc`.
fn block_sums<const D: usize>(xs: &[f64], rs: &[f64], w: &[f64], b: f64, leak: f64, acc: &mut [f64]) {
    let w: [f64; D] = w.try_into().expect("weight dimension");
    let (mut s0, mut sb) = (0.0, 0.0);
    let mut sw = [0.0; D];
    for (x, &r) in xs.chunks_exact(D).zip(rs) {
        let mut z = b;
        for k in 0..D {
            z += w[k] * x[k];
        }
        let c = r * if z > 0.0 { 1.0 } else { leak };
        s0 += c * z;
        for k in 0..D {
            sw[k] += c * x[k];
        }
        sb += c;
    }
    acc[0] += s0;
    for k in 0..D {
        acc[1 + k] += sw[k];
    }
    acc[D + 1] += sb;
}

fn block_sums_dyn(xs: &[f64], rs: &[f64], w: &[f64], b: f64, leak: f64, acc: &mut [f64]) {
    let d = w.len();
    for (x, &r) in xs.chunks_exact(d).zip(rs) {
        let z = dot(w, x) + b;
        let c = r * if z > 0.0 { 1.0 } else { leak };
        acc[0] += c * z;
        for k in 0..d {
            acc[1 + k] += c * x[k];
        }
        acc[d + 1] += c;
    }
}

/// Batch estimate of `R(π) = E ℓ(f_π(x), y)` (clipped loss if a clip is set).
pub fn risk(e: &Ensemble, spec: &ActivationSpec, lm: &LossModel, batch: &Batch) -> f64 {
    risk_estimate(e, spec, lm, batch).mean
}

pub fn risk_estimate(e: &Ensemble, spec: &ActivationSpec, lm: &LossModel, batch: &Batch) -> Estimate {
    let f = predictions(e, spec, batch);
    let losses: Vec<f64> = f.iter().zip(&batch.ys).map(|(fx, y)| lm.clip_eval(*fx, *y)).collect();
    Estimate::from_samples(&losses)
}

/// Samples per block of the blocked pairwise reduction.
const BLOCK: usize = 128;

/// Snapshot of `δR(π; ·)` on one batch: the residuals `r_j = ∂₁ℓ(f_π(x_j), y_j)`
/// are computed once and shared by every particle.
#[derive(Clone, Debug)]
pub struct PotentialField<'a> {
    batch: &'a Batch,
    activation: ActivationSpec,
    residuals: Vec<f64>,
    risk: Option<Estimate>,
    grad_scale: f64,
}

impl<'a> PotentialField<'a> {
    pub fn new(e: &Ensemble, batch: &'a Batch, lm: &LossModel, activation: ActivationSpec) -> Self {
        let f = predictions(e, &activation, batch);
        let residuals = f.iter().zip(&batch.ys).map(|(fx, y)| lm.clip_d1(*fx, *y)).collect();
        let losses: Vec<f64> = f.iter().zip(&batch.ys).map(|(fx, y)| lm.clip_eval(*fx, *y)).collect();
        Self { batch, activation, residuals, risk: Some(Estimate::from_samples(&losses)), grad_scale: 1.0 }
    }

    /// Field with hand-built residuals; no risk attached.
    pub fn from_residuals(batch: &'a Batch, residuals: Vec<f64>, activation: ActivationSpec) -> Result<Self> {
        if residuals.len() != batch.len() {
            return Err(Error::DimensionMismatch { expected: batch.len(), got: residuals.len() });
        }
        Ok(Self { batch, activation, residuals, risk: None, grad_scale: 1.0 })
    }

    /// Scales the gradient (not the potential) by `1 + eps`. Exists to check
    /// that the invariant suite notices a wrong gradient.
    pub fn with_gradient_perturbation(mut self, eps: f64) -> Self {
        self.grad_scale = 1.0 + eps;
        self
    }

    pub fn batch(&self) -> &'a Batch {
        self.batch
    }

    pub fn activation(&self) -> ActivationSpec {
        self.activation
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn sup_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Batch risk of the ensemble the field was built from.
    pub fn risk(&self) -> Option<Estimate> {
        self.risk
    }

    /// Same batch with residuals multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.residuals.iter_mut().for_each(|r| *r *= c);
        out.risk = None;
        out
    }

    /// `g(θ)`, written into the return value, and `V(θ)` into `grad`.
    pub fn potential_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.batch.dim;
        assert_eq!(theta.len(), d + 2, "particle dimension");
        let n = self.batch.len();
        let width = d + 2;
        let blocks = n.div_ceil(BLOCK);
        // Per block: Σ r s, Σ r σ' x, Σ r σ'.
        let mut partial = vec![0.0; blocks * width];
        let w = &theta[1..=d];
        let b = theta[d + 1];
        let leak = self.activation.leak;
        for (k, acc) in partial.chunks_mut(width).enumerate() {
            let lo = k * BLOCK;
            let hi = (lo + BLOCK).min(n);
            let xs = &self.batch.xs[lo * d..hi * d];
            let rs = &self.residuals[lo..hi];
            match d {
                1 => block_sums::<1>(xs, rs, w, b, leak, acc),
                2 => block_sums::<2>(xs, rs, w, b, leak, acc),
                3 => block_sums::<3>(xs, rs, w, b, leak, acc),
                4 => block_sums::<4>(xs, rs, w, b, leak, acc),
                _ => block_sums_dyn(xs, rs, w, b, leak, acc),
            }
        }
        let mut column = vec![0.0; blocks];
        let mut sums = vec![0.0; width];
        for (c, s) in sums.iter_mut().enumerate() {
            column.iter_mut().enumerate().for_each(|(k, v)| *v = partial[k * width + c]);
            *s = pairwise_sum(&column) / n as f64;
        }
        let a = theta[0];
        let value = a * sums[0];
        grad[0] = sums[0];
        for c in 1..width {
            grad[c] = a * sums[c];
        }
        let g = if self.activation.cutoff {
            apply_cutoff(theta, value, grad);
            cutoff_argument(theta).map_or(0.0, |(q, _)| eta(q) * value)
        } else {
            value
        };
        if self.grad_scale != 1.0 {
            grad.iter_mut().for_each(|v| *v *= self.grad_scale);
        }
        g
    }

    pub fn potential(&self, theta: &[f64]) -> f64 {
        let mut scratch = vec![0.0; theta.len()];
        self.potential_and_grad(theta, &mut scratch)
    }

    pub fn potential_grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; theta.len()];
        self.potential_and_grad(theta, &mut grad);
        grad
    }

    /// `min_j |wᵀx_j + b| / |(w, b)|`: distance in angle to the nearest sample kink.
    pub fn kink_distance(&self, theta: &[f64]) -> f64 {
        let scale = norm_sq(&theta[1..]).sqrt();
        (0..self.batch.len()).map(|j| preactivation(theta, self.batch.x(j)).abs()).fold(f64::INFINITY, f64::min) / scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSup {
    pub sup_g: f64,
    pub sup_v: f64,
}

/// `sup |g|` and `sup |V|` over a probe grid.
pub fn probe_sup(field: &PotentialField, grid: &[Vec<f64>]) -> ProbeSup {
    grid.par_iter()
        .map(|u| {
            let mut v = vec![0.0; u.len()];
            let g = field.potential_and_grad(u, &mut v);
            ProbeSup { sup_g: g.abs(), sup_v: norm_sq(&v).sqrt() }
        })
        .reduce(|| ProbeSup { sup_g: 0.0, sup_v: 0.0 }, |p, q| ProbeSup { sup_g: p.sup_g.max(q.sup_g), sup_v: p.sup_v.max(q.sup_v) })
}

/// `size` i.i.d. uniform unit vectors of `S^{d+1}` inside the closed cone.
pub fn probe_grid(d: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    let mut grid = Vec::with_capacity(size);
    while grid.len() < size {
        let u = unit_vector(&mut rng, d + 2);
        if minkowski_of(&u) >= 0.0 {
            grid.push(u);
        }
    }
    grid
}

/// Reads probe directions, one headerless row of `d + 2` numbers each. Rows
/// must be unit vectors in the closed cone.
pub fn read_grid_csv<R: Read>(input: R, d: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut grid = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse { record: i + 1, message: format!("{s:?}: {e}") }))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != d + 2 {
            return Err(Error::Parse { record: i + 1, message: format!("expected {} columns, got {}", d + 2, row.len()) });
        }
        if (norm_sq(&row) - 1.0).abs() > 1e-9 {
            return Err(Error::Parse { record: i + 1, message: "not a unit vector".into() });
        }
        if minkowski_of(&row) < -1e-12 {
            return Err(Error::Parse { record: i + 1, message: "outside the closed cone".into() });
        }
        grid.push(row);
    }
    if grid.is_empty() {
        return Err(Error::Empty("probe grid"));
    }
    Ok(grid)
}

/// Largest `|V(θ) − V(θ')| / |θ − θ'|` over `pairs` random unit pairs in the
/// closed cone.
pub fn lipschitz_estimate(field: &PotentialField, pairs: usize, seed: u64) -> f64 {
    let d = field.batch().dim;
    let points = probe_grid(d, 2 * pairs, seed);
    points
        .par_chunks(2)
        .map(|pair| {
            let (p, q) = (&pair[0], &pair[1]);
            let vp = field.potential_grad(p);
            let vq = field.potential_grad(q);
            let dv: Vec<f64> = vp.iter().zip(&vq).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
            (norm_sq(&dv) / norm_sq(&dx)).sqrt()
        })
        .reduce(|| 0.0, f64::max)
}
