//! Data laws `P = P̄ ⊗ P^x`: an input law for `x` and a conditional label
//! model for `y`, plus the Monte-Carlo probe of half-space regularity.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::field::{realize, ActivationSpec};
use crate::params::Ensemble;
use crate::rng::{stream_rng, unit_vector, Rng};
use crate::stats::{dot, norm_sq, Estimate};
use crate::{Error, Result};

/// Stream indices reserved for auxiliary sampling. Flow batches use the step
/// index, which never reaches these values.
pub const STREAM_ADMISSIBLE: u64 = u64::MAX - 16;
pub const STREAM_FIRST_MOMENT: u64 = u64::MAX - 17;
pub const STREAM_MBR: u64 = u64::MAX - 18;
pub const STREAM_POOL: u64 = u64::MAX - 19;
pub const STREAM_EVAL: u64 = u64::MAX - 20;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub scale: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InputLaw {
    GaussianMixture(Vec<MixtureComponent>),
    UniformSphere {
        radius: f64,
    },
    UniformBall {
        radius: f64,
    },
    /// Uniform over a finite list of points.
    Empirical(Vec<Vec<f64>>),
}

impl InputLaw {
    pub fn standard_gaussian(d: usize) -> Self {
        InputLaw::GaussianMixture(vec![MixtureComponent { mean: vec![0.0; d], scale: 1.0, weight: 1.0 }])
    }

    /// `Some(R)` if the support lies in the closed ball of radius `R`.
    pub fn support_radius(&self) -> Option<f64> {
        match self {
            InputLaw::GaussianMixture(_) => None,
            InputLaw::UniformSphere { radius } | InputLaw::UniformBall { radius } => Some(*radius),
            InputLaw::Empirical(points) => Some(points.iter().map(|p| norm_sq(p).sqrt()).fold(0.0, f64::max)),
        }
    }

    fn sample(&self, rng: &mut Rng, d: usize, out: &mut Vec<f64>) {
        match self {
            InputLaw::GaussianMixture(comps) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = &comps[comps.len() - 1];
                for c in comps {
                    acc += c.weight;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(pick.mean[k] + pick.scale * z);
                }
            }
            InputLaw::UniformSphere { radius } => {
                out.extend(unit_vector(rng, d).into_iter().map(|x| x * radius));
            }
            InputLaw::UniformBall { radius } => {
                let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
                out.extend(unit_vector(rng, d).into_iter().map(|x| x * r));
            }
            InputLaw::Empirical(points) => {
                let k = rng.gen_range(0..points.len());
                out.extend_from_slice(&points[k]);
            }
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `λ(x) = P(y = +1 | x)` for binary labels.
#[derive(Clone)]
pub enum ClassProbability {
    Constant(f64),
    /// `positive` where `⟨normal, x⟩ + offset > 0`, `negative` elsewhere.
    HalfSpace {
        normal: Vec<f64>,
        offset: f64,
        positive: f64,
        negative: f64,
    },
    /// `1 / (1 + exp(−⟨w, x⟩ − b))`.
    Logistic {
        w: Vec<f64>,
        b: f64,
    },
    Custom(ScalarFn),
}

impl ClassProbability {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ClassProbability::Constant(p) => *p,
            ClassProbability::HalfSpace { normal, offset, positive, negative } => {
                if dot(normal, x) + offset > 0.0 {
                    *positive
                } else {
                    *negative
                }
            }
            ClassProbability::Logistic { w, b } => 1.0 / (1.0 + (-(dot(w, x) + b)).exp()),
            ClassProbability::Custom(f) => f(x),
        }
    }

    /// Finitely many values, so Bayes-optimal predictions can be cached per value.
    pub fn is_piecewise_constant(&self) -> bool {
        matches!(self, ClassProbability::Constant(_) | ClassProbability::HalfSpace { .. })
    }
}

impl fmt::Debug for ClassProbability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassProbability::Constant(p) => write!(f, "Constant({p})"),
            ClassProbability::HalfSpace { normal, offset, positive, negative } => {
                write!(f, "HalfSpace({normal:?}, {offset}, {positive}, {negative})")
            }
            ClassProbability::Logistic { w, b } => write!(f, "Logistic({w:?}, {b})"),
            ClassProbability::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Clone)]
pub enum Target {
    Zero,
    Linear {
        w: Vec<f64>,
        b: f64,
    },
    /// Realization of a fixed teacher network.
    Teacher {
        ensemble: Ensemble,
        activation: ActivationSpec,
    },
    Custom(ScalarFn),
}

impl Target {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Target::Zero => 0.0,
            Target::Linear { w, b } => dot(w, x) + b,
            Target::Teacher { ensemble, activation } => realize(ensemble, activation, x),
            Target::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Zero => write!(f, "Zero"),
            Target::Linear { w, b } => write!(f, "Linear({w:?}, {b})"),
            Target::Teacher { ensemble, .. } => write!(f, "Teacher(m={})", ensemble.len()),
            Target::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Symmetric additive label noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseLaw {
    None,
    Gaussian(f64),
    Laplace(f64),
    /// Uniform on `[−s, s]`.
    Uniform(f64),
    /// `±s` with probability ½ each.
    TwoPoint(f64),
}

impl NoiseLaw {
    pub fn scale(&self) -> f64 {
        match *self {
            NoiseLaw::None => 0.0,
            NoiseLaw::Gaussian(s) | NoiseLaw::Laplace(s) | NoiseLaw::Uniform(s) | NoiseLaw::TwoPoint(s) => s,
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, NoiseLaw::None | NoiseLaw::Uniform(_) | NoiseLaw::TwoPoint(_))
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            NoiseLaw::None => 0.0,
            NoiseLaw::Gaussian(s) => {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            }
            NoiseLaw::Laplace(s) => {
                let u: f64 = rng.gen::<f64>() - 0.5;
                -s * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            NoiseLaw::Uniform(s) => rng.gen_range(-s..=s),
            NoiseLaw::TwoPoint(s) => {
                if rng.gen::<bool>() {
                    s
                } else {
                    -s
                }
            }
        }
    }

    /// Quadrature nodes and weights for `E[h(noise)]`.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        const N: usize = 4001;
        let simpson = |lo: f64, hi: f64, density: &dyn Fn(f64) -> f64| -> Vec<(f64, f64)> {
            let h = (hi - lo) / (N - 1) as f64;
            (0..N)
                .map(|i| {
                    let z = lo + i as f64 * h;
                    let c = if i == 0 || i == N - 1 {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    (z, c * h / 3.0 * density(z))
                })
                .collect()
        };
        match *self {
            NoiseLaw::None => vec![(0.0, 1.0)],
            NoiseLaw::TwoPoint(s) => vec![(-s, 0.5), (s, 0.5)],
            NoiseLaw::Uniform(s) => simpson(-s, s, &|_| 0.5 / s),
            NoiseLaw::Gaussian(s) => {
                let c = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
                simpson(-12.0 * s, 12.0 * s, &|z| c * (-0.5 * z * z / (s * s)).exp())
            }
            NoiseLaw::Laplace(s) => simpson(-40.0 * s, 40.0 * s, &|z| 0.5 / s * (-z.abs() / s).exp()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LabelModel {
    /// `y = +1` with probability `λ(x)`, `y = −1` otherwise.
    Binary(ClassProbability),
    /// `y = target(x) + noise`.
    Regression { target: Target, noise: NoiseLaw },
}

impl LabelModel {
    fn sample(&self, rng: &mut Rng, x: &[f64]) -> f64 {
        match self {
            LabelModel::Binary(lambda) => {
                if rng.gen::<f64>() < lambda.eval(x) {
                    1.0
                } else {
                    -1.0
                }
            }
            LabelModel::Regression { target, noise } => target.eval(x) + noise.sample(rng),
        }
    }

    /// Labels are almost surely bounded.
    pub fn is_bounded(&self) -> bool {
        match self {
            LabelModel::Binary(_) => true,
            LabelModel::Regression { noise, .. } => noise.is_bounded(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataModel {
    pub input: InputLaw,
    pub labels: LabelModel,
    pub dim: usize,
    pub seed: u64,
    /// Reject empirical input laws when sampling.
    pub strict_p4: bool,
}

impl DataModel {
    pub fn new(input: InputLaw, labels: LabelModel, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("data dimension must be >= 1".into()));
        }
        match &input {
            InputLaw::GaussianMixture(comps) => {
                if comps.is_empty() {
                    return Err(Error::Empty("gaussian mixture"));
                }
                let total: f64 = comps.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 || comps.iter().any(|c| c.weight < 0.0) {
                    return Err(Error::InvalidParameter(format!("mixture weights must be >= 0 and sum to 1 (sum {total})")));
                }
                for c in comps {
                    if c.mean.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: c.mean.len() });
                    }
                    if !(c.scale >= 0.0) {
                        return Err(Error::InvalidParameter("mixture scale must be >= 0".into()));
                    }
                }
            }
            InputLaw::UniformSphere { radius } | InputLaw::UniformBall { radius } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidParameter(format!("radius must be > 0 (got {radius})")));
                }
            }
            InputLaw::Empirical(points) => {
                if points.is_empty() {
                    return Err(Error::Empty("empirical law"));
                }
                if let Some(p) = points.iter().find(|p| p.len() != dim) {
                    return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
                }
            }
        }
        if let LabelModel::Binary(lambda) = &labels {
            let values: Vec<f64> = match lambda {
                ClassProbability::Constant(p) => vec![*p],
                ClassProbability::HalfSpace { normal, positive, negative, .. } => {
                    if normal.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: normal.len() });
                    }
                    vec![*positive, *negative]
                }
                _ => vec![],
            };
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidParameter(format!("class probability {v} outside [0, 1]")));
            }
        }
        if let LabelModel::Regression { noise, .. } = &labels {
            if !(noise.scale() >= 0.0) {
                return Err(Error::InvalidParameter("noise scale must be >= 0".into()));
            }
        }
        Ok(Self { input, labels, dim, seed, strict_p4: false })
    }

    pub fn strict(mut self) -> Self {
        self.strict_p4 = true;
        self
    }

    /// `n` i.i.d. pairs from stream `stream`. Bit-identical for equal
    /// `(seed, stream, n)`.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Batch> {
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if self.strict_p4 && matches!(self.input, InputLaw::Empirical(_)) {
            return Err(Error::StrictAdmissibility);
        }
        let mut rng = stream_rng(self.seed, stream);
        let mut xs = Vec::with_capacity(n * self.dim);
        let mut ys = Vec::with_capacity(n);
        for j in 0..n {
            self.input.sample(&mut rng, self.dim, &mut xs);
            let y = self.labels.sample(&mut rng, &xs[j * self.dim..]);
            ys.push(y);
        }
        Ok(Batch { xs, ys, dim: self.dim })
    }

    /// Inputs only, without the strict-mode check.
    pub fn sample_inputs(&self, n: usize, stream: u64) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, stream);
        let mut xs = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            self.input.sample(&mut rng, self.dim, &mut xs);
        }
        xs
    }

    /// Monte-Carlo estimate of `∫ |x| + |y| dP`.
    pub fn first_moment(&self, n: usize) -> Result<Estimate> {
        let mut model = self.clone();
        model.strict_p4 = false;
        let batch = model.sample(n, STREAM_FIRST_MOMENT)?;
        let terms: Vec<f64> = (0..batch.len()).map(|j| norm_sq(batch.x(j)).sqrt() + batch.ys[j].abs()).collect();
        Ok(Estimate::from_samples(&terms))
    }
}

/// Index-aligned samples; inputs stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub dim: usize,
}

impl Batch {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, dim: usize) -> Result<Self> {
        if ys.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if xs.len() != ys.len() * dim {
            return Err(Error::DimensionMismatch { expected: ys.len() * dim, got: xs.len() });
        }
        Ok(Self { xs, ys, dim })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn x(&self, j: usize) -> &[f64] {
        &self.xs[j * self.dim..(j + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdmissibilityVerdict {
    /// Quotient stable across the sweep.
    Pass,
    /// Quotient grows like `1/δ`.
    Fail,
    Inconclusive,
}

impl fmt::Display for AdmissibilityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdmissibilityVerdict::Pass => "pass",
            AdmissibilityVerdict::Fail => "fail",
            AdmissibilityVerdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissibilityRow {
    pub delta: f64,
    pub ratio_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibilityReport {
    /// One row per sweep scale, coarsest first.
    pub rows: Vec<AdmissibilityRow>,
    pub ratio_max: f64,
    /// `max / min` of the per-scale maxima.
    pub variation: f64,
    /// Largest per-decade growth of a single probe's quotient across the
    /// whole sweep. Exactly 10 when some direction keeps its switched mass
    /// as `δ` shrinks, which is what an atom on a hyperplane does.
    pub growth_per_decade: f64,
    pub verdict: AdmissibilityVerdict,
}

/// Sweep variation below which the quotient counts as bounded.
pub const ADMISSIBLE_MAX_VARIATION: f64 = 3.0;
/// Per-probe growth per decade at or above which the quotient counts as `~1/δ`.
pub const INADMISSIBLE_MIN_GROWTH: f64 = 7.9;

/// Samples a probe must switch at the finest scale before its growth rate
/// counts; below this the rate reflects the granularity of the sample.
pub const MIN_RESOLVED_SAMPLES: usize = 32;

/// Monte-Carlo probe of the Lipschitz continuity of
/// `(w, b) ↦ 1{wᵀx + b > 0}` from `S^d` into `L¹(√(1+|x|²) · P̄)`.
///
/// Draws `pairs` base points on `S^d` (a quarter of them are hyperplanes
/// through `d` sampled inputs, the rest uniform), a random tangent direction
/// for each, and measures the difference quotient at chord lengths
/// `delta, delta/10, delta/100` on `n` common inputs. Pass when the
/// per-scale maxima stay within a factor [`ADMISSIBLE_MAX_VARIATION`]; fail
/// when some probe's quotient grows like `1/δ` across the sweep.
pub fn admissible(model: &DataModel, pairs: usize, n: usize, delta: f64) -> Result<AdmissibilityReport> {
    if pairs == 0 || n == 0 {
        return Err(Error::InvalidParameter("admissible needs pairs >= 1 and n >= 1".into()));
    }
    if !(delta > 0.0 && delta < 2.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 2), got {delta}")));
    }
    let d = model.dim;
    let xs = model.sample_inputs(n, STREAM_ADMISSIBLE);
    let weights: Vec<f64> = xs.chunks(d).map(|x| (1.0 + norm_sq(x)).sqrt()).collect();
    let mut rng = stream_rng(model.seed, STREAM_ADMISSIBLE - 1);

    let anchored = pairs / 4;
    let probes: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
        .map(|k| {
            let base = if k < anchored {
                let through: Vec<&[f64]> = (0..d).map(|_| &xs[rng.gen_range(0..n) * d..][..d]).collect();
                hyperplane_through(&mut rng, &through)
            } else {
                unit_vector(&mut rng, d + 1)
            };
            let dir = tangent_direction(&mut rng, &base);
            (base, dir)
        })
        .collect();

    let deltas = [delta, delta / 10.0, delta / 100.0];
    // masses[k][p]: weighted mass and sample count switched by probe p at scale deltas[k].
    let masses: Vec<Vec<(f64, usize)>> = deltas
        .iter()
        .map(|&delta| {
            let angle = 2.0 * (delta / 2.0).asin();
            let (c, s) = (angle.cos(), angle.sin());
            probes
                .iter()
                .map(|(u, v)| {
                    let moved: Vec<f64> = u.iter().zip(v).map(|(a, b)| c * a + s * b).collect();
                    halfspace_l1_distance(&xs, &weights, d, u, &moved)
                })
                .collect()
        })
        .collect();
    let rows: Vec<AdmissibilityRow> = deltas
        .iter()
        .zip(&masses)
        .map(|(&delta, m)| AdmissibilityRow { delta, ratio_max: m.iter().fold(0.0, |a: f64, b| a.max(b.0)) / delta })
        .collect();

    let hi = rows.iter().map(|r| r.ratio_max).fold(0.0, f64::max);
    let lo = rows.iter().map(|r| r.ratio_max).fold(f64::INFINITY, f64::min);
    let variation = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let decades = (deltas.len() - 1) as f64;
    let growth_per_decade = (0..pairs)
        .filter(|&p| masses[2][p].1 >= MIN_RESOLVED_SAMPLES)
        .map(|p| (masses[2][p].0 / deltas[2] / (masses[0][p].0 / deltas[0])).powf(1.0 / decades))
        .fold(0.0, f64::max);
    let verdict = if variation < ADMISSIBLE_MAX_VARIATION {
        AdmissibilityVerdict::Pass
    } else if growth_per_decade >= INADMISSIBLE_MIN_GROWTH {
        AdmissibilityVerdict::Fail
    } else {
        AdmissibilityVerdict::Inconclusive
    };
    Ok(AdmissibilityReport { rows, ratio_max: hi, variation, growth_per_decade, verdict })
}

/// Random unit `(w, b)` whose hyperplane contains the given points.
fn hyperplane_through(rng: &mut Rng, points: &[&[f64]]) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in points {
        let mut v: Vec<f64> = p.iter().copied().chain([1.0]).collect();
        for q in &basis {
            let c = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
        }
        let norm = norm_sq(&v).sqrt();
        if norm > 1e-9 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    loop {
        let mut u = unit_vector(rng, points[0].len() + 1);
        for q in &basis {
            let c = dot(&u, q);
            u.iter_mut().zip(q).for_each(|(ui, qi)| *ui -= c * qi);
        }
        let norm = norm_sq(&u).sqrt();
        if norm > 1e-6 {
            return u.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn tangent_direction(rng: &mut Rng, u: &[f64]) -> Vec<f64> {
    loop {
        let mut v = unit_vector(rng, u.len());
        let proj = dot(&v, u);
        v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= proj * ui);
        let norm = norm_sq(&v).sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `(1/n) Σ_j weight_j |1{⟨u, x̃_j⟩ > 0} − 1{⟨v, x̃_j⟩ > 0}|` with `x̃ = (x, 1)`,
/// and the number of samples that switched.
fn halfspace_l1_distance(xs: &[f64], weights: &[f64], d: usize, u: &[f64], v: &[f64]) -> (f64, usize) {
    let mut acc = 0.0;
    let mut count = 0;
    for (x, w) in xs.chunks(d).zip(weights) {
        let zu = dot(&u[..d], x) + u[d];
        let zv = dot(&v[..d], x) + v[d];
        if (zu > 0.0) != (zv > 0.0) {
            acc += w;
            count += 1;
        }
    }
    (acc / weights.len() as f64, count)
}
