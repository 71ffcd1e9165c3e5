//! Losses `ℓ(y, y')` (prediction first), their clipped variants and the
//! Bayes-optimal predictors they induce.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use crate::data::{ClassProbability, DataModel, LabelModel, NoiseLaw, STREAM_MBR};
use crate::stats::Estimate;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Quadratic on `|y − y'| < 1`, linear beyond.
    Huber,
    /// `√(|y − y'|² + 1) − 1`.
    PseudoHuber,
    /// `log(1 + e^{−y y'})` for labels `y' = ±1`.
    Softplus,
    /// `|y − y'|^p / p`, `p > 1`.
    Power(f64),
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Huber => f.write_str("huber"),
            LossKind::PseudoHuber => f.write_str("pseudo_huber"),
            LossKind::Softplus => f.write_str("softplus"),
            LossKind::Power(p) => write!(f, "power({p})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossModel {
    pub kind: LossKind,
    /// Replace `ℓ` by its affine extension outside `|y| ≤ S`.
    pub clip: Option<f64>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LossModel {
    pub fn new(kind: LossKind) -> Result<Self> {
        if let LossKind::Power(p) = kind {
            if !(p > 1.0 && p.is_finite()) {
                return Err(Error::InvalidParameter(format!("power loss needs p in (1, inf), got {p}")));
            }
        }
        Ok(Self { kind, clip: None })
    }

    pub fn with_clip(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!("clip level must be > 0, got {s}")));
        }
        self.clip = Some(s);
        Ok(self)
    }

    /// Bound on `|∂₁ℓ|`, where one exists.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        match self.kind {
            LossKind::Huber | LossKind::PseudoHuber | LossKind::Softplus => Some(1.0),
            LossKind::Power(_) => None,
        }
    }

    /// Unclipped loss.
    pub fn eval(&self, y: f64, y_label: f64) -> f64 {
        let r = y - y_label;
        match self.kind {
            LossKind::Huber => {
                if r.abs() < 1.0 {
                    0.5 * r * r
                } else {
                    r.abs() - 0.5
                }
            }
            LossKind::PseudoHuber => r.hypot(1.0) - 1.0,
            LossKind::Softplus => softplus(-y * y_label),
            LossKind::Power(p) => r.abs().powf(p) / p,
        }
    }

    /// `∂ℓ/∂y` of the unclipped loss.
    pub fn d1(&self, y: f64, y_label: f64) -> f64 {
        let r = y - y_label;
        match self.kind {
            LossKind::Huber => r.clamp(-1.0, 1.0),
            LossKind::PseudoHuber => r / r.hypot(1.0),
            LossKind::Softplus => -y_label * logistic(-y * y_label),
            LossKind::Power(p) => r.signum() * r.abs().powf(p - 1.0),
        }
    }

    /// `ℓ_S`; the plain loss when no clip level is set.
    pub fn clip_eval(&self, y: f64, y_label: f64) -> f64 {
        match self.clip {
            Some(s) if y.abs() > s => {
                let edge = s.copysign(y);
                self.eval(edge, y_label) + self.d1(edge, y_label) * (y - edge)
            }
            _ => self.eval(y, y_label),
        }
    }

    pub fn clip_d1(&self, y: f64, y_label: f64) -> f64 {
        match self.clip {
            Some(s) if y.abs() > s => self.d1(s.copysign(y), y_label),
            _ => self.d1(y, y_label),
        }
    }

    /// Augmented loss `L_x(α) = ∫ ℓ(α, y) dP^x(y)` at input `x`.
    pub fn augmented(&self, labels: &LabelModel, x: &[f64], alpha: f64) -> f64 {
        match labels {
            LabelModel::Binary(lambda) => {
                let p = lambda.eval(x);
                let mut v = 0.0;
                if p > 0.0 {
                    v += p * self.clip_eval(alpha, 1.0);
                }
                if p < 1.0 {
                    v += (1.0 - p) * self.clip_eval(alpha, -1.0);
                }
                v
            }
            LabelModel::Regression { target, noise } => {
                let t = target.eval(x);
                self.augmented_at_target(*noise, t, alpha)
            }
        }
    }

    fn augmented_at_target(&self, noise: NoiseLaw, t: f64, alpha: f64) -> f64 {
        noise.quadrature().iter().map(|(z, w)| w * self.clip_eval(alpha, t + z)).sum()
    }

    /// Closed-form Bayes predictor where one is known. `None` for
    /// combinations that need the numerical fallback.
    pub fn bayes_optimal(&self, labels: &LabelModel) -> Result<Option<BayesPredictor>> {
        match (self.kind, labels) {
            (LossKind::Softplus, LabelModel::Binary(lambda)) => {
                let degenerate = match lambda {
                    ClassProbability::Constant(p) => vec![*p],
                    ClassProbability::HalfSpace { positive, negative, .. } => vec![*positive, *negative],
                    _ => vec![],
                };
                if let Some(p) = degenerate.iter().find(|p| **p == 0.0 || **p == 1.0) {
                    return Err(Error::MbrNotAttained(format!("class probability {p} on a set of positive measure")));
                }
                Ok(Some(BayesPredictor::new(*self, labels.clone(), Closed::LogOdds)))
            }
            (LossKind::Huber | LossKind::PseudoHuber | LossKind::Power(_), LabelModel::Regression { .. }) => {
                Ok(Some(BayesPredictor::new(*self, labels.clone(), Closed::Target)))
            }
            _ => Ok(None),
        }
    }

    /// Bayes predictor, falling back to cached golden-section minimization of
    /// `L_x` when no closed form applies.
    pub fn bayes_predictor(&self, labels: &LabelModel) -> Result<BayesPredictor> {
        Ok(match self.bayes_optimal(labels)? {
            Some(f) => f,
            None => BayesPredictor::new(*self, labels.clone(), Closed::None),
        })
    }

    /// Minimum Bayes risk `∫ L_x(f*(x)) dP̄(x)` by Monte Carlo over `x`; the
    /// label expectation is taken exactly.
    pub fn mbr_estimate(&self, model: &DataModel, n: usize) -> Result<Estimate> {
        let f = self.bayes_predictor(&model.labels)?;
        let mut model = model.clone();
        model.strict_p4 = false;
        let xs = model.sample_inputs(n.max(1), STREAM_MBR);
        let mut terms = Vec::with_capacity(n);
        for x in xs.chunks(model.dim) {
            let alpha = f.eval(x);
            if !alpha.is_finite() {
                return Err(Error::MbrNotAttained(format!("f*(x) = {alpha} at x = {x:?}")));
            }
            terms.push(self.augmented(&model.labels, x, alpha));
        }
        Ok(Estimate::from_samples(&terms))
    }
}

/// Default search window and tolerance of the numerical fallback.
pub const GOLDEN_LO: f64 = -50.0;
pub const GOLDEN_HI: f64 = 50.0;
pub const GOLDEN_TOL: f64 = 1e-8;

/// Minimizer of a convex function on `[lo, hi]` to within `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Interval `{α ∈ [lo, hi] : f(α) ≤ f(α*) + slack}` of a convex `f` around
/// its minimizer `α*`, by bisection on both sides.
pub fn minimizer_interval(f: impl Fn(f64) -> f64, lo: f64, hi: f64, slack: f64) -> (f64, f64) {
    let star = golden_section(&f, lo, hi, GOLDEN_TOL);
    let level = f(star) + slack;
    let edge = |mut inside: f64, mut outside: f64| {
        if f(outside) <= level {
            return outside;
        }
        while (outside - inside).abs() > GOLDEN_TOL {
            let mid = 0.5 * (inside + outside);
            if f(mid) <= level {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    (edge(star, lo), edge(star, hi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Closed {
    LogOdds,
    Target,
    None,
}

/// `x ↦ f*(x)`. Numerical evaluations are cached on the scalar that `L_x`
/// depends on (`λ(x)` or the regression target).
pub struct BayesPredictor {
    loss: LossModel,
    labels: LabelModel,
    closed: Closed,
    cache: Mutex<HashMap<u64, f64>>,
}

impl fmt::Debug for BayesPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BayesPredictor").field("loss", &self.loss).field("closed", &self.closed).finish()
    }
}

impl BayesPredictor {
    fn new(loss: LossModel, labels: LabelModel, closed: Closed) -> Self {
        Self { loss, labels, closed, cache: Mutex::new(HashMap::new()) }
    }

    pub fn is_closed_form(&self) -> bool {
        self.closed != Closed::None
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let key = match &self.labels {
            LabelModel::Binary(lambda) => lambda.eval(x),
            LabelModel::Regression { target, .. } => target.eval(x),
        };
        let closed = match self.closed {
            Closed::LogOdds => Some((key / (1.0 - key)).ln()),
            Closed::Target => Some(key),
            Closed::None => None,
        };
        match (closed, self.loss.clip) {
            (Some(v), None) => v,
            (Some(v), Some(s)) if v.abs() <= s => v,
            _ => self.numeric(key),
        }
    }

    fn numeric(&self, key: f64) -> f64 {
        if let Some(v) = self.cache.lock().expect("cache poisoned").get(&key.to_bits()) {
            return *v;
        }
        let v = match &self.labels {
            LabelModel::Binary(_) => numeric_binary(&self.loss, key),
            LabelModel::Regression { noise, .. } => {
                let q = noise.quadrature();
                golden_section(|a| q.iter().map(|(z, w)| w * self.loss.clip_eval(a, key + z)).sum(), GOLDEN_LO, GOLDEN_HI, GOLDEN_TOL)
            }
        };
        self.cache.lock().expect("cache poisoned").insert(key.to_bits(), v);
        v
    }
}

/// Golden-section minimizer of `λ ℓ(α, 1) + (1 − λ) ℓ(α, −1)`.
pub fn numeric_binary(loss: &LossModel, lambda: f64) -> f64 {
    golden_section(|a| lambda * loss.clip_eval(a, 1.0) + (1.0 - lambda) * loss.clip_eval(a, -1.0), GOLDEN_LO, GOLDEN_HI, GOLDEN_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InputLaw, Target};
    use proptest::prelude::*;

    fn lm(kind: LossKind) -> LossModel {
        LossModel::new(kind).unwrap()
    }

    const KINDS: [LossKind; 5] = [LossKind::Huber, LossKind::PseudoHuber, LossKind::Softplus, LossKind::Power(1.5), LossKind::Power(3.0)];

    #[test]
    fn pointwise_examples() {
        let h = lm(LossKind::Huber);
        assert_eq!(h.eval(0.0, 2.0), 1.5);
        assert_eq!(h.d1(0.0, 2.0), -1.0);
        let s = lm(LossKind::Softplus);
        assert!((s.eval(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s.d1(0.0, 1.0), -0.5);
        for y in [-3.0, 0.0, 0.25, 7.0] {
            assert_eq!(lm(LossKind::PseudoHuber).eval(y, y), 0.0);
        }
    }

    #[test]
    fn power_rejects_small_exponent() {
        assert!(LossModel::new(LossKind::Power(1.0)).is_err());
        assert!(lm(LossKind::Huber).with_clip(0.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let c = lm(LossKind::Power(2.0)).with_clip(1.0).unwrap();
        assert_eq!(c.clip_eval(3.0, 0.0), 2.5);
        assert_eq!(c.clip_eval(0.5, 0.3), c.eval(0.5, 0.3));
        for kind in KINDS {
            let c = lm(kind).with_clip(1.0).unwrap();
            for y_label in [-1.0, 0.4, 3.0] {
                let slope = c.d1(1.0, y_label);
                for h in [1e-3, 1e-4] {
                    let right = (c.clip_eval(1.0 + h, y_label) - c.clip_eval(1.0, y_label)) / h;
                    let left = (c.clip_eval(1.0, y_label) - c.clip_eval(1.0 - h, y_label)) / h;
                    assert!((right - slope).abs() < 1e-9, "{kind} right");
                    assert!((left - slope).abs() < 10.0 * h, "{kind} left");
                }
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_margins() {
        let s = lm(LossKind::Softplus);
        assert!((s.eval(800.0, -1.0) - 800.0).abs() < 1e-12);
        assert_eq!(s.eval(800.0, 1.0), 0.0);
        assert_eq!(s.d1(800.0, -1.0), 1.0);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let h = 1e-5;
        for kind in KINDS {
            let l = lm(kind);
            for (y, yl) in [(0.3f64, 1.0), (-0.2, -1.0), (2.5, 0.1), (-4.0, 0.7), (0.9, -0.6)] {
                if kind == LossKind::Huber && (y - yl).abs() > 1.0 - 1e-3 && (y - yl).abs() < 1.0 + 1e-3 {
                    continue;
                }
                let fd = (l.eval(y + h, yl) - l.eval(y - h, yl)) / (2.0 * h);
                assert!((fd - l.d1(y, yl)).abs() < 1e-8, "{kind} at ({y}, {yl})");
            }
        }
    }

    proptest! {
        #[test]
        fn convex_in_first_slot(y0 in -20.0..20.0f64, y1 in -20.0..20.0f64, yl in -3.0..3.0f64, t in 0.0..1.0f64, k in 0usize..5) {
            let l = lm(KINDS[k]);
            let mid = l.eval(t * y0 + (1.0 - t) * y1, yl);
            let chord = t * l.eval(y0, yl) + (1.0 - t) * l.eval(y1, yl);
            prop_assert!(mid <= chord + 1e-12 * (1.0 + chord.abs()));
        }

        #[test]
        fn clipped_loss_is_convex(y0 in -20.0..20.0f64, y1 in -20.0..20.0f64, yl in -3.0..3.0f64, t in 0.0..1.0f64, k in 0usize..5) {
            let l = lm(KINDS[k]).with_clip(1.5).unwrap();
            let mid = l.clip_eval(t * y0 + (1.0 - t) * y1, yl);
            let chord = t * l.clip_eval(y0, yl) + (1.0 - t) * l.clip_eval(y1, yl);
            prop_assert!(mid <= chord + 1e-12 * (1.0 + chord.abs()));
        }

        #[test]
        fn bounded_derivative(y in -1e3..1e3f64, yl in -1e3..1e3f64, k in 0usize..3) {
            let yl = if KINDS[k] == LossKind::Softplus { yl.signum() } else { yl };
            prop_assert!(lm(KINDS[k]).d1(y, yl).abs() <= 1.0);
        }

        #[test]
        fn clipped_slope_is_bounded_by_inner_slopes(y in -50.0..50.0f64, yl in -3.0..3.0f64, k in 0usize..5) {
            let l = lm(KINDS[k]).with_clip(2.0).unwrap();
            let bound = (-2000..=2000).map(|i| l.d1(i as f64 * 1e-3, yl).abs()).fold(0.0, f64::max);
            prop_assert!(l.clip_d1(y, yl).abs() <= bound + 1e-12);
        }
    }

    fn binary(p: f64) -> LabelModel {
        LabelModel::Binary(ClassProbability::Constant(p))
    }

    #[test]
    fn softplus_bayes_predictor() {
        let s = lm(LossKind::Softplus);
        let f = s.bayes_optimal(&binary(0.5)).unwrap().unwrap();
        assert_eq!(f.eval(&[0.3, 0.1]), 0.0);
        let f = s.bayes_optimal(&binary(0.9)).unwrap().unwrap();
        assert!((f.eval(&[0.0]) - 9f64.ln()).abs() < 1e-12);
        assert!((numeric_binary(&s, 0.9) - 9f64.ln()).abs() < 1e-6);
        assert!(matches!(s.bayes_optimal(&binary(1.0)), Err(Error::MbrNotAttained(_))));
    }

    #[test]
    fn huber_two_point_minimizers_are_flat() {
        let labels = LabelModel::Regression { target: Target::Zero, noise: NoiseLaw::TwoPoint(2.0) };
        let h = lm(LossKind::Huber);
        for alpha in [-1.0, -0.5, 0.0, 0.7, 1.0] {
            assert!((h.augmented(&labels, &[0.0], alpha) - 1.5).abs() < 1e-15);
        }
        let (lo, hi) = minimizer_interval(|a| h.augmented(&labels, &[0.0], a), -50.0, 50.0, 1e-12);
        // Outside [−1, 1] the loss rises like ε²/4, so a 1e-12 slack reaches ε ≈ 2e-6.
        assert!((lo + 1.0).abs() < 1e-5 && (hi - 1.0).abs() < 1e-5, "({lo}, {hi})");
    }

    #[test]
    fn regression_predictor_is_the_target() {
        let labels = LabelModel::Regression { target: Target::Linear { w: vec![2.0], b: -1.0 }, noise: NoiseLaw::Gaussian(0.3) };
        for kind in [LossKind::PseudoHuber, LossKind::Power(1.7)] {
            let l = lm(kind);
            let f = l.bayes_optimal(&labels).unwrap().unwrap();
            assert_eq!(f.eval(&[0.75]), 0.5);
            let numeric = golden_section(|a| l.augmented(&labels, &[0.75], a), -50.0, 50.0, 1e-10);
            assert!((numeric - 0.5).abs() < 1e-6, "{kind}: {numeric}");
        }
    }

    #[test]
    fn numeric_fallback_for_clipped_softplus() {
        let s = lm(LossKind::Softplus).with_clip(1.0).unwrap();
        let f = s.bayes_predictor(&binary(0.9)).unwrap();
        // log 9 > 1, so the clipped minimizer differs from the closed form.
        let v = f.eval(&[0.0]);
        assert!(v.is_finite());
        let direct = numeric_binary(&s, 0.9);
        assert_eq!(v, direct);
    }

    #[test]
    fn mbr_examples() {
        let sphere = |labels| DataModel::new(InputLaw::UniformSphere { radius: 1.0 }, labels, 2, 8).unwrap();
        let s = lm(LossKind::Softplus);
        let e = s.mbr_estimate(&sphere(binary(0.5)), 1000).unwrap();
        assert!((e.mean - 2f64.ln()).abs() < 2.0 / 1000f64.sqrt());
        let e = s.mbr_estimate(&sphere(binary(0.9)), 1000).unwrap();
        let oracle = 0.9 * (10.0f64 / 9.0).ln() + 0.1 * 10f64.ln();
        assert!((e.mean - oracle).abs() < 1e-12, "{}", e.mean);
        let noiseless = LabelModel::Regression { target: Target::Linear { w: vec![1.0, -1.0], b: 0.2 }, noise: NoiseLaw::None };
        assert_eq!(lm(LossKind::PseudoHuber).mbr_estimate(&sphere(noiseless), 500).unwrap().mean, 0.0);
    }

    #[test]
    fn clipping_preserves_minimizers_below_the_level() {
        let labels = binary(0.7);
        let s = lm(LossKind::Softplus);
        let star = numeric_binary(&s, 0.7);
        let clipped = s.with_clip(star.abs() + 0.5).unwrap();
        assert!((numeric_binary(&clipped, 0.7) - star).abs() < 1e-6);
        assert!((clipped.bayes_predictor(&labels).unwrap().eval(&[0.0]) - (0.7f64 / 0.3).ln()).abs() < 1e-12);
    }
}
