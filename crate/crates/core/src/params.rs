//! Neurons, ensembles and the geometry of the parameter cone.
//!
//! A neuron is `θ = (a, w, b) ∈ R × R^d × R`, stored contiguously as
//! `[a, w_1, …, w_d, b]`. The cone of space-like parameters is
//! `{−a² + |w|² + b² > 0}`; its closure is where the flow lives.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::rng::{stream_rng, unit_vector};
use crate::stats::{dot, mean, norm_sq};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    theta: Vec<f64>,
    /// Minkowski norm when the particle was created.
    pub m0: f64,
}

/// `−θ_0² + Σ_{k≥1} θ_k²` for a packed parameter vector.
pub fn minkowski_of(theta: &[f64]) -> f64 {
    let a = theta[0];
    norm_sq(&theta[1..]) - a * a
}

impl Particle {
    pub fn new(a: f64, w: &[f64], b: f64) -> Self {
        let mut theta = Vec::with_capacity(w.len() + 2);
        theta.push(a);
        theta.extend_from_slice(w);
        theta.push(b);
        Self::from_theta(theta)
    }

    /// Build from a packed `[a, w.., b]` vector; `m0` is computed from it.
    pub fn from_theta(theta: Vec<f64>) -> Self {
        assert!(theta.len() >= 3, "a particle needs d >= 1");
        let m0 = minkowski_of(&theta);
        Self { theta, m0 }
    }

    /// Replace the coordinates while keeping the recorded `m0`.
    pub fn moved_to(&self, theta: Vec<f64>) -> Self {
        debug_assert_eq!(theta.len(), self.theta.len());
        Self { theta, m0: self.m0 }
    }

    pub fn zero(d: usize) -> Self {
        Self::from_theta(vec![0.0; d + 2])
    }

    pub fn dim(&self) -> usize {
        self.theta.len() - 2
    }

    pub fn a(&self) -> f64 {
        self.theta[0]
    }

    pub fn w(&self) -> &[f64] {
        let n = self.theta.len();
        &self.theta[1..n - 1]
    }

    pub fn b(&self) -> f64 {
        self.theta[self.theta.len() - 1]
    }

    /// `(w, b)` as one slice.
    pub fn inner(&self) -> &[f64] {
        &self.theta[1..]
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    /// `−a² + |w|² + b²`.
    pub fn minkowski(&self) -> f64 {
        minkowski_of(&self.theta)
    }

    /// Membership in the closed cone, up to `tol`.
    pub fn in_cone(&self, tol: f64) -> bool {
        self.minkowski() >= -tol
    }

    /// `T(a, w, b) = (−a, w, b)`.
    pub fn sym_flip(&self) -> Self {
        let mut theta = self.theta.clone();
        theta[0] = -theta[0];
        Self::from_theta(theta)
    }

    /// `(λa, w/λ, b/λ)`, which leaves the realized neuron unchanged for `λ > 0`.
    pub fn rebalance(&self, lambda: f64) -> Self {
        let mut theta: Vec<f64> = self.theta.iter().map(|x| x / lambda).collect();
        theta[0] = self.theta[0] * lambda;
        Self::from_theta(theta)
    }

    /// `cθ` (positive dilation). Minkowski norm scales by `c²`.
    pub fn scaled(&self, c: f64) -> Self {
        Self::from_theta(self.theta.iter().map(|x| x * c).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    particles: Vec<Particle>,
    dim: usize,
    /// Seed the ensemble was initialized from (provenance only).
    pub seed: u64,
}

impl Ensemble {
    pub fn new(particles: Vec<Particle>, seed: u64) -> Result<Self> {
        let first = particles.first().ok_or(Error::Empty("ensemble"))?;
        let dim = first.dim();
        for p in &particles {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.dim() });
            }
            if !p.is_finite() || !p.m0.is_finite() {
                return Err(Error::NonFinite("particle".into()));
            }
        }
        Ok(Self { particles, dim, seed })
    }

    /// Same dimension and seed, new particle positions. Used by the integrator.
    pub(crate) fn with_particles(&self, particles: Vec<Particle>) -> Self {
        debug_assert_eq!(particles.len(), self.particles.len());
        Self { particles, dim: self.dim, seed: self.seed }
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Self { particles: vec![Particle::zero(d); m.max(1)], dim: d, seed: 0 }
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn map(&self, f: impl Fn(&Particle) -> Particle) -> Self {
        Self { particles: self.particles.iter().map(f).collect(), dim: self.dim, seed: self.seed }
    }

    /// `N(π) = (1/m) Σ |θ_i|²`.
    pub fn second_moment(&self) -> f64 {
        let v: Vec<f64> = self.particles.iter().map(Particle::norm_sq).collect();
        mean(&v)
    }

    /// Path-norm upper estimate `(1/m) Σ |a_i| (|w_i| + |b_i|)`.
    pub fn barron_estimate(&self) -> f64 {
        let v: Vec<f64> = self.particles.iter().map(|p| p.a().abs() * (norm_sq(p.w()).sqrt() + p.b().abs())).collect();
        mean(&v)
    }

    pub fn min_minkowski(&self) -> f64 {
        self.particles.iter().map(Particle::minkowski).fold(f64::INFINITY, f64::min)
    }

    /// `max_i |minkowski(θ_i) − m0_i|`.
    pub fn max_minkowski_drift(&self) -> f64 {
        self.particles.iter().map(|p| (p.minkowski() - p.m0).abs()).fold(0.0, f64::max)
    }

    /// Number of particles with `minkowski < −tol`.
    pub fn cone_violations(&self, tol: f64) -> usize {
        self.particles.iter().filter(|p| !p.in_cone(tol)).count()
    }

    /// Fraction of particles in the open cone `{θ : ⟨θ, u⟩ > cos_angle |θ|}`.
    /// Finite-ensemble witness for omni-directionality.
    pub fn cap_mass(&self, u: &[f64], cos_angle: f64) -> f64 {
        let hits = self
            .particles
            .iter()
            .filter(|p| {
                let n = p.norm_sq().sqrt();
                n > 0.0 && dot(p.theta(), u) > cos_angle * n
            })
            .count();
        hits as f64 / self.len() as f64
    }

    /// `a ~ U[−1, 1]` and `(w, b)` uniform on `S^d`, independently. Every
    /// particle lies in the closed cone.
    pub fn init_omni(m: usize, d: usize, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!("init_omni needs m, d >= 1 (m={m}, d={d})")));
        }
        let mut rng = stream_rng(seed, 0);
        let particles = (0..m)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..=1.0);
                let mut theta = Vec::with_capacity(d + 2);
                theta.push(a);
                theta.extend(unit_vector(&mut rng, d + 1));
                Particle::from_theta(theta)
            })
            .collect();
        Ok(Self { particles, dim: d, seed })
    }

    /// Project `|θ|²·π` to the unit sphere. Zero particles carry no atom.
    pub fn sphere_project(&self) -> SphereMeasure {
        let m = self.len() as f64;
        let atoms = self
            .particles
            .iter()
            .filter_map(|p| {
                let r2 = p.norm_sq();
                if r2 == 0.0 {
                    return None;
                }
                let r = r2.sqrt();
                Some(SphereAtom { direction: p.theta().iter().map(|x| x / r).collect(), mass: r2 / m })
            })
            .collect();
        SphereMeasure { atoms, dim: self.dim }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["a".to_string()];
        header.extend((1..=self.dim).map(|k| format!("w_{k}")));
        header.push("b".into());
        header.push("m0".into());
        wtr.write_record(&header)?;
        for p in &self.particles {
            let row: Vec<String> = p.theta().iter().chain(std::iter::once(&p.m0)).map(|x| format!("{x:.16e}")).collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let cols = header.len();
        if cols < 4 || &header[0] != "a" || &header[cols - 2] != "b" || &header[cols - 1] != "m0" {
            return Err(Error::Parse { record: 0, message: "expected header a,w_1..w_d,b,m0".into() });
        }
        let mut particles = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { record: i + 1, message: e.to_string() })?;
            let (theta, m0) = vals.split_at(cols - 1);
            particles.push(Particle { theta: theta.to_vec(), m0: m0[0] });
        }
        Self::new(particles, seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphereAtom {
    pub direction: Vec<f64>,
    pub mass: f64,
}

/// Finite non-negative measure on the unit sphere of `R^{d+2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereMeasure {
    pub atoms: Vec<SphereAtom>,
    pub dim: usize,
}

impl SphereMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    /// Build an ensemble with the same realization as `Σ_k mass_k φ(u_k; ·)`.
    ///
    /// With `K` atoms, atom `k` becomes the particle `u_k √(K·mass_k)`; by
    /// two-homogeneity the uniform `1/K` weight reproduces `mass_k`. An empty
    /// or massless measure maps to the single zero particle.
    pub fn reparametrize_minimizer(&self) -> Ensemble {
        let atoms: Vec<&SphereAtom> = self.atoms.iter().filter(|a| a.mass > 0.0).collect();
        if atoms.is_empty() {
            return Ensemble::zeros(1, self.dim);
        }
        let k = atoms.len() as f64;
        let particles = atoms
            .iter()
            .map(|atom| {
                let r = (k * atom.mass).sqrt();
                Particle::from_theta(atom.direction.iter().map(|x| x * r).collect())
            })
            .collect();
        Ensemble { particles, dim: self.dim, seed: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(a: f64, w: &[f64], b: f64) -> Particle {
        Particle::new(a, w, b)
    }

    #[test]
    fn minkowski_examples() {
        assert_eq!(p(1.0, &[1.0, 0.0], 0.0).minkowski(), 0.0);
        assert_eq!(p(0.0, &[0.0, 0.0], 0.0).minkowski(), 0.0);
        assert_eq!(p(1.0, &[2.0, 0.0], 1.0).minkowski(), 4.0);
    }

    #[test]
    fn cone_membership() {
        assert!(p(1.0, &[1.0, 0.0], 0.0).in_cone(0.0));
        assert!(!p(2.0, &[1.0, 0.0], 0.0).in_cone(0.0));
        assert!(p(2.0, &[1.0, 0.0], 0.0).in_cone(10.0));
    }

    #[test]
    fn flip_is_an_involution() {
        let q = p(1.0, &[1.0, 0.0], 0.0);
        let f = q.sym_flip();
        assert_eq!(f.theta(), &[-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.sym_flip(), q);
        assert_eq!(f.m0, q.m0);
    }

    #[test]
    fn moments_of_simple_ensembles() {
        let e = Ensemble::new(vec![p(1.0, &[1.0, 0.0], 0.0)], 0).unwrap();
        assert_eq!(e.second_moment(), 2.0);
        assert_eq!(e.barron_estimate(), 1.0);
        assert_eq!(Ensemble::zeros(5, 2).second_moment(), 0.0);
    }

    #[test]
    fn omni_init_lies_in_cone_and_has_expected_moment() {
        let e = Ensemble::init_omni(100_000, 2, 11).unwrap();
        assert!(e.min_minkowski() >= 0.0);
        // E[a²] = 1/3 for U[−1,1] plus |(w,b)|² = 1.
        assert!((e.second_moment() - 4.0 / 3.0).abs() < 0.01);
        // Open cone around a cone-interior direction carries mass.
        let u = [0.5, 0.5, 0.5, 0.5f64.sqrt()];
        let nu = norm_sq(&u).sqrt();
        let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
        assert!(e.cap_mass(&u, 0.99) > 0.0);
    }

    #[test]
    fn omni_init_is_reproducible() {
        let a = Ensemble::init_omni(50, 3, 5).unwrap();
        let b = Ensemble::init_omni(50, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Ensemble::init_omni(50, 3, 6).unwrap());
    }

    #[test]
    fn init_rejects_degenerate_sizes() {
        assert!(Ensemble::init_omni(0, 2, 1).is_err());
        assert!(Ensemble::init_omni(3, 0, 1).is_err());
    }

    #[test]
    fn sphere_projection_examples() {
        let e = Ensemble::new(vec![p(1.0, &[1.0, 0.0], 0.0)], 0).unwrap();
        let s = e.sphere_project();
        assert_eq!(s.atoms.len(), 1);
        let r = 0.5f64.sqrt();
        for (x, y) in s.atoms[0].direction.iter().zip([r, r, 0.0, 0.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((s.atoms[0].mass - 2.0).abs() < 1e-14);

        assert!(Ensemble::zeros(4, 2).sphere_project().atoms.is_empty());
    }

    #[test]
    fn escaping_mass_projects_to_a_fixed_atom() {
        // π_n = (1/n) δ_{√n e₁} + (1 − 1/n) δ_0, realized with n particles.
        for n in [1usize, 2, 5, 10, 100] {
            let mut ps = vec![Particle::zero(2); n];
            ps[0] = p((n as f64).sqrt(), &[0.0, 0.0], 0.0);
            let s = Ensemble::new(ps, 0).unwrap().sphere_project();
            assert_eq!(s.atoms.len(), 1);
            assert!((s.atoms[0].mass - 1.0).abs() < 1e-12);
            assert_eq!(s.atoms[0].direction, vec![1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn empty_measure_reparametrizes_to_zero() {
        let s = SphereMeasure { atoms: vec![], dim: 3 };
        let e = s.reparametrize_minimizer();
        assert_eq!(e.len(), 1);
        assert_eq!(e.particles()[0].theta(), &[0.0; 5]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let e = Ensemble::init_omni(7, 3, 2).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a,w_1,w_2,w_3,b,m0\n"));
        let back = Ensemble::read_csv(buf.as_slice(), e.seed).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let err = Ensemble::read_csv("x,y\n1,2\n".as_bytes(), 0).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    fn particle_strategy() -> impl Strategy<Value = Particle> {
        (-5.0..5.0f64, proptest::collection::vec(-5.0..5.0f64, 2), -5.0..5.0f64).prop_map(|(a, w, b)| Particle::new(a, &w, b))
    }

    proptest! {
        #[test]
        fn flip_preserves_minkowski(q in particle_strategy()) {
            prop_assert_eq!(q.sym_flip().minkowski(), q.minkowski());
        }

        #[test]
        fn barron_is_rebalance_and_flip_invariant(
            qs in proptest::collection::vec(particle_strategy(), 1..20),
            lambda in 0.1..10.0f64,
        ) {
            let e = Ensemble::new(qs, 0).unwrap();
            let base = e.barron_estimate();
            let flipped = e.map(Particle::sym_flip).barron_estimate();
            let rebalanced = e.map(|q| q.rebalance(lambda)).barron_estimate();
            prop_assert!((flipped - base).abs() <= 1e-12 * (1.0 + base));
            prop_assert!((rebalanced - base).abs() <= 1e-12 * (1.0 + base));
        }
    }
}
