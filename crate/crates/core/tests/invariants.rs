use mflab::data::{Batch, ClassProbability, DataModel, InputLaw, LabelModel, NoiseLaw, Target};
use mflab::field::{ActivationSpec, PotentialField};
use mflab::flow::{self, dissipation, mean_potential, FlowConfig, Integrator};
use mflab::loss::{LossKind, LossModel};
use mflab::params::Ensemble;
use proptest::prelude::*;

fn classification(seed: u64) -> DataModel {
    let lambda = ClassProbability::Logistic { w: vec![2.0, -1.0], b: 0.3 };
    DataModel::new(InputLaw::UniformSphere { radius: 1.0 }, LabelModel::Binary(lambda), 2, seed).unwrap()
}

fn regression(seed: u64) -> DataModel {
    let labels = LabelModel::Regression { target: Target::Linear { w: vec![1.0, -0.5], b: 0.2 }, noise: NoiseLaw::Uniform(0.3) };
    DataModel::new(InputLaw::UniformBall { radius: 1.0 }, labels, 2, seed).unwrap()
}

fn loss(k: usize) -> LossModel {
    let kind = [LossKind::Huber, LossKind::PseudoHuber, LossKind::Power(2.0)][k];
    LossModel::new(kind).unwrap()
}

fn setup(k: usize, seed: u64) -> (Ensemble, Batch, LossModel) {
    let (model, lm) =
        if k == 3 { (classification(seed), LossModel::new(LossKind::Softplus).unwrap()) } else { (regression(seed), loss(k)) };
    let e = Ensemble::init_omni(48, 2, seed).unwrap();
    let batch = model.sample(96, 0).unwrap();
    (e, batch, lm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn potential_is_half_its_radial_derivative(k in 0usize..4, seed in 0u64..1000, theta in proptest::collection::vec(-3.0..3.0f64, 4)) {
        let (e, batch, lm) = setup(k, seed);
        let field = PotentialField::new(&e, &batch, &lm, ActivationSpec::RELU);
        let mut grad = vec![0.0; 4];
        let g = field.potential_and_grad(&theta, &mut grad);
        let half_radial: f64 = 0.5 * theta.iter().zip(&grad).map(|(t, v)| t * v).sum::<f64>();
        let scale = theta.iter().map(|t| t * t).sum::<f64>() * field.sup_residual() + 1e-300;
        prop_assert!((g - half_radial).abs() <= 1e-12 * scale, "g = {g}, half radial = {half_radial}");
    }

    #[test]
    fn euler_step_moves_the_second_moment_by_the_mean_potential(k in 0usize..4, seed in 0u64..1000, dt in 1e-4..1e-1f64) {
        let (e, batch, lm) = setup(k, seed);
        let field = PotentialField::new(&e, &batch, &lm, ActivationSpec::RELU);
        let g = mean_potential(&e, &field);
        let d = dissipation(&e, &field);
        let next = flow::step(&e, dt, Integrator::Euler, |s| PotentialField::new(s, &batch, &lm, ActivationSpec::RELU));
        let rate = (next.second_moment() - e.second_moment()) / dt;
        let expected = -4.0 * g + dt * d;
        prop_assert!((rate - expected).abs() <= 1e-8 * (4.0 * g.abs() + d + 1.0), "rate {rate}, expected {expected}");
    }

    #[test]
    fn rk4_flow_conserves_every_minkowski_norm(k in 0usize..4, seed in 0u64..1000) {
        let model = if k == 3 { classification(seed) } else { regression(seed) };
        let lm = if k == 3 { LossModel::new(LossKind::Softplus).unwrap() } else { loss(k) };
        let e0 = Ensemble::init_omni(32, 2, seed).unwrap();
        let cfg = FlowConfig { dt: 0.02, horizon: 0.2, batch_size: 64, record_every: 5, ..FlowConfig::default() };
        let (record, e) = flow::run(&e0, &cfg, &model, &lm, &[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        prop_assert!(e.max_minkowski_drift() < 1e-6, "drift {}", e.max_minkowski_drift());
        prop_assert_eq!(record.cone_violations.last().copied(), Some(0));
    }

    #[test]
    fn ensemble_csv_round_trip_is_exact(seed in 0u64..1000, m in 1usize..40, d in 1usize..5) {
        let e = Ensemble::init_omni(m, d, seed).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let back = Ensemble::read_csv(buf.as_slice(), seed).unwrap();
        prop_assert_eq!(back.particles(), e.particles());
    }

    #[test]
    fn sampling_is_a_function_of_seed_and_stream(seed in 0u64..1000, stream in 0u64..1000) {
        let model = regression(seed);
        let a = model.sample(50, stream).unwrap();
        let b = model.sample(50, stream).unwrap();
        let c = model.sample(50, stream + 1).unwrap();
        prop_assert_eq!(a.x(7), b.x(7));
        prop_assert_ne!(a.x(7), c.x(7));
    }
}
