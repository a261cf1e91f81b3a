//! Absorbing zero states and balance conservation under factor SGD.

use dwf_core::data::Targets;
use dwf_core::init::{InitScheme, VarianceRule};
use dwf_core::model::{loss_and_grads, Activation, FactorizedMlp, LossKind, MlpSpec};
use dwf_core::ndcore::{DenseMatrix, SeededRng};
use dwf_core::optimizer::{sgd_step, MomentumState};

fn problem(seed: u64) -> (MlpSpec, DenseMatrix, Targets) {
    let spec = MlpSpec::new(vec![5, 6, 3], Activation::Tanh, LossKind::SoftmaxCrossEntropy).unwrap();
    let mut rng = SeededRng::new(seed);
    let x = DenseMatrix::from_vec(20, 5, (0..100).map(|_| rng.normal()).collect()).unwrap();
    let y = Targets::Classes((0..20).map(|_| rng.below(3)).collect());
    (spec, x, y)
}

/// Entries whose factors are set to a balanced state: `(param, index)`.
const PICKED: [(usize, usize); 5] = [(0, 0), (0, 7), (1, 2), (2, 5), (3, 1)];

#[test]
fn balanced_zero_factors_are_absorbing() {
    for depth in [2, 3, 4] {
        let (spec, x, y) = problem(depth as u64);
        let mut m = FactorizedMlp::init(spec, depth, &InitScheme::VarMatch, VarianceRule::Kaiming, 1).unwrap();
        for &(p, j) in &PICKED {
            for f in m.params_mut()[p].factors_mut() {
                f[j] = 0.0;
            }
        }
        let mut state = MomentumState::new(&m);
        for step in 0..100 {
            let (_, g) = loss_and_grads(&m, &x, &y).unwrap();
            sgd_step(&mut m, &g, &mut state, 0.3, 1e-2, 0.9, step).unwrap();
        }
        for &(p, j) in &PICKED {
            for f in m.params()[p].factors() {
                assert_eq!(f[j], 0.0, "depth {depth}, param {p}, entry {j}");
            }
        }
        // The rest of the network did move.
        assert_ne!(m.params()[0].factors()[0][1], 0.0);
    }
}

#[test]
fn balanced_magnitudes_are_conserved() {
    for depth in [2, 3, 4] {
        let (spec, x, y) = problem(10 + depth as u64);
        let mut m = FactorizedMlp::init(spec, depth, &InitScheme::VarMatch, VarianceRule::Kaiming, 2).unwrap();
        let mut rng = SeededRng::new(99);
        for &(p, j) in &PICKED {
            let a = 0.3 + rng.uniform();
            for f in m.params_mut()[p].factors_mut() {
                f[j] = a * rng.rademacher();
            }
        }
        let mut state = MomentumState::new(&m);
        for step in 0..50 {
            let (_, g) = loss_and_grads(&m, &x, &y).unwrap();
            sgd_step(&mut m, &g, &mut state, 0.1, 1e-3, 0.0, step).unwrap();
        }
        for &(p, j) in &PICKED {
            let mags: Vec<f64> = m.params()[p].factors().iter().map(|f| f[j].abs()).collect();
            let first = mags[0];
            assert!(first > 0.0);
            for v in &mags {
                assert!((v - first).abs() <= 1e-6 * first, "depth {depth}: {mags:?}");
            }
        }
    }
}
