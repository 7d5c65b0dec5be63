//! The ConvLSTM on a 1×1 map with one channel and 1×1 kernels is a scalar
//! peephole LSTM; compare it against a direct scalar implementation.

mod common;

use common::Scalar;
use futureseg::convlstm::{cell_step, run_sequence, CellState};
use futureseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()
}

#[test]
fn single_step_matches_scalar_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let p = Scalar::draw(&mut rng);
        let (x, h, c) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-3.0..3.0),
        );
        let (h_want, c_want) = p.step(x, h, c);
        let prev = CellState {
            hidden: scalar(h),
            cell: scalar(c),
        };
        let next = cell_step(&p.as_params(), &scalar(x), &prev).unwrap();
        assert!((next.hidden.data()[0] - h_want).abs() < 1e-6, "{p:?}");
        assert!((next.cell.data()[0] - c_want).abs() < 1e-6, "{p:?}");
    }
}

#[test]
fn four_step_run_matches_scalar_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let p = Scalar::draw(&mut rng);
        let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (mut h, mut c) = (0.0, 0.0);
        for &x in &xs {
            (h, c) = p.step(x, h, c);
        }
        let seq: Vec<Tensor<f64>> = xs.iter().map(|&x| scalar(x)).collect();
        let got = run_sequence(&p.as_params(), &seq).unwrap();
        assert!((got.data()[0] - h).abs() < 1e-6, "{p:?} {xs:?}");
    }
}
