use proptest::prelude::*;
use slkd_core::losses::{fuse_logits, kd_divergence, mean_kl};
use slkd_core::tensor::kernels::{log_softmax_rows, softmax_rows};
use slkd_core::{Tape, Tensor};

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn shifted(t: &Tensor, c: f64) -> Tensor {
    t.map(|v| v + c)
}

fn kd_value(target: &Tensor, student: &Tensor, tau: f64) -> f64 {
    let tape = Tape::new();
    kd_divergence(target, &tape.leaf(student.clone()), tau, true)
        .unwrap()
        .value()
        .item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(x in logits(3, 5)) {
        let p = softmax_rows(&x).unwrap();
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant(x in logits(2, 4), c in -50.0f64..50.0) {
        let a = log_softmax_rows(&x).unwrap();
        let b = log_softmax_rows(&shifted(&x, c)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_is_nonnegative_and_zero_on_identity(t in logits(4, 6), s in logits(4, 6), tau in 0.5f64..8.0) {
        prop_assert!(kd_value(&t, &s, tau) >= -1e-12);
        prop_assert!(kd_value(&t, &t, tau).abs() < 1e-12);
        prop_assert!(mean_kl(&t, &s, tau).unwrap() >= 0.0);
    }

    #[test]
    fn kd_is_shift_invariant(t in logits(3, 5), s in logits(3, 5), c in -30.0f64..30.0, d in -30.0f64..30.0) {
        let base = kd_value(&t, &s, 4.0);
        prop_assert!((kd_value(&shifted(&t, c), &shifted(&s, d), 4.0) - base).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_permutation_consistent(a in logits(2, 3), b in logits(2, 3), rho in 0.0f64..=1.0) {
        let ab = fuse_logits(&[rho, 1.0 - rho], &[&a, &b]).unwrap();
        let ba = fuse_logits(&[1.0 - rho, rho], &[&b, &a]).unwrap();
        for (u, v) in ab.data().iter().zip(ba.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn rho_one_selects_the_first_slt() {
    let a = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
    let b = Tensor::from_rows(&[[9.0, 3.0, -4.0]]).unwrap();
    assert_eq!(fuse_logits(&[1.0, 0.0], &[&a, &b]).unwrap(), a);
}

#[test]
fn fusion_rejects_bad_weights() {
    let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
    assert!(fuse_logits(&[0.7, 0.7], &[&a, &a]).is_err());
    assert!(fuse_logits(&[1.5, -0.5], &[&a, &a]).is_err());
    assert!(fuse_logits(&[1.0], &[&a, &a]).is_err());
}
