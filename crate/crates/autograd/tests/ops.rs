use autograd::gradcheck::{self, OPERATORS};
use autograd::{AutogradError, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_operator_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in OPERATORS {
        for instance in 0..20 {
            let r = gradcheck::check_operator(name, &mut rng, 1e-5).unwrap();
            assert!(
                r.max_rel_error < 1e-4,
                "{name} instance {instance}: rel error {:.3e} on input {}",
                r.max_rel_error,
                r.worst_input
            );
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[1, 4], vec![0.0; 4]).unwrap();
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y), &[0.25; 4]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f64> = (0..60).map(|_| rand::Rng::random_range(&mut rng, -30.0..30.0)).collect();
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[6, 10], vals).unwrap();
    let y = t.softmax(x).unwrap();
    for row in t.value(y).chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_vocab() {
    let v = 100;
    let mut t = Tape::<f64>::new();
    let x = t.var(&[3, v], vec![0.5; 3 * v]).unwrap();
    let loss = t.cross_entropy(x, &[4, 17, 99], &[1.0, 0.0, 1.0]).unwrap();
    assert!((t.scalar(loss) - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_with_no_selected_rows_is_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.var(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 9.0]).unwrap();
    let loss = t.cross_entropy(x, &[0, 1], &[0.0, 0.0]).unwrap();
    assert_eq!(t.scalar(loss), 0.0);
    let g = t.backward(loss).unwrap();
    assert!(g.get(x).unwrap_or(&[0.0]).iter().all(|&v| v == 0.0));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.var(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
}

#[test]
fn unreachable_input_gets_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.var(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let c = t.var(&[1], vec![5.0]).unwrap();
    let loss = t.sum(c).unwrap();
    let g = t.backward(loss).unwrap();
    assert!(g.get(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.var(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = t.relu(x).unwrap();
    assert!(matches!(t.backward(y), Err(AutogradError::NonScalar(_))));
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.var(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.var(&[4, 2], vec![0.0; 8]).unwrap();
    match t.matmul(a, b, false) {
        Err(AutogradError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.var(&[2], vec![1e308, 1e308]).unwrap();
    assert!(matches!(t.scale(x, 10.0), Err(AutogradError::NonFinite(_))));
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::<f32>::eval();
    let x = t.var(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = t.dropout(x, 0.5, &mut rng).unwrap();
    assert_eq!(x, y);
    let mut t = Tape::<f32>::new();
    let x = t.var(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
}

#[test]
fn matmul_backward_matches_finite_differences_5x7_7x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..35).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let b: Vec<f64> = (0..21).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let w: Vec<f64> = (0..15).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let r = gradcheck::check(&[(vec![5, 7], a), (vec![7, 3], b)], 1e-5, |t, v| {
        let y = t.matmul(v[0], v[1], false)?;
        gradcheck::project(t, y, &w)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}
