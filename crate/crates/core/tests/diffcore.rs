use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rbwp_core::diffcore::{grad_check, nuclear_norm, singular_values, NamedParam};
use rbwp_core::{Array, Error, Precision, Tape};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arr(shape: &[usize], seed: u64) -> Array {
    Array::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::default();
    let x = t.constant(Array::from_vec(vec![0.0, 0.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_on_a_named_inner_axis() {
    let mut t = Tape::default();
    let x = t.constant(arr(&[2, 3, 4], 1));
    let y = t.softmax(x, 1).unwrap();
    let v = t.value(y);
    for a in 0..2 {
        for c in 0..4 {
            let s: f64 = (0..3).map(|b| v.at(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::default();
    let a = t.constant(Array::zeros(&[2, 3]));
    let b = t.constant(Array::zeros(&[4, 5]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    let err = t.add(a, b).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::default();
    let x = t.param("x", Array::from_vec(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum_is_twice_input() {
    let mut t = Tape::default();
    let x = t.param("x", Array::from_vec(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::default();
    let x = t.param("x", Array::from_vec(vec![1.0, 2.0]));
    assert!(t.backward(x).is_err());
}

#[test]
fn unreachable_parameters_get_zero_gradients() {
    let mut t = Tape::default();
    let x = t.param("x", Array::from_vec(vec![1.0, 2.0]));
    let unused = t.param("unused", Array::zeros(&[3, 2]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(unused), &Array::zeros(&[3, 2]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::default();
    let w = t.constant(arr(&[3, 3], 2));
    let x = t.param("x", arr(&[2, 3], 3));
    let y = t.matmul(x, w).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.get(w).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn gradients_are_bitwise_reproducible() {
    let run = || {
        let mut t = Tape::default();
        let x = t.param("x", arr(&[4, 5], 7));
        let w = t.param("w", arr(&[5, 3], 8));
        let y = t.matmul(x, w).unwrap();
        let y = t.softmax(y, 1).unwrap();
        let l = t.log(y).unwrap();
        let s = t.sum(l);
        let g = t.backward(s).unwrap();
        (g.wrt(x).clone(), g.wrt(w).clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bitwise_eq(&b.0) && a.1.bitwise_eq(&b.1));
}

#[test]
fn single_precision_rounds_through_f32() {
    let mut t = Tape::new(Precision::Single);
    let x = t.constant(Array::from_vec(vec![0.1]));
    let y = t.scale(x, 3.0);
    assert_eq!(t.value(y).item(), (0.1f32 as f64 * 3.0) as f32 as f64);
    assert_eq!(t.value(x).item(), 0.1f32 as f64);
}

#[test]
fn nuclear_norm_of_identity_and_rank_one() {
    let eye = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!((nuclear_norm(&eye).unwrap() - 2.0).abs() < 1e-12);
    let col = Array::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
    assert!((nuclear_norm(&col).unwrap() - 5.0).abs() < 1e-12);
    let oracle = nalgebra::DMatrix::from_row_slice(2, 2, col.data());
    let nsv: f64 = oracle.singular_values().iter().sum();
    assert!((nsv - 5.0).abs() < 1e-12);
}

#[test]
fn nuclear_norm_rejects_non_matrix() {
    assert!(nuclear_norm(&Array::zeros(&[2, 2, 2])).is_err());
}

proptest! {
    #[test]
    fn singular_values_match_nalgebra(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        let a = arr(&[rows, cols], seed);
        let ours = singular_values(&a).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, a.data());
        let mut theirs: Vec<f64> = m.singular_values().iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        prop_assert_eq!(ours.len(), theirs.len());
        for (x, y) in ours.iter().zip(&theirs) {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", ours, theirs);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut t = Tape::default();
        let x = arr(&[rows, cols], seed).map(|v| v * scale);
        let x = t.constant(x);
        let y = t.softmax(x, 1).unwrap();
        for row in t.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, d in 2usize..12, offset in -5.0f64..5.0, seed in any::<u64>()) {
        let mut t = Tape::default();
        let x = t.constant(arr(&[rows, d], seed).map(|v| 3.0 * v + offset));
        let g = t.constant(Array::ones(&[d]));
        let b = t.constant(Array::zeros(&[d]));
        let y = t.layer_norm(x, g, b).unwrap();
        let xs = t.value(x).data().to_vec();
        for (row, input) in t.value(y).data().chunks(d).zip(xs.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let in_mean = input.iter().sum::<f64>() / d as f64;
            let in_var = input.iter().map(|v| (v - in_mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - in_var / (in_var + 1e-6)).abs() < 1e-9);
            if in_var > 0.1 {
                prop_assert!((var - 1.0).abs() < 1e-5, "var {}", var);
            }
        }
    }

    #[test]
    fn transpose_round_trips(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let mut t = Tape::default();
        let x = t.constant(arr(&[a, b, c], seed));
        let y = t.transpose(x, &[2, 0, 1]).unwrap();
        let z = t.transpose(y, &[1, 2, 0]).unwrap();
        prop_assert!(t.value(z).bitwise_eq(t.value(x)));
        prop_assert_eq!(t.value(y).at(&[c - 1, 0, b - 1]), t.value(x).at(&[0, b - 1, c - 1]));
    }
}

fn check(name: &str, params: Vec<NamedParam>, f: impl Fn(&mut Tape, &[rbwp_core::Var]) -> rbwp_core::Result<rbwp_core::Var>) {
    let report = grad_check(f, &params, 1e-5).unwrap();
    assert!(report.max_relative_error < 1e-7, "{name}: {report:?}");
    assert!(report.checked > 0, "{name}: nothing checked");
}

#[test]
fn every_op_matches_finite_differences() {
    check(
        "matmul+broadcast add",
        vec![
            NamedParam::new("a", arr(&[2, 3, 4], 1)),
            NamedParam::new("b", arr(&[4, 5], 2)),
            NamedParam::new("bias", arr(&[5], 3)),
        ],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add(y, v[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    );
    check(
        "batched matmul",
        vec![NamedParam::new("a", arr(&[2, 3, 4], 4)), NamedParam::new("b", arr(&[2, 4, 2], 5))],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        },
    );
    check(
        "softmax axis 1 of 3",
        vec![NamedParam::new("x", arr(&[2, 3, 2], 6)), NamedParam::new("w", arr(&[2, 3, 2], 7))],
        |t, v| {
            let y = t.softmax(v[0], 1)?;
            let y = t.mul(y, v[1])?;
            Ok(t.sum(y))
        },
    );
    check(
        "layer norm",
        vec![
            NamedParam::new("x", arr(&[3, 5], 8)),
            NamedParam::new("g", arr(&[5], 9)),
            NamedParam::new("b", arr(&[5], 10)),
            NamedParam::new("w", arr(&[3, 5], 11)),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let y = t.mul(y, v[3])?;
            Ok(t.sum(y))
        },
    );
    check(
        "transpose/reshape/expand/concat/slice/mean_axis",
        vec![NamedParam::new("x", arr(&[2, 1, 3], 12)), NamedParam::new("y", arr(&[2, 2, 3], 13))],
        |t, v| {
            let e = t.expand(v[0], 1, 2)?;
            let c = t.concat(&[e, v[1]], 1)?;
            let tr = t.transpose(c, &[2, 0, 1])?;
            let r = t.reshape(tr, &[6, 4])?;
            let s = t.slice(r, 1, 1..3)?;
            let m = t.mean_axis(s, 0)?;
            let sq = t.mul(m, m)?;
            let w = t.mul(r, r)?;
            let w = t.sum(w);
            let s2 = t.sum(sq);
            t.add(s2, w)
        },
    );
    check(
        "sigmoid/clamp/log",
        vec![NamedParam::new("theta", Array::from_vec(vec![-1.0, 0.3, 2.0]))],
        |t, v| {
            let s = t.sigmoid(v[0]);
            let c = t.clamp(s, 1e-3, 1.0 - 1e-3);
            let l = t.log(c)?;
            let one_minus = t.scale(c, -1.0);
            let one_minus = t.add_const(one_minus, 1.0);
            let l2 = t.log(one_minus)?;
            let a = t.sum(l);
            let b = t.sum(l2);
            let b = t.scale(b, 0.5);
            t.sub(a, b)
        },
    );
    check(
        "cosine rows",
        vec![NamedParam::new("a", arr(&[3, 4], 14)), NamedParam::new("b", arr(&[4], 15))],
        |t, v| {
            let c = t.cosine_rows(v[0], v[1])?;
            let sq = t.mul(c, c)?;
            Ok(t.sum(sq))
        },
    );
    check(
        "masked cross entropy",
        vec![NamedParam::new("logits", arr(&[4, 6], 16))],
        |t, v| t.cross_entropy(v[0], &[2, 3, 4, 2], 2..5),
    );
}

#[test]
fn cross_entropy_rejects_targets_outside_active_range() {
    let mut t = Tape::default();
    let l = t.constant(Array::zeros(&[2, 4]));
    assert!(t.cross_entropy(l, &[0, 3], 2..4).is_err());
}

#[test]
fn cosine_rejects_zero_vectors() {
    let mut t = Tape::default();
    let a = t.constant(Array::zeros(&[1, 3]));
    let b = t.constant(Array::ones(&[3]));
    assert!(t.cosine_rows(a, b).is_err());
}

#[test]
fn first_non_finite_value_is_located() {
    let mut t = Tape::default();
    let a = t.constant(Array::from_vec(vec![1e300, 1.0]));
    let b = t.scale(a, 2.0);
    assert_eq!(t.first_non_finite(), None);
    let c = t.scale(b, 1e10);
    let _ = t.scale(c, 2.0);
    assert_eq!(t.first_non_finite(), Some((2, "Scale")));
}

#[test]
fn single_precision_overflows_where_double_does_not() {
    let mut t = Tape::new(Precision::Single);
    let a = t.constant(Array::from_vec(vec![1e30]));
    t.scale(a, 1e10);
    assert_eq!(t.first_non_finite().map(|(_, op)| op), Some("Scale"));
}
