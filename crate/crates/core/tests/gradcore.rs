use diffusion_unlearn::gradcore::{grad_check, Activation, Array, ParamStore, Tape};
use proptest::prelude::*;

fn array(rows: usize, cols: usize, data: &[f64]) -> Array {
    Array::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap()
}

prop_compose! {
    fn layer_case()(n in 1usize..5, m in 1usize..5, k in 1usize..5, act in 0usize..3)
        (vals in prop::collection::vec(-2.0f64..2.0, n * m + m * k + k + n * k),
         n in Just(n), m in Just(m), k in Just(k), act in Just(act))
        -> (usize, usize, usize, usize, Vec<f64>) {
        (n, m, k, act, vals)
    }
}

fn split(n: usize, m: usize, k: usize, vals: &[f64]) -> (Array, ParamStore, Array) {
    let x = array(n, m, vals);
    let mut params = ParamStore::new();
    params.insert("w", array(m, k, &vals[n * m..])).unwrap();
    params.insert("b", array(1, k, &vals[n * m + m * k..])).unwrap();
    let target = array(n, k, &vals[n * m + m * k + k..]);
    (x, params, target)
}

fn kind(i: usize) -> Activation {
    [Activation::Silu, Activation::Tanh, Activation::Relu][i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn affine_activation_mse_matches_finite_difference((n, m, k, act, vals) in layer_case()) {
        let (x, params, target) = split(n, m, k, &vals);
        let loss = |tape: &mut Tape, p: &ParamStore| {
            let xi = tape.leaf(x.clone());
            let w = tape.param_named(p, "w")?;
            let b = tape.param_named(p, "b")?;
            let h = tape.matmul(xi, w)?;
            let h = tape.add(h, b)?;
            let h = tape.activation(h, kind(act))?;
            let h = tape.scale(h, 1.5)?;
            tape.mse_loss(h, &target, None)
        };
        // relu has a kink at 0; skip the rare draws that land within epsilon of it
        if act == 2 {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let w = tape.param_named(&params, "w").unwrap();
            let b = tape.param_named(&params, "b").unwrap();
            let h = tape.matmul(xi, w).unwrap();
            let h = tape.add(h, b).unwrap();
            prop_assume!(tape.value(h).data().iter().all(|v| v.abs() > 1e-3));
        }
        let err = grad_check(loss, &params, 1e-5, 1000, 0).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_difference(
        (n, m, k, _act, vals) in layer_case(),
        seed in 0usize..1000,
    ) {
        prop_assume!(k >= 2);
        let (x, params, _) = split(n, m, k, &vals);
        let labels: Vec<usize> = (0..n).map(|i| (i + seed) % k).collect();
        let loss = |tape: &mut Tape, p: &ParamStore| {
            let xi = tape.leaf(x.clone());
            let w = tape.param_named(p, "w")?;
            let b = tape.param_named(p, "b")?;
            let h = tape.matmul(xi, w)?;
            let h = tape.add(h, b)?;
            tape.softmax_cross_entropy(h, &labels)
        };
        let err = grad_check(loss, &params, 1e-5, 1000, 1).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gather_concat_mul_sum_match_finite_difference(
        vals in prop::collection::vec(-2.0f64..2.0, 24),
        ids in prop::collection::vec(0usize..3, 1..5),
    ) {
        let mut params = ParamStore::new();
        params.insert("table", array(3, 2, &vals)).unwrap();
        params.insert("other", array(ids.len(), 1, &vals[6..])).unwrap();
        let gate = array(ids.len(), 3, &vals[12..]);
        let loss = |tape: &mut Tape, p: &ParamStore| {
            let t = tape.param_named(p, "table")?;
            let o = tape.param_named(p, "other")?;
            let rows = tape.gather_rows(t, &ids)?;
            let cat = tape.concat_cols(&[rows, o])?;
            let g = tape.leaf(gate.clone());
            let prod = tape.mul(cat, g)?;
            let sq = tape.mul(prod, prod)?;
            tape.sum(sq)
        };
        let err = grad_check(loss, &params, 1e-5, 1000, 2).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients((n, m, k, act, vals) in layer_case()) {
        let (x, params, target) = split(n, m, k, &vals);
        let build = |tape: &mut Tape| {
            let xi = tape.leaf(x.clone());
            let w = tape.param_named(&params, "w").unwrap();
            let b = tape.param_named(&params, "b").unwrap();
            let h = tape.matmul(xi, w).unwrap();
            let h = tape.add(h, b).unwrap();
            let h = tape.activation(h, kind(act)).unwrap();
            let first = tape.mse_loss(h, &target, None).unwrap();
            let sq = tape.mul(h, h).unwrap();
            let second = tape.sum(sq).unwrap();
            (first, second)
        };
        let mut tape = Tape::new();
        let (first, second) = build(&mut tape);
        let total = tape.add(first, second).unwrap();
        let joint = tape.param_grads(total, &params).unwrap();
        let mut separate = tape.param_grads(first, &params).unwrap();
        separate.add_assign(&tape.param_grads(second, &params).unwrap());
        for (a, b) in joint.iter().zip(separate.iter()) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn evaluation_is_bit_deterministic((n, m, k, act, vals) in layer_case()) {
        let (x, params, target) = split(n, m, k, &vals);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let w = tape.param_named(&params, "w").unwrap();
            let h = tape.matmul(xi, w).unwrap();
            let h = tape.activation(h, kind(act)).unwrap();
            let l = tape.mse_loss(h, &target, None).unwrap();
            let g = tape.param_grads(l, &params).unwrap();
            let bits: Vec<u64> = g.iter().flat_map(|a| a.data().iter().map(|v| v.to_bits())).collect();
            (tape.value(l).data()[0].to_bits(), bits)
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn quadratic_loss_is_checked_near_exactly() {
    let mut params = ParamStore::new();
    params.insert("p", Array::from_rows(&[vec![0.3, -1.2, 2.5]]).unwrap()).unwrap();
    let err = grad_check(
        |tape, p| {
            let v = tape.param_named(p, "p")?;
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &params,
        1e-4,
        10,
        0,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn constant_loss_has_zero_error() {
    let mut params = ParamStore::new();
    params.insert("p", Array::scalar(1.0)).unwrap();
    let err = grad_check(
        |tape, _| {
            let c = tape.leaf(Array::scalar(3.0));
            tape.sum(c)
        },
        &params,
        1e-4,
        10,
        0,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_large_epsilon() {
    let params = ParamStore::new();
    let r = grad_check(|tape, _| Ok(tape.leaf(Array::scalar(0.0))), &params, 1e-2, 1, 0);
    assert!(r.is_err());
}
