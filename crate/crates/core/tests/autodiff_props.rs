use niser::{finite_diff_check_with, Graph, Stencil, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

/// Moderate entries, so tanh/sigmoid stay out of saturation where true
/// gradients fall below finite-difference resolution.
fn moderate(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn sized() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in sized().prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v).unwrap();
        let out = g.value(s);
        for r in 0..out.rows() {
            let total: f64 = out.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(out.row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn normalized_rows_are_unit(x in sized().prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assume!(x.row_norms().iter().all(|&n| n > 1e-6));
        let mut g = Graph::new();
        let v = g.constant(x);
        let n = g.l2_normalize(v, false).unwrap();
        prop_assert!(g.value(n).row_norms().iter().all(|&n| (n - 1.0).abs() < 1e-9));
    }

    #[test]
    fn composite_gradients_match_finite_differences(
        (a, b, c) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(r, k, c)| (moderate(r, k), moderate(k, c), moderate(r, c)))
    ) {
        let mut g = Graph::new();
        let (a, b, c) = (g.param(a), g.param(b), g.param(c));
        let ab = g.matmul(a, b).unwrap();
        let t = g.tanh(ab).unwrap();
        let s = g.sigmoid(c).unwrap();
        let m = g.mul(t, s).unwrap();
        let e = g.softmax(m).unwrap();
        let n = g.l2_normalize(e, false).unwrap();
        // uneven weights: a plain sum of a normalized softmax has exact-zero gradients
        let shape = g.shape(n).to_vec();
        let w = g.constant(Tensor::from_fn(shape, |i| 1.0 + 0.37 * i as f64));
        let weighted = g.mul(n, w).unwrap();
        let loss = g.sum(weighted).unwrap();
        let check = finite_diff_check_with(&mut g, loss, &[a, b, c], 1e-3, Stencil::Richardson).unwrap();
        prop_assert!(check.max_rel_err < 1e-4, "{:?}", check.per_leaf);
    }

    #[test]
    fn backward_is_deterministic(x in matrix(3, 4), w in matrix(4, 2)) {
        let run = || {
            let mut g = Graph::new();
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let y = g.matmul(xv, wv).unwrap();
            let y = g.tanh(y).unwrap();
            let loss = g.mean(y).unwrap();
            let grads = g.backward(loss).unwrap();
            (grads.get(xv), grads.get(wv))
        };
        prop_assert_eq!(run(), run());
    }
}
