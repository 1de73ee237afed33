//! Finite-difference oracle checks for every differentiable primitive in
//! `numerics`. The oracle (central differences, step 1e-5) is computed by
//! test code that never touches the reverse pass it is checking.

mod common;

use common::{check_gradients, pseudo_values};
use mnm_core::numerics::{Graph, MultiHeadAttention, NodeId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Weighted sum with fixed coefficients; unlike a plain sum it is sensitive
/// to element permutation mistakes in backward rules.
fn weighted_loss(g: &mut Graph, x: NodeId) -> NodeId {
    let n = g.values(x).len();
    let weights = g
        .constant(g.shape(x).to_vec(), pseudo_values(999, n, 1.0))
        .unwrap();
    let prod = g.mul(x, weights).unwrap();
    g.sum_all(prod)
}

#[test]
fn linear_matches_finite_differences() {
    let params = vec![
        (vec![3, 4], pseudo_values(1, 12, 1.0)),
        (vec![4, 2], pseudo_values(2, 8, 1.0)),
        (vec![2], pseudo_values(3, 2, 0.5)),
    ];
    check_gradients(
        "linear",
        &params,
        &|g, leaves| {
            let y = g.linear(leaves[0], leaves[1], leaves[2]).unwrap();
            weighted_loss(g, y)
        },
        TOL,
    );
}

#[test]
fn matmul_transpose_matches_finite_differences() {
    let params = vec![
        (vec![2, 3], pseudo_values(4, 6, 1.0)),
        (vec![2, 3], pseudo_values(5, 6, 1.0)),
    ];
    check_gradients(
        "matmul+transpose",
        &params,
        &|g, leaves| {
            let bt = g.transpose(leaves[1]).unwrap();
            let y = g.matmul(leaves[0], bt).unwrap();
            weighted_loss(g, y)
        },
        TOL,
    );
}

#[test]
fn elementwise_chain_matches_finite_differences() {
    let params = vec![
        (vec![5], pseudo_values(6, 5, 2.0)),
        (vec![5], pseudo_values(7, 5, 2.0)),
        (vec![1], vec![0.7]),
    ];
    check_gradients(
        "elementwise chain",
        &params,
        &|g, leaves| {
            let s = g.sigmoid(leaves[0]);
            let sp = g.softplus(leaves[1]);
            let prod = g.mul(s, sp).unwrap();
            let scaled = g.mul(prod, leaves[2]).unwrap(); // scalar broadcast
            let shifted = g.offset(scaled, 0.3);
            let r = g.relu(shifted);
            let neg = g.neg(r);
            let back = g.scale(neg, -1.5);
            weighted_loss(g, back)
        },
        TOL,
    );
}

#[test]
fn softmax_matches_finite_differences() {
    let params = vec![(vec![3, 4], pseudo_values(8, 12, 3.0))];
    check_gradients(
        "softmax",
        &params,
        &|g, leaves| {
            let y = g.softmax(leaves[0], 1).unwrap();
            weighted_loss(g, y)
        },
        TOL,
    );
}

#[test]
fn layer_norm_matches_finite_differences() {
    let params = vec![
        (vec![3, 4], pseudo_values(9, 12, 2.0)),
        (vec![4], pseudo_values(10, 4, 1.0)),
        (vec![4], pseudo_values(11, 4, 0.5)),
    ];
    check_gradients(
        "layer_norm",
        &params,
        &|g, leaves| {
            let y = g.layer_norm(leaves[0], leaves[1], leaves[2], 1e-5).unwrap();
            weighted_loss(g, y)
        },
        TOL,
    );
}

#[test]
fn reductions_match_finite_differences() {
    let params = vec![(vec![3, 4], pseudo_values(12, 12, 1.5))];
    check_gradients(
        "reductions",
        &params,
        &|g, leaves| {
            let m = g.mean_rows(leaves[0]).unwrap();
            let a = g.sum_all(m);
            let b = g.mean_all(leaves[0]);
            let c = g.max_all(leaves[0]);
            let ab = g.add(a, b).unwrap();
            g.add(ab, c).unwrap()
        },
        TOL,
    );
}

#[test]
fn slicing_and_stacking_match_finite_differences() {
    let params = vec![
        (vec![3, 6], pseudo_values(13, 18, 1.0)),
        (vec![4], pseudo_values(14, 4, 1.0)),
        (vec![4], pseudo_values(15, 4, 1.0)),
    ];
    check_gradients(
        "slice/concat/gather/stack",
        &params,
        &|g, leaves| {
            let left = g.slice_cols(leaves[0], 0, 2).unwrap();
            let right = g.slice_cols(leaves[0], 2, 6).unwrap();
            let swapped = g.concat_cols(&[right, left]).unwrap();
            let picked = g.gather_rows(swapped, &[2, 0, 2]).unwrap();
            let stacked = g.stack_rows(&[leaves[1], leaves[2], leaves[1]]).unwrap();
            let flat = g.reshape(picked, vec![18]).unwrap();
            let a = weighted_loss(g, flat);
            let b = weighted_loss(g, stacked);
            g.add(a, b).unwrap()
        },
        TOL,
    );
}

#[test]
fn multi_head_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::init(&mut store, "mha", 6, 3, &mut rng).unwrap();

    let inputs = vec![
        (vec![2, 6], pseudo_values(20, 12, 1.0)), // query
        (vec![4, 6], pseudo_values(21, 24, 1.0)), // key/value
    ];
    common::check_param_gradients(
        "multi_head_attention",
        &mut store,
        &inputs,
        &|g, bound, leaves| {
            let out = mha.forward(g, bound, leaves[0], leaves[1]).unwrap();
            weighted_loss(g, out)
        },
        TOL,
    );
}

#[test]
fn attention_input_gradients_match_finite_differences() {
    // Gradients with respect to Q and K/V, with projections held constant.
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::init(&mut store, "mha", 4, 2, &mut rng).unwrap();

    let params = vec![
        (vec![3, 4], pseudo_values(22, 12, 1.0)),
        (vec![2, 4], pseudo_values(23, 8, 1.0)),
    ];
    check_gradients(
        "attention inputs",
        &params,
        &|g, leaves| {
            let bound = mnm_core::numerics::bind_frozen(g, &store);
            let out = mha.forward(g, &bound, leaves[0], leaves[1]).unwrap();
            weighted_loss(g, out)
        },
        TOL,
    );
}
