//! Shared test helpers: central finite differences as an independent
//! gradient oracle, and a small deterministic value generator.

#![allow(dead_code)] // each integration test binary uses a subset

use mnm_core::numerics::{bind, bind_frozen, BoundParams, Graph, NodeId, ParamStore, Tensor};

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely at the same tolerance.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check analytic gradients of `build` against central finite differences
/// (step 1e-5) for every element of every parameter.
///
/// `build` must construct the full forward pass from leaf nodes it is given
/// (one per parameter, in order) and return a scalar loss node. It is called
/// once per perturbation, so it must be deterministic.
pub fn check_gradients(
    label: &str,
    params: &[(Vec<usize>, Vec<f64>)],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    tol: f64,
) {
    let eval = |data: &[(Vec<usize>, Vec<f64>)], with_grad: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = data
            .iter()
            .map(|(shape, values)| {
                let t = Tensor::new(shape.clone(), values.clone()).unwrap();
                g.leaf(if with_grad { t.with_grad() } else { t })
            })
            .collect();
        let loss = build(&mut g, &leaves);
        let loss_val = g.scalar(loss);
        if !with_grad {
            return (loss_val, None);
        }
        let grads = g.backward(loss).unwrap();
        let out = leaves
            .iter()
            .zip(data)
            .map(|(&id, (_, values))| grads.get_or_zeros(id, values.len()))
            .collect();
        (loss_val, Some(out))
    };

    let (_, analytic) = eval(params, true);
    let analytic = analytic.unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (p, (_, values)) in params.iter().enumerate() {
        for i in 0..values.len() {
            let mut plus = params.to_vec();
            plus[p].1[i] += h;
            let (lp, _) = eval(&plus, false);
            let mut minus = params.to_vec();
            minus[p].1[i] -= h;
            let (lm, _) = eval(&minus, false);
            let numeric = (lp - lm) / (2.0 * h);
            let err = rel_err(analytic[p][i], numeric);
            worst = worst.max(err);
            assert!(
                err <= tol,
                "{label}: param {p} elem {i}: analytic {} vs numeric {numeric} (rel err {err:.3e})",
                analytic[p][i]
            );
        }
    }
    let _ = worst;
}

/// Check the gradient of every parameter in a store against central finite
/// differences. `build` sees the bound parameters plus constant input leaves
/// and returns a scalar loss; it runs once per perturbed element.
pub fn check_param_gradients(
    label: &str,
    store: &mut ParamStore,
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: &dyn Fn(&mut Graph, &BoundParams, &[NodeId]) -> NodeId,
    tol: f64,
) {
    let eval = |store: &ParamStore, with_grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let bound = if with_grad {
            bind(&mut g, store)
        } else {
            bind_frozen(&mut g, store)
        };
        let leaves: Vec<NodeId> = inputs
            .iter()
            .map(|(shape, values)| g.leaf(Tensor::new(shape.clone(), values.clone()).unwrap()))
            .collect();
        let loss = build(&mut g, &bound, &leaves);
        let loss_val = g.scalar(loss);
        if !with_grad {
            return (loss_val, None);
        }
        let grads = g.backward(loss).unwrap();
        (loss_val, Some(bound.flat_grads(store, &grads)))
    };

    let (_, analytic) = eval(store, true);
    let analytic = analytic.unwrap();

    let h = 1e-5;
    let base = store.to_flat();
    for i in 0..base.len() {
        let mut flat = base.clone();
        flat[i] += h;
        store.set_flat(&flat);
        let (lp, _) = eval(store, false);
        flat[i] -= 2.0 * h;
        store.set_flat(&flat);
        let (lm, _) = eval(store, false);
        let numeric = (lp - lm) / (2.0 * h);
        let err = rel_err(analytic[i], numeric);
        assert!(
            err <= tol,
            "{label}: flat param {i}: analytic {} vs numeric {numeric} (rel err {err:.3e})",
            analytic[i]
        );
    }
    store.set_flat(&base);
}

/// Deterministic pseudo-random values in roughly [-scale, scale], cheap and
/// seedable without pulling an RNG into every test.
pub fn pseudo_values(seed: u64, len: usize, scale: f64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let unit = (state >> 11) as f64 / (1u64 << 53) as f64;
            (unit * 2.0 - 1.0) * scale
        })
        .collect()
}
