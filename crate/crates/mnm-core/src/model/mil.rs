//! Multiple-instance pooling from per-proposal malignancy probabilities to
//! an image-level score, plus breast and exam aggregation.

use crate::numerics::{BackwardOp, BoundParams, Gradients, Graph, NodeId, ParamId};
use serde::{Deserialize, Serialize};

use super::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MilScheme {
    /// 1 - prod(1 - p_k): probability at least one proposal is positive.
    #[default]
    NoisyOr,
    Max,
    Mean,
    /// Learned head on the global average pooled proposal features.
    Gap,
}

/// noisy-or over a probability vector. d/dp_i = prod_{j != i} (1 - p_j),
/// computed with prefix/suffix products.
struct NoisyOr {
    input: NodeId,
}

impl BackwardOp for NoisyOr {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let p = g.values(self.input);
        let n = p.len();
        let mut prefix = vec![1.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] * (1.0 - p[i]);
        }
        let mut suffix = vec![1.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] * (1.0 - p[i]);
        }
        let dg: Vec<f64> = (0..n).map(|i| grad[0] * prefix[i] * suffix[i + 1]).collect();
        sink.accumulate(self.input, &dg);
    }
}

pub(super) fn noisy_or(g: &mut Graph, probs: NodeId) -> NodeId {
    let prod: f64 = g.values(probs).iter().map(|&p| 1.0 - p).product();
    let needs = g.needs_grad(probs);
    g.push_node(
        vec![],
        vec![1.0 - prod],
        needs,
        Some(Box::new(NoisyOr { input: probs })),
    )
}

/// Pool per-proposal probabilities (and, for the GAP scheme, features) into
/// a scalar image score in [0, 1].
pub(super) fn image_pool(
    g: &mut Graph,
    bound: &BoundParams,
    probs: NodeId,
    features: NodeId,
    scheme: MilScheme,
    gap_head: (ParamId, ParamId),
) -> Result<NodeId> {
    Ok(match scheme {
        MilScheme::NoisyOr => noisy_or(g, probs),
        MilScheme::Max => g.max_all(probs),
        MilScheme::Mean => g.mean_all(probs),
        MilScheme::Gap => {
            let pooled = g.mean_rows(features)?;
            let d = g.values(pooled).len();
            let row = g.reshape(pooled, vec![1, d])?;
            let logit = g.linear(row, bound.node(gap_head.0), bound.node(gap_head.1))?;
            let logit = g.reshape(logit, vec![])?;
            g.sigmoid(logit)
        }
    })
}

/// Breast score is the mean of the two view scores.
pub(super) fn breast_score(g: &mut Graph, cc: NodeId, mlo: NodeId) -> Result<NodeId> {
    let sum = g.add(cc, mlo)?;
    Ok(g.scale(sum, 0.5))
}

/// Exam score: max over the exam's breast scores.
pub fn exam_score(breast_scores: &[f64]) -> f64 {
    breast_scores.iter().copied().fold(f64::MIN, f64::max)
}

#[cfg(test)]
mod tests {
    use crate::numerics::Tensor;

    use super::*;

    fn pool_values(p: Vec<f64>) -> f64 {
        let mut g = Graph::new();
        let n = p.len();
        let probs = g.leaf(Tensor::new(vec![n], p).unwrap());
        let s = noisy_or(&mut g, probs);
        g.scalar(s)
    }

    #[test]
    fn noisy_or_identities() {
        assert_eq!(pool_values(vec![0.0, 0.0, 0.0]), 0.0);
        assert_eq!(pool_values(vec![0.3, 1.0, 0.2]), 1.0);
        assert!((pool_values(vec![0.5, 0.5]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn noisy_or_gradient_is_leave_one_out_product() {
        let mut g = Graph::new();
        let probs = g.leaf(Tensor::new(vec![3], vec![0.2, 0.5, 0.9]).unwrap().with_grad());
        let s = noisy_or(&mut g, probs);
        let grads = g.backward(s).unwrap();
        let d = grads.get(probs).unwrap();
        assert!((d[0] - 0.5 * 0.1).abs() < 1e-12);
        assert!((d[1] - 0.8 * 0.1).abs() < 1e-12);
        assert!((d[2] - 0.8 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn exam_score_is_max_over_breasts() {
        assert_eq!(exam_score(&[0.2, 0.9]), 0.9);
        assert_eq!(exam_score(&[0.4]), 0.4);
    }
}
