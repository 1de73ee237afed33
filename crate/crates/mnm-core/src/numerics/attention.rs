//! Multi-head scaled dot-product attention, composed from recorded
//! primitives so the reverse pass comes for free.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::init::xavier_uniform;
use super::params::{BoundParams, ParamId, ParamStore};
use super::{NumericsError, Result};

/// One attention instance owning its projection parameters. Query and
/// key/value inputs are `[n, dim]` and `[m, dim]`; the output is `[n, dim]`.
pub struct MultiHeadAttention {
    dim: usize,
    heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::Config {
                op: "multi_head_attention",
                reason: format!("dim {dim} not divisible by heads {heads}"),
            });
        }
        let mut proj = |store: &mut ParamStore, name: &str| {
            let w = store.add(
                format!("{prefix}.{name}.weight"),
                vec![dim, dim],
                xavier_uniform(rng, dim, dim, dim * dim),
            );
            let b = store.add(format!("{prefix}.{name}.bias"), vec![dim], vec![0.0; dim]);
            (w, b)
        };
        let (wq, bq) = proj(store, "q");
        let (wk, bk) = proj(store, "k");
        let (wv, bv) = proj(store, "v");
        let (wo, bo) = proj(store, "out");
        Ok(MultiHeadAttention {
            dim,
            heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        query: NodeId,
        keyval: NodeId,
    ) -> Result<NodeId> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(keyval).to_vec();
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || ks[1] != self.dim {
            return Err(NumericsError::ShapeMismatch {
                op: "multi_head_attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let q = g.linear(query, params.node(self.wq), params.node(self.bq))?;
        let k = g.linear(keyval, params.node(self.wk), params.node(self.bk))?;
        let v = g.linear(keyval, params.node(self.wv), params.node(self.bv))?;

        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (from, to) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, from, to)?;
            let kh = g.slice_cols(k, from, to)?;
            let vh = g.slice_cols(v, from, to)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale);
            let weights = g.softmax(scaled, 1)?;
            head_outputs.push(g.matmul(weights, vh)?);
        }
        let merged = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            g.concat_cols(&head_outputs)?
        };
        g.linear(merged, params.node(self.wo), params.node(self.bo))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::params::{bind, ParamStore};
    use super::super::Tensor;
    use super::*;

    fn identity_projections(store: &mut ParamStore, mha: &MultiHeadAttention, dim: usize) {
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        for w in [mha.wq, mha.wk, mha.wv, mha.wo] {
            store.values_mut(w).copy_from_slice(&eye);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::init(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn hand_computed_single_head() {
        // identity projections, Q=[[1,0]], K=V=[[1,0],[0,1]]
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 2, 1, &mut rng).unwrap();
        identity_projections(&mut store, &mha, 2);

        let mut g = Graph::new();
        let params = bind(&mut g, &store);
        let q = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let kv = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = mha.forward(&mut g, &params, q, kv).unwrap();

        // attention weights = softmax([1/sqrt(2), 0])
        let s = 1.0 / 2.0f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let w1 = 1.0 / (s.exp() + 1.0);
        let v = g.values(out);
        assert!((v[0] - w0).abs() < 1e-12, "{} vs {w0}", v[0]);
        assert!((v[1] - w1).abs() < 1e-12, "{} vs {w1}", v[1]);
    }

    #[test]
    fn identical_value_rows_collapse() {
        // With identity projections and all V rows equal, every output row
        // is that shared row (a convex combination of identical rows).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 4, 2, &mut rng).unwrap();
        identity_projections(&mut store, &mha, 4);

        let mut g = Graph::new();
        let params = bind(&mut g, &store);
        let q = g.leaf(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let row = [0.3, -1.0, 0.7, 2.0];
        let kv = g.leaf(Tensor::new(vec![2, 4], row.repeat(2)).unwrap());
        let out = mha.forward(&mut g, &params, q, kv).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((g.values(out)[r * 4 + c] - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_value_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 8, 4, &mut rng).unwrap();

        let qv: Vec<f64> = (0..2 * 8).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.2).collect();
        let kvv: Vec<f64> = (0..5 * 8).map(|i| ((i * 11 % 17) as f64 - 8.0) * 0.1).collect();

        let run = |perm: &[usize], store: &ParamStore| -> Vec<f64> {
            let mut g = Graph::new();
            let params = bind(&mut g, store);
            let q = g.leaf(Tensor::new(vec![2, 8], qv.clone()).unwrap());
            let mut permuted = vec![0.0; kvv.len()];
            for (dst, &src) in perm.iter().enumerate() {
                permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&kvv[src * 8..(src + 1) * 8]);
            }
            let kv = g.leaf(Tensor::new(vec![5, 8], permuted).unwrap());
            let out = mha.forward(&mut g, &params, q, kv).unwrap();
            g.values(out).to_vec()
        };

        let base = run(&[0, 1, 2, 3, 4], &store);
        let shuffled = run(&[3, 0, 4, 2, 1], &store);
        for (a, b) in base.iter().zip(&shuffled) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
