//! One refinement stage: self-attention, cross-view attention, dynamic
//! instance interaction against RoI features, feed-forward block, dual
//! classification heads and box regression.

use rand::Rng;

use crate::geometry::{BBox, DELTA_EXTENT_CLAMP};
use crate::numerics::{
    init::xavier_uniform, BackwardOp, BoundParams, Gradients, Graph, MultiHeadAttention, NodeId,
    ParamId, ParamStore,
};

use super::roi::roi_align;
use super::{ModelConfig, Result, LN_EPS};

/// Decode `[n, 4]` regression deltas against fixed anchor boxes into
/// `(x1, y1, x2, y2)` rows. Extent growth is clamped to `e^{±4}`; the clamp
/// zeroes the gradient outside the window.
struct BoxDecode {
    deltas: NodeId,
    anchors: Vec<BBox>,
}

impl BackwardOp for BoxDecode {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let dv = g.values(self.deltas);
        let mut dd = vec![0.0; dv.len()];
        for (k, anchor) in self.anchors.iter().enumerate() {
            let (aw, ah) = (anchor.width(), anchor.height());
            let dw = dv[k * 4 + 2];
            let dh = dv[k * 4 + 3];
            let w = aw * dw.clamp(-DELTA_EXTENT_CLAMP, DELTA_EXTENT_CLAMP).exp();
            let h = ah * dh.clamp(-DELTA_EXTENT_CLAMP, DELTA_EXTENT_CLAMP).exp();
            let (gx1, gy1, gx2, gy2) = (
                grad[k * 4],
                grad[k * 4 + 1],
                grad[k * 4 + 2],
                grad[k * 4 + 3],
            );
            dd[k * 4] = (gx1 + gx2) * aw;
            dd[k * 4 + 1] = (gy1 + gy2) * ah;
            if dw.abs() < DELTA_EXTENT_CLAMP {
                dd[k * 4 + 2] = 0.5 * (gx2 - gx1) * w;
            }
            if dh.abs() < DELTA_EXTENT_CLAMP {
                dd[k * 4 + 3] = 0.5 * (gy2 - gy1) * h;
            }
        }
        sink.accumulate(self.deltas, &dd);
    }
}

pub(super) fn box_decode(g: &mut Graph, deltas: NodeId, anchors: &[BBox]) -> Result<NodeId> {
    let dv = g.values(deltas);
    debug_assert_eq!(dv.len(), anchors.len() * 4);
    let mut out = vec![0.0; dv.len()];
    for (k, anchor) in anchors.iter().enumerate() {
        let d = &dv[k * 4..(k + 1) * 4];
        let b = crate::geometry::apply_delta(anchor, &[d[0], d[1], d[2], d[3]]);
        out[k * 4] = b.x1;
        out[k * 4 + 1] = b.y1;
        out[k * 4 + 2] = b.x2;
        out[k * 4 + 3] = b.y2;
    }
    let needs = g.needs_grad(deltas);
    Ok(g.push_node(
        vec![anchors.len(), 4],
        out,
        needs,
        Some(Box::new(BoxDecode {
            deltas,
            anchors: anchors.to_vec(),
        })),
    ))
}

struct LnParams {
    gain: ParamId,
    bias: ParamId,
}

fn ln_params(store: &mut ParamStore, name: &str, dim: usize) -> LnParams {
    LnParams {
        gain: store.add(format!("{name}.gain"), vec![dim], vec![1.0; dim]),
        bias: store.add(format!("{name}.bias"), vec![dim], vec![0.0; dim]),
    }
}

struct LinearParams {
    w: ParamId,
    b: ParamId,
}

fn linear_params<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> LinearParams {
    LinearParams {
        w: store.add(
            format!("{name}.weight"),
            vec![din, dout],
            xavier_uniform(rng, din, dout, din * dout),
        ),
        b: store.add(format!("{name}.bias"), vec![dout], vec![0.0; dout]),
    }
}

/// Everything one cascade stage owns. Both views share the same parameters;
/// the cross-attention module serves both directions.
pub(super) struct StageParams {
    self_attn: MultiHeadAttention,
    self_ln: LnParams,
    cross_attn: MultiHeadAttention,
    cross_ln: LnParams,
    dyn_gen: LinearParams,
    dyn_ln1: LnParams,
    dyn_ln2: LnParams,
    dyn_out: LinearParams,
    inst_ln: LnParams,
    ffn1: LinearParams,
    ffn2: LinearParams,
    ffn_ln: LnParams,
    reg1: LinearParams,
    reg2: LinearParams,
    obj: LinearParams,
    mal: LinearParams,
}

/// Bias applied to the objectness head at init; keeps early foreground
/// probability low so the focal losses start stable.
const OBJECTNESS_PRIOR_BIAS: f64 = -2.0;

impl StageParams {
    pub(super) fn init<R: Rng>(
        store: &mut ParamStore,
        stage: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<StageParams> {
        let d = cfg.feature_dim;
        let dr = cfg.dynconv_bottleneck;
        let s2 = cfg.roi_size * cfg.roi_size;
        let p = format!("stage{stage}");
        let self_attn = MultiHeadAttention::init(store, &format!("{p}.self_attn"), d, cfg.heads, rng)?;
        let self_ln = ln_params(store, &format!("{p}.self_ln"), d);
        let cross_attn =
            MultiHeadAttention::init(store, &format!("{p}.cross_attn"), d, cfg.heads, rng)?;
        let cross_ln = ln_params(store, &format!("{p}.cross_ln"), d);
        let dyn_gen = linear_params(store, &format!("{p}.dyn_gen"), d, 2 * d * dr, rng);
        let dyn_ln1 = ln_params(store, &format!("{p}.dyn_ln1"), dr);
        let dyn_ln2 = ln_params(store, &format!("{p}.dyn_ln2"), d);
        let dyn_out = linear_params(store, &format!("{p}.dyn_out"), s2 * d, d, rng);
        let inst_ln = ln_params(store, &format!("{p}.inst_ln"), d);
        let ffn1 = linear_params(store, &format!("{p}.ffn1"), d, 2 * d, rng);
        let ffn2 = linear_params(store, &format!("{p}.ffn2"), 2 * d, d, rng);
        let ffn_ln = ln_params(store, &format!("{p}.ffn_ln"), d);
        let reg1 = linear_params(store, &format!("{p}.reg1"), d, d, rng);
        // zero-initialized final regression keeps boxes at their anchors
        // until training moves them
        let reg2 = LinearParams {
            w: store.add(format!("{p}.reg2.weight"), vec![d, 4], vec![0.0; d * 4]),
            b: store.add(format!("{p}.reg2.bias"), vec![4], vec![0.0; 4]),
        };
        let obj = LinearParams {
            w: store.add(
                format!("{p}.obj.weight"),
                vec![d, 1],
                xavier_uniform(rng, d, 1, d),
            ),
            b: store.add(
                format!("{p}.obj.bias"),
                vec![1],
                vec![OBJECTNESS_PRIOR_BIAS],
            ),
        };
        let mal = linear_params(store, &format!("{p}.mal"), d, 1, rng);
        Ok(StageParams {
            self_attn,
            self_ln,
            cross_attn,
            cross_ln,
            dyn_gen,
            dyn_ln1,
            dyn_ln2,
            dyn_out,
            inst_ln,
            ffn1,
            ffn2,
            ffn_ln,
            reg1,
            reg2,
            obj,
            mal,
        })
    }

    fn residual_norm<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        ln: &LnParams,
        h: NodeId,
        update: NodeId,
        dropout: f64,
        rng: &mut R,
    ) -> Result<NodeId> {
        let dropped = g.dropout(update, dropout, rng);
        let sum = g.add(h, dropped)?;
        Ok(g.layer_norm(sum, bound.node(ln.gain), bound.node(ln.bias), LN_EPS)?)
    }

    pub(super) fn self_attention<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h: NodeId,
        dropout: f64,
        rng: &mut R,
    ) -> Result<NodeId> {
        let attn = self.self_attn.forward(g, bound, h, h)?;
        self.residual_norm(g, bound, &self.self_ln, h, attn, dropout, rng)
    }

    /// Cross-view enhancement of both views in parallel: each view queries
    /// the other's pre-update features through the shared attention module.
    pub(super) fn cross_view_attention<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h_cc: NodeId,
        h_mlo: NodeId,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(NodeId, NodeId)> {
        let a_cc = self.cross_attn.forward(g, bound, h_cc, h_mlo)?;
        let a_mlo = self.cross_attn.forward(g, bound, h_mlo, h_cc)?;
        let new_cc = self.residual_norm(g, bound, &self.cross_ln, h_cc, a_cc, dropout, rng)?;
        let new_mlo = self.residual_norm(g, bound, &self.cross_ln, h_mlo, a_mlo, dropout, rng)?;
        Ok((new_cc, new_mlo))
    }

    /// Proposal-conditioned dynamic interaction: the proposal feature
    /// generates two weight blocks that the RoI features are passed through,
    /// then the result is flattened and projected back to the feature dim.
    pub(super) fn dynamic_conv(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        pro_feature: NodeId,
        roi_features: NodeId,
        cfg: &ModelConfig,
    ) -> Result<NodeId> {
        let d = cfg.feature_dim;
        let dr = cfg.dynconv_bottleneck;
        let params = g.linear(pro_feature, bound.node(self.dyn_gen.w), bound.node(self.dyn_gen.b))?;
        let w1_flat = g.slice_cols(params, 0, d * dr)?;
        let w1 = g.reshape(w1_flat, vec![d, dr])?;
        let w2_flat = g.slice_cols(params, d * dr, 2 * d * dr)?;
        let w2 = g.reshape(w2_flat, vec![dr, d])?;

        let x = g.matmul(roi_features, w1)?;
        let x = g.layer_norm(x, bound.node(self.dyn_ln1.gain), bound.node(self.dyn_ln1.bias), LN_EPS)?;
        let x = g.relu(x);
        let x = g.matmul(x, w2)?;
        let x = g.layer_norm(x, bound.node(self.dyn_ln2.gain), bound.node(self.dyn_ln2.bias), LN_EPS)?;
        let x = g.relu(x);
        let s2 = g.shape(roi_features)[0];
        let flat = g.reshape(x, vec![1, s2 * d])?;
        let out = g.linear(flat, bound.node(self.dyn_out.w), bound.node(self.dyn_out.b))?;
        g.reshape(out, vec![d]).map_err(Into::into)
    }

    /// RoI crop + dynamic conv for every proposal, residual + feed-forward.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn instance_interaction<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h: NodeId,
        feature_map: NodeId,
        boxes: &[BBox],
        cfg: &ModelConfig,
        dropout: f64,
        rng: &mut R,
    ) -> Result<NodeId> {
        let mut per_proposal = Vec::with_capacity(boxes.len());
        for (k, bbox) in boxes.iter().enumerate() {
            let roi = roi_align(g, feature_map, bbox, cfg.roi_size, 8.0)?;
            let pro_row = g.gather_rows(h, &[k])?;
            per_proposal.push(self.dynamic_conv(g, bound, pro_row, roi, cfg)?);
        }
        let update = g.stack_rows(&per_proposal)?;
        let h = self.residual_norm(g, bound, &self.inst_ln, h, update, dropout, rng)?;

        let f = g.linear(h, bound.node(self.ffn1.w), bound.node(self.ffn1.b))?;
        let f = g.relu(f);
        let f = g.linear(f, bound.node(self.ffn2.w), bound.node(self.ffn2.b))?;
        self.residual_norm(g, bound, &self.ffn_ln, h, f, dropout, rng)
    }

    /// Dual classification: objectness from a linear head; malignancy is the
    /// objectness minus a strictly positive softplus margin, so a proposal
    /// can only look malignant if it already looks like a finding.
    pub(super) fn dual_classify(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h: NodeId,
        dual_heads: bool,
    ) -> Result<(NodeId, NodeId)> {
        let n = g.shape(h)[0];
        let obj2d = g.linear(h, bound.node(self.obj.w), bound.node(self.obj.b))?;
        let obj = g.reshape(obj2d, vec![n])?;
        if !dual_heads {
            return Ok((obj, obj));
        }
        let margin2d = g.linear(h, bound.node(self.mal.w), bound.node(self.mal.b))?;
        let margin = g.reshape(margin2d, vec![n])?;
        let softplus = g.softplus(margin);
        let mal = g.sub(obj, softplus)?;
        Ok((obj, mal))
    }

    /// Regression deltas decoded against the incoming boxes. Returns the
    /// differentiable `[n, 4]` tensor and the detached, clipped geometry
    /// used for the next crop.
    pub(super) fn regress(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h: NodeId,
        anchors: &[BBox],
        img_w: f64,
        img_h: f64,
    ) -> Result<(NodeId, Vec<BBox>)> {
        let hid = g.linear(h, bound.node(self.reg1.w), bound.node(self.reg1.b))?;
        let hid = g.relu(hid);
        let deltas = g.linear(hid, bound.node(self.reg2.w), bound.node(self.reg2.b))?;
        let decoded = box_decode(g, deltas, anchors)?;
        let values = g.values(decoded);
        let boxes = anchors
            .iter()
            .enumerate()
            .map(|(k, _)| {
                let v = &values[k * 4..(k + 1) * 4];
                BBox {
                    x1: v[0],
                    y1: v[1],
                    x2: v[2],
                    y2: v[3],
                }
                .clip(img_w, img_h, 1.0)
            })
            .collect();
        Ok((decoded, boxes))
    }
}

#[cfg(test)]
mod tests {
    use crate::numerics::Tensor;

    use super::*;

    #[test]
    fn box_decode_matches_apply_delta() {
        let anchors = vec![
            BBox::new(10.0, 10.0, 30.0, 26.0).unwrap(),
            BBox::new(0.0, 0.0, 64.0, 64.0).unwrap(),
        ];
        let deltas = vec![0.1, -0.2, 0.3, -0.1, 0.0, 0.0, 0.0, 0.0];
        let mut g = Graph::new();
        let d = g.leaf(Tensor::new(vec![2, 4], deltas.clone()).unwrap());
        let out = box_decode(&mut g, d, &anchors).unwrap();
        for k in 0..2 {
            let expect = crate::geometry::apply_delta(
                &anchors[k],
                &[
                    deltas[k * 4],
                    deltas[k * 4 + 1],
                    deltas[k * 4 + 2],
                    deltas[k * 4 + 3],
                ],
            );
            let got = &g.values(out)[k * 4..(k + 1) * 4];
            assert!((got[0] - expect.x1).abs() < 1e-12);
            assert!((got[3] - expect.y2).abs() < 1e-12);
        }
        // zero deltas reproduce the anchor exactly
        assert_eq!(&g.values(out)[4..8], &[0.0, 0.0, 64.0, 64.0]);
    }
}
