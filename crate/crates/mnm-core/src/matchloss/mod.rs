//! Set-prediction training objective: Hungarian assignment on a focal +
//! GIoU + L1 cost, focal classification losses for both heads across all
//! stages, box regression losses on matched pairs, MIL cross-entropies at
//! image and breast level, and the indicator-gated total.

pub mod hungarian;

pub use hungarian::{hungarian, MatchError, MatchResult};

use serde::{Deserialize, Serialize};

use crate::geometry::{giou, BBox};
use crate::model::{BreastForward, ComponentFlags, HeadOutput};
use crate::numerics::{BackwardOp, Gradients, Graph, NodeId};
use crate::numerics::{stable_sigmoid, stable_softplus};

/// Loss weights and behavior switches. Weights default to the lesion-loss
/// combination 1*malignant + 1*objectness + 2*giou + 5*l1 plus 0.5 image
/// and 0.5 breast cross-entropies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub giou_weight: f64,
    pub l1_weight: f64,
    pub image_weight: f64,
    pub breast_weight: f64,
    /// Recompute the assignment at every stage instead of reusing the
    /// final-stage matching.
    pub rematch_per_stage: bool,
    /// Restrict the malignancy focal loss to matched proposals only.
    pub malignancy_matched_only: bool,
    /// Apply the image/breast cross-entropies to every stage's pooled score
    /// instead of the final stage only.
    pub mil_deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            giou_weight: 2.0,
            l1_weight: 5.0,
            image_weight: 0.5,
            breast_weight: 0.5,
            rematch_per_stage: false,
            malignancy_matched_only: false,
            mil_deep_supervision: false,
        }
    }
}

/// Unweighted loss components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub malignant: f64,
    pub objectness: f64,
    pub giou: f64,
    pub l1: f64,
    pub image: f64,
    pub breast: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "iteration,malignant,objectness,giou,l1,image,breast,total"
    }

    pub fn csv_row(&self, iteration: usize) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{}",
            self.malignant, self.objectness, self.giou, self.l1, self.image, self.breast, self.total
        )
    }
}

/// Binary focal loss on a logit: `-alpha_t (1 - p_t)^gamma log p_t` with
/// `p = sigmoid(logit)`. Stable for |logit| well beyond 50.
pub fn focal_loss(logit: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    debug_assert!(target == 0.0 || target == 1.0);
    if target == 1.0 {
        let q = stable_sigmoid(-logit); // 1 - p
        alpha * q.powf(gamma) * stable_softplus(-logit)
    } else {
        let p = stable_sigmoid(logit);
        (1.0 - alpha) * p.powf(gamma) * stable_softplus(logit)
    }
}

/// d focal / d logit, matching [`focal_loss`].
fn focal_grad(logit: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = stable_sigmoid(logit);
    let q = stable_sigmoid(-logit);
    if target == 1.0 {
        -alpha * q.powf(gamma) * (gamma * p * stable_softplus(-logit) + q)
    } else {
        (1.0 - alpha) * p.powf(gamma) * (gamma * q * stable_softplus(logit) + p)
    }
}

struct FocalVec {
    logits: NodeId,
    targets: Vec<f64>,
    alpha: f64,
    gamma: f64,
}

impl BackwardOp for FocalVec {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let lv = g.values(self.logits);
        let dg: Vec<f64> = lv
            .iter()
            .zip(&self.targets)
            .zip(grad)
            .map(|((&x, &t), gv)| gv * focal_grad(x, t, self.alpha, self.gamma))
            .collect();
        sink.accumulate(self.logits, &dg);
    }
}

/// Elementwise focal loss over a logit vector.
fn focal_vec(g: &mut Graph, logits: NodeId, targets: Vec<f64>, alpha: f64, gamma: f64) -> NodeId {
    debug_assert_eq!(g.values(logits).len(), targets.len());
    let out: Vec<f64> = g
        .values(logits)
        .iter()
        .zip(&targets)
        .map(|(&x, &t)| focal_loss(x, t, alpha, gamma))
        .collect();
    let shape = g.shape(logits).to_vec();
    let needs = g.needs_grad(logits);
    g.push_node(
        shape,
        out,
        needs,
        Some(Box::new(FocalVec {
            logits,
            targets,
            alpha,
            gamma,
        })),
    )
}

/// Binary cross-entropy on a probability (not a logit), clamped away from
/// the boundaries for stability.
struct BceProb {
    prob: NodeId,
    target: f64,
}

const BCE_CLAMP: f64 = 1e-12;

impl BackwardOp for BceProb {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let p = g.values(self.prob)[0].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let d = (p - self.target) / (p * (1.0 - p));
        sink.accumulate(self.prob, &[grad[0] * d]);
    }
}

/// `-(y ln p + (1-y) ln(1-p))` for a scalar probability node.
pub fn bce_prob(g: &mut Graph, prob: NodeId, target: f64) -> NodeId {
    let p = g.values(prob)[0].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let needs = g.needs_grad(prob);
    g.push_node(
        vec![],
        vec![loss],
        needs,
        Some(Box::new(BceProb { prob, target })),
    )
}

/// Sum of (1 - GIoU) between selected rows of a `[n, 4]` box tensor and
/// fixed targets, differentiable in the predicted coordinates.
struct GiouLossOp {
    boxes: NodeId,
    pairs: Vec<(usize, BBox)>,
}

impl GiouLossOp {
    /// Value and gradient of giou(pred, gt) in the four pred coordinates.
    fn giou_with_grad(p: &[f64], gt: &BBox) -> (f64, [f64; 4]) {
        let (px1, py1, px2, py2) = (p[0], p[1], p[2], p[3]);
        let (gx1, gy1, gx2, gy2) = (gt.x1, gt.y1, gt.x2, gt.y2);
        let iw = px2.min(gx2) - px1.max(gx1);
        let ih = py2.min(gy2) - py1.max(gy1);
        let overlap = iw > 0.0 && ih > 0.0;
        let inter = if overlap { iw * ih } else { 0.0 };
        let ap = (px2 - px1) * (py2 - py1);
        let ag = gt.area();
        let union = ap + ag - inter;
        let ew = px2.max(gx2) - px1.min(gx1);
        let eh = py2.max(gy2) - py1.min(gy1);
        let enc = ew * eh;
        let value = inter / union - (enc - union) / enc;

        // dI, dAp, dE in the order (x1, y1, x2, y2)
        let di = if overlap {
            [
                if px1 > gx1 { -ih } else { 0.0 },
                if py1 > gy1 { -iw } else { 0.0 },
                if px2 < gx2 { ih } else { 0.0 },
                if py2 < gy2 { iw } else { 0.0 },
            ]
        } else {
            [0.0; 4]
        };
        let dap = [-(py2 - py1), -(px2 - px1), py2 - py1, px2 - px1];
        let de = [
            if px1 < gx1 { -eh } else { 0.0 },
            if py1 < gy1 { -ew } else { 0.0 },
            if px2 > gx2 { eh } else { 0.0 },
            if py2 > gy2 { ew } else { 0.0 },
        ];
        let mut grad = [0.0; 4];
        for c in 0..4 {
            let du = dap[c] - di[c];
            // d( I/U ) + d( U/E )   [the -1 constant drops out]
            grad[c] = di[c] / union - inter * du / (union * union) + du / enc
                - union * de[c] / (enc * enc);
        }
        (value, grad)
    }
}

impl BackwardOp for GiouLossOp {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let bv = g.values(self.boxes);
        let mut dg = vec![0.0; bv.len()];
        for (k, gt) in &self.pairs {
            let (_, gr) = Self::giou_with_grad(&bv[k * 4..(k + 1) * 4], gt);
            for c in 0..4 {
                // loss is 1 - giou
                dg[k * 4 + c] -= grad[0] * gr[c];
            }
        }
        sink.accumulate(self.boxes, &dg);
    }
}

fn giou_loss_sum(g: &mut Graph, boxes: NodeId, pairs: Vec<(usize, BBox)>) -> NodeId {
    let bv = g.values(boxes);
    let total: f64 = pairs
        .iter()
        .map(|(k, gt)| 1.0 - GiouLossOp::giou_with_grad(&bv[k * 4..(k + 1) * 4], gt).0)
        .sum();
    let needs = g.needs_grad(boxes);
    g.push_node(
        vec![],
        vec![total],
        needs,
        Some(Box::new(GiouLossOp { boxes, pairs })),
    )
}

/// Sum of coordinate-normalized L1 distances between selected rows and
/// fixed targets. Coordinates are divided by image width/height so the
/// loss weight is scale-free.
struct L1LossOp {
    boxes: NodeId,
    pairs: Vec<(usize, BBox)>,
    norm: [f64; 4],
}

impl BackwardOp for L1LossOp {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let bv = g.values(self.boxes);
        let mut dg = vec![0.0; bv.len()];
        for (k, gt) in &self.pairs {
            let gtc = [gt.x1, gt.y1, gt.x2, gt.y2];
            for c in 0..4 {
                let diff = bv[k * 4 + c] / self.norm[c] - gtc[c] / self.norm[c];
                dg[k * 4 + c] += grad[0] * diff.signum() / self.norm[c];
            }
        }
        sink.accumulate(self.boxes, &dg);
    }
}

fn l1_loss_sum(
    g: &mut Graph,
    boxes: NodeId,
    pairs: Vec<(usize, BBox)>,
    img_w: f64,
    img_h: f64,
) -> NodeId {
    let norm = [img_w, img_h, img_w, img_h];
    let bv = g.values(boxes);
    let total: f64 = pairs
        .iter()
        .map(|(k, gt)| {
            let gtc = [gt.x1, gt.y1, gt.x2, gt.y2];
            (0..4)
                .map(|c| (bv[k * 4 + c] / norm[c] - gtc[c] / norm[c]).abs())
                .sum::<f64>()
        })
        .sum();
    let needs = g.needs_grad(boxes);
    g.push_node(
        vec![],
        vec![total],
        needs,
        Some(Box::new(L1LossOp { boxes, pairs, norm })),
    )
}

/// Ground truths of one view: box plus malignancy flag.
pub type ViewGts = Vec<(BBox, bool)>;

/// Matching cost between ground truths and the proposals of one stage:
/// focal-style classification cost on the objectness logit (plus the
/// malignancy logit for malignant findings), 5 * normalized L1 and
/// 2 * (1 - GIoU), mirroring the loss weights.
pub fn match_cost(
    g: &Graph,
    stage: &HeadOutput,
    gts: &ViewGts,
    img_w: f64,
    img_h: f64,
    cfg: &LossConfig,
    flags: &ComponentFlags,
) -> Vec<Vec<f64>> {
    let obj = g.values(stage.objectness);
    let mal = g.values(stage.malignancy);
    let norm = [img_w, img_h, img_w, img_h];
    gts.iter()
        .map(|(gt_box, is_malignant)| {
            stage
                .boxes
                .iter()
                .enumerate()
                .map(|(k, pb)| {
                    let mut cost = focal_loss(obj[k], 1.0, cfg.focal_alpha, cfg.focal_gamma);
                    if *is_malignant && flags.dual_heads {
                        cost += focal_loss(mal[k], 1.0, cfg.focal_alpha, cfg.focal_gamma);
                    }
                    let pc = [pb.x1, pb.y1, pb.x2, pb.y2];
                    let gc = [gt_box.x1, gt_box.y1, gt_box.x2, gt_box.y2];
                    let l1: f64 = (0..4)
                        .map(|c| (pc[c] / norm[c] - gc[c] / norm[c]).abs())
                        .sum();
                    cost += cfg.l1_weight * l1;
                    cost += cfg.giou_weight * (1.0 - giou(pb, gt_box));
                    cost
                })
                .collect()
        })
        .collect()
}

/// Differentiable lesion loss terms for one view, summed over stages.
pub struct LesionTerms {
    pub malignant: NodeId,
    pub objectness: NodeId,
    pub giou: NodeId,
    pub l1: NodeId,
}

/// Compute the per-stage lesion losses for one annotated view. The matching
/// comes from the final stage and is reused everywhere unless
/// `rematch_per_stage` is set.
pub fn lesion_loss(
    g: &mut Graph,
    stages: &[HeadOutput],
    gts: &ViewGts,
    img_w: f64,
    img_h: f64,
    cfg: &LossConfig,
    flags: &ComponentFlags,
) -> Result<LesionTerms, MatchError> {
    let n = stages
        .last()
        .map(|s| s.boxes.len())
        .expect("cascade has at least one stage");
    let norm_g = gts.len().max(1) as f64;

    let final_match = if cfg.rematch_per_stage {
        None
    } else {
        Some(matching_for(g, stages.last().unwrap(), gts, img_w, img_h, cfg, flags)?)
    };

    let mut mal_terms = Vec::new();
    let mut obj_terms = Vec::new();
    let mut giou_terms = Vec::new();
    let mut l1_terms = Vec::new();
    for stage in stages {
        let m = match &final_match {
            Some(m) => m.clone(),
            None => matching_for(g, stage, gts, img_w, img_h, cfg, flags)?,
        };

        // objectness: matched-to-any-finding proposals are positive
        let obj_targets: Vec<f64> = (0..n)
            .map(|k| if m.proposal_gt[k].is_some() { 1.0 } else { 0.0 })
            .collect();
        let obj = focal_vec(g, stage.objectness, obj_targets, cfg.focal_alpha, cfg.focal_gamma);
        obj_terms.push(g.sum_all(obj));

        // malignancy: matched-to-malignant proposals are positive; the rest
        // (including background) are negative unless matched-only is set
        if flags.dual_heads {
            let mal_targets: Vec<f64> = (0..n)
                .map(|k| match m.proposal_gt[k] {
                    Some(gt) if gts[gt].1 => 1.0,
                    _ => 0.0,
                })
                .collect();
            if cfg.malignancy_matched_only {
                let kept: Vec<usize> =
                    (0..n).filter(|&k| m.proposal_gt[k].is_some()).collect();
                if !kept.is_empty() {
                    let logits = g.reshape(stage.malignancy, vec![n, 1]).expect("n x 1");
                    let picked = g.gather_rows(logits, &kept).expect("valid indices");
                    let picked = g.reshape(picked, vec![kept.len()]).expect("flat");
                    let targets: Vec<f64> = kept.iter().map(|&k| mal_targets[k]).collect();
                    let mal = focal_vec(g, picked, targets, cfg.focal_alpha, cfg.focal_gamma);
                    mal_terms.push(g.sum_all(mal));
                }
            } else {
                let mal = focal_vec(g, stage.malignancy, mal_targets, cfg.focal_alpha, cfg.focal_gamma);
                mal_terms.push(g.sum_all(mal));
            }
        }

        // box losses over matched pairs only
        let pairs: Vec<(usize, BBox)> = m
            .assigned
            .iter()
            .enumerate()
            .map(|(gt, &k)| (k, gts[gt].0))
            .collect();
        if !pairs.is_empty() {
            giou_terms.push(giou_loss_sum(g, stage.boxes_t, pairs.clone()));
            l1_terms.push(l1_loss_sum(g, stage.boxes_t, pairs, img_w, img_h));
        }
    }

    let normalize = |g: &mut Graph, terms: Vec<NodeId>| -> NodeId {
        match terms.len() {
            0 => g.constant_scalar(0.0),
            _ => {
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t).expect("scalar terms");
                }
                g.scale(acc, 1.0 / norm_g)
            }
        }
    };
    Ok(LesionTerms {
        malignant: normalize(g, mal_terms),
        objectness: normalize(g, obj_terms),
        giou: normalize(g, giou_terms),
        l1: normalize(g, l1_terms),
    })
}

fn matching_for(
    g: &Graph,
    stage: &HeadOutput,
    gts: &ViewGts,
    img_w: f64,
    img_h: f64,
    cfg: &LossConfig,
    flags: &ComponentFlags,
) -> Result<MatchResult, MatchError> {
    if gts.is_empty() {
        return Ok(MatchResult::empty(stage.boxes.len()));
    }
    let cost = match_cost(g, stage, gts, img_w, img_h, cfg, flags);
    hungarian(&cost)
}

/// Labels and gating for one breast's total loss.
pub struct BreastTarget {
    /// Malignancy label shared by both images and the breast.
    pub label: bool,
    /// Lesion terms apply only when boxes are available.
    pub annotated: bool,
    pub gts_cc: ViewGts,
    pub gts_mlo: ViewGts,
    pub img_w: f64,
    pub img_h: f64,
}

/// Assemble the total training loss for one breast:
/// `1_annotated * (malignant + objectness + 2*giou + 5*l1)
///  + 0.5 * image + 0.5 * breast`.
///
/// Lesion terms sum over the two views; the image term is the mean of the
/// two views' cross-entropies. Image/breast terms are only active when the
/// MIL component is on.
pub fn total_loss(
    g: &mut Graph,
    forward: &BreastForward,
    target: &BreastTarget,
    cfg: &LossConfig,
    flags: &ComponentFlags,
) -> Result<(NodeId, LossBreakdown), MatchError> {
    let zero = g.constant_scalar(0.0);
    let (mut mal, mut obj, mut gi, mut l1) = (zero, zero, zero, zero);
    if target.annotated {
        for (view, gts) in [(&forward.cc, &target.gts_cc), (&forward.mlo, &target.gts_mlo)] {
            let terms = lesion_loss(g, &view.stages, gts, target.img_w, target.img_h, cfg, flags)?;
            mal = g.add(mal, terms.malignant).expect("scalars");
            obj = g.add(obj, terms.objectness).expect("scalars");
            gi = g.add(gi, terms.giou).expect("scalars");
            l1 = g.add(l1, terms.l1).expect("scalars");
        }
    }

    let y = if target.label { 1.0 } else { 0.0 };
    let (image, breast) = if flags.mil {
        let image_for = |g: &mut Graph, view: &crate::model::ViewForward| -> NodeId {
            if cfg.mil_deep_supervision {
                let terms: Vec<NodeId> = view
                    .stage_image_scores
                    .iter()
                    .map(|&s| bce_prob(g, s, y))
                    .collect();
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t).expect("scalars");
                }
                g.scale(acc, 1.0 / terms.len() as f64)
            } else {
                bce_prob(g, view.image_score, y)
            }
        };
        let img_cc = image_for(g, &forward.cc);
        let img_mlo = image_for(g, &forward.mlo);
        let img_sum = g.add(img_cc, img_mlo).expect("scalars");
        let image = g.scale(img_sum, 0.5);

        let breast = if cfg.mil_deep_supervision {
            let terms: Vec<NodeId> = forward
                .stage_breast_scores
                .iter()
                .map(|&s| bce_prob(g, s, y))
                .collect();
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t).expect("scalars");
            }
            g.scale(acc, 1.0 / terms.len() as f64)
        } else {
            bce_prob(g, forward.breast_score, y)
        };
        (image, breast)
    } else {
        (zero, zero)
    };

    let gi_w = g.scale(gi, cfg.giou_weight);
    let l1_w = g.scale(l1, cfg.l1_weight);
    let image_w = g.scale(image, cfg.image_weight);
    let breast_w = g.scale(breast, cfg.breast_weight);
    let mut total = g.add(mal, obj).expect("scalars");
    total = g.add(total, gi_w).expect("scalars");
    total = g.add(total, l1_w).expect("scalars");
    total = g.add(total, image_w).expect("scalars");
    total = g.add(total, breast_w).expect("scalars");

    let breakdown = LossBreakdown {
        malignant: g.scalar(mal),
        objectness: g.scalar(obj),
        giou: g.scalar(gi),
        l1: g.scalar(l1),
        image: g.scalar(image),
        breast: g.scalar(breast),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}
