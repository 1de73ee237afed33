//! Bilinear RoI cropping: an SxS grid of samples at cell centers inside a
//! box, differentiable with respect to the feature map (boxes are values).
//!
//! Feature pixel (row, col) sits at continuous coordinate (col+0.5, row+0.5)
//! in feature space, so a box covering whole cells reproduces them exactly.

use crate::geometry::BBox;
use crate::numerics::{BackwardOp, Gradients, Graph, NodeId};

use super::Result;

struct Sample {
    /// Four corner flat pixel indices (row-major position, channel 0).
    idx: [usize; 4],
    /// Matching bilinear weights, summing to one.
    w: [f64; 4],
}

struct RoiAlign {
    features: NodeId,
    samples: Vec<Sample>,
    channels: usize,
    feat_len: usize,
}

impl BackwardOp for RoiAlign {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let c = self.channels;
        if let Some(buf) = sink.buf_mut(self.features, self.feat_len) {
            for (cell, s) in self.samples.iter().enumerate() {
                let go = &grad[cell * c..(cell + 1) * c];
                for k in 0..4 {
                    let dst = &mut buf[s.idx[k] * c..(s.idx[k] + 1) * c];
                    for (d, gv) in dst.iter_mut().zip(go) {
                        *d += s.w[k] * gv;
                    }
                }
            }
        }
    }
}

/// Axis-wise bilinear setup: clamped floor index pair and interpolation
/// weight for a continuous coordinate.
fn axis_interp(coord: f64, extent: usize) -> (usize, usize, f64) {
    let a = coord - 0.5;
    let lo = a.floor();
    let t = a - lo;
    let i0 = (lo.max(0.0) as usize).min(extent - 1);
    let i1 = ((lo + 1.0).max(0.0) as usize).min(extent - 1);
    (i0, i1, t)
}

/// Crop `bbox` (image coordinates) from a `[hf, wf, c]` feature map at
/// 1/`scale` resolution into an `[s*s, c]` tensor of bilinear samples.
pub fn roi_align(
    g: &mut Graph,
    features: NodeId,
    bbox: &BBox,
    s: usize,
    scale: f64,
) -> Result<NodeId> {
    let shape = g.shape(features).to_vec();
    let (hf, wf, c) = (shape[0], shape[1], shape[2]);
    let fx1 = bbox.x1 / scale;
    let fy1 = bbox.y1 / scale;
    let fw = bbox.width() / scale;
    let fh = bbox.height() / scale;

    let fv = g.values(features);
    let mut samples = Vec::with_capacity(s * s);
    let mut out = vec![0.0; s * s * c];
    for i in 0..s {
        let sy = fy1 + (i as f64 + 0.5) * fh / s as f64;
        let (r0, r1, ty) = axis_interp(sy, hf);
        for j in 0..s {
            let sx = fx1 + (j as f64 + 0.5) * fw / s as f64;
            let (c0, c1, tx) = axis_interp(sx, wf);
            let sample = Sample {
                idx: [r0 * wf + c0, r0 * wf + c1, r1 * wf + c0, r1 * wf + c1],
                w: [
                    (1.0 - ty) * (1.0 - tx),
                    (1.0 - ty) * tx,
                    ty * (1.0 - tx),
                    ty * tx,
                ],
            };
            let cell = &mut out[(i * s + j) * c..(i * s + j + 1) * c];
            for k in 0..4 {
                let src = &fv[sample.idx[k] * c..(sample.idx[k] + 1) * c];
                for (o, &v) in cell.iter_mut().zip(src) {
                    *o += sample.w[k] * v;
                }
            }
            samples.push(sample);
        }
    }
    let needs = g.needs_grad(features);
    Ok(g.push_node(
        vec![s * s, c],
        out,
        needs,
        Some(Box::new(RoiAlign {
            features,
            samples,
            channels: c,
            feat_len: fv.len(),
        })),
    ))
}

#[cfg(test)]
mod tests {
    use crate::numerics::Tensor;

    use super::*;

    #[test]
    fn constant_map_yields_constant_crop() {
        let mut g = Graph::new();
        let features = g.leaf(Tensor::new(vec![4, 4, 2], vec![3.5; 32]).unwrap());
        let b = BBox::new(2.0, 1.0, 14.0, 13.0).unwrap();
        let out = roi_align(&mut g, features, &b, 3, 4.0).unwrap();
        assert_eq!(g.shape(out), &[9, 2]);
        assert!(g.values(out).iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn cell_aligned_box_reproduces_cells() {
        // 3x3 single-channel map; box covering it exactly at scale 1
        let vals: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut g = Graph::new();
        let features = g.leaf(Tensor::new(vec![3, 3, 1], vals.clone()).unwrap());
        let b = BBox::new(0.0, 0.0, 3.0, 3.0).unwrap();
        let out = roi_align(&mut g, features, &b, 3, 1.0).unwrap();
        assert_eq!(g.values(out), vals.as_slice());
    }

    #[test]
    fn hand_computed_bilinear_weights() {
        // 2x2 map, single sample at the exact middle: average of all four
        let mut g = Graph::new();
        let features = g.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = BBox::new(0.5, 0.5, 1.5, 1.5).unwrap();
        let out = roi_align(&mut g, features, &b, 1, 1.0).unwrap();
        assert!((g.values(out)[0] - 2.5).abs() < 1e-12);

        // sample at (0.75, 0.75): weights (0.75, 0.25) toward index 0 per axis
        let mut g = Graph::new();
        let features = g.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = BBox::new(0.25, 0.25, 1.25, 1.25).unwrap();
        let out = roi_align(&mut g, features, &b, 1, 1.0).unwrap();
        let expect = 0.75 * 0.75 * 1.0 + 0.75 * 0.25 * 2.0 + 0.25 * 0.75 * 3.0 + 0.25 * 0.25 * 4.0;
        assert!((g.values(out)[0] - expect).abs() < 1e-12);
    }
}
