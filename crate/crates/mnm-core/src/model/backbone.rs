//! Strided 3x3 convolution stack producing a single-scale feature map at
//! 1/8 resolution, channels-last `[H, W, C]`.

use rand::Rng;

use crate::numerics::{
    init::xavier_uniform, BackwardOp, BoundParams, Gradients, Graph, NodeId, ParamId, ParamStore,
};

use super::{ModelError, Result};

/// 2-d convolution, stride 2, padding 1. Input `[h, w, cin]`, kernel
/// `[3, 3, cin, cout]`.
struct Conv2d {
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: isize = 1;

impl Conv2d {
    fn forward(g: &mut Graph, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = g.shape(input).to_vec();
        let wshape = g.shape(weight).to_vec();
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let cout = wshape[3];
        debug_assert_eq!(wshape[..3], [K, K, cin]);
        let oh = h / STRIDE;
        let ow = w / STRIDE;

        let iv = g.values(input);
        let wv = g.values(weight);
        let bv = g.values(bias);
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                acc.copy_from_slice(bv);
                for ky in 0..K {
                    let iy = (oy * STRIDE + ky) as isize - PAD;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = (ox * STRIDE + kx) as isize - PAD;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &iv[((iy as usize) * w + ix as usize) * cin..][..cin];
                        let tap = &wv[(ky * K + kx) * cin * cout..][..cin * cout];
                        for (ci, &pv) in px.iter().enumerate() {
                            let wrow = &tap[ci * cout..(ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += pv * wv;
                            }
                        }
                    }
                }
            }
        }
        let needs = g.any_needs_grad(&[input, weight, bias]);
        Ok(g.push_node(
            vec![oh, ow, cout],
            out,
            needs,
            Some(Box::new(Conv2d {
                input,
                weight,
                bias,
                h,
                w,
                cin,
                cout,
                oh,
                ow,
            })),
        ))
    }
}

impl BackwardOp for Conv2d {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let iv = g.values(self.input);
        let wv = g.values(self.weight);
        let (h, w, cin, cout) = (self.h, self.w, self.cin, self.cout);

        let mut dinput = if g.needs_grad(self.input) {
            Some(vec![0.0; iv.len()])
        } else {
            None
        };
        let mut dweight = if g.needs_grad(self.weight) {
            Some(vec![0.0; wv.len()])
        } else {
            None
        };
        let mut dbias = if g.needs_grad(self.bias) {
            Some(vec![0.0; cout])
        } else {
            None
        };

        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let go = &grad[(oy * self.ow + ox) * cout..][..cout];
                if let Some(db) = dbias.as_deref_mut() {
                    for (d, gv) in db.iter_mut().zip(go) {
                        *d += gv;
                    }
                }
                for ky in 0..K {
                    let iy = (oy * STRIDE + ky) as isize - PAD;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = (ox * STRIDE + kx) as isize - PAD;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = ((iy as usize) * w + ix as usize) * cin;
                        let tap = (ky * K + kx) * cin * cout;
                        if let Some(di) = dinput.as_deref_mut() {
                            for ci in 0..cin {
                                let wrow = &wv[tap + ci * cout..tap + (ci + 1) * cout];
                                di[base + ci] +=
                                    go.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(dw) = dweight.as_deref_mut() {
                            for ci in 0..cin {
                                let pv = iv[base + ci];
                                let drow = &mut dw[tap + ci * cout..tap + (ci + 1) * cout];
                                for (d, gv) in drow.iter_mut().zip(go) {
                                    *d += pv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(di) = dinput {
            sink.accumulate(self.input, &di);
        }
        if let Some(dw) = dweight {
            sink.accumulate(self.weight, &dw);
        }
        if let Some(db) = dbias {
            sink.accumulate(self.bias, &db);
        }
    }
}

struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Three stride-2 blocks (conv -> layer norm over channels -> relu) taking
/// `[h, w, 1]` to `[h/8, w/8, feature_dim]`.
pub struct Backbone {
    blocks: Vec<ConvBlock>,
}

impl Backbone {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Backbone> {
        if feature_dim % 4 != 0 {
            return Err(ModelError::Config(format!(
                "feature dim {feature_dim} must be divisible by 4 for the backbone"
            )));
        }
        let widths = [1, feature_dim / 4, feature_dim / 2, feature_dim];
        let blocks = (0..3)
            .map(|i| {
                let (cin, cout) = (widths[i], widths[i + 1]);
                let fan_in = K * K * cin;
                let fan_out = K * K * cout;
                ConvBlock {
                    weight: store.add(
                        format!("backbone.{i}.weight"),
                        vec![K, K, cin, cout],
                        xavier_uniform(rng, fan_in, fan_out, K * K * cin * cout),
                    ),
                    bias: store.add(format!("backbone.{i}.bias"), vec![cout], vec![0.0; cout]),
                    ln_gain: store.add(
                        format!("backbone.{i}.ln_gain"),
                        vec![cout],
                        vec![1.0; cout],
                    ),
                    ln_bias: store.add(
                        format!("backbone.{i}.ln_bias"),
                        vec![cout],
                        vec![0.0; cout],
                    ),
                }
            })
            .collect();
        Ok(Backbone { blocks })
    }

    /// `image` is a `[h, w]` node with h, w divisible by 8.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, image: NodeId) -> Result<NodeId> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 2 || shape[0] % 8 != 0 || shape[1] % 8 != 0 {
            return Err(ModelError::Config(format!(
                "image shape {shape:?} must be 2-d with extents divisible by 8"
            )));
        }
        let mut x = g.reshape(image, vec![shape[0], shape[1], 1])?;
        for block in &self.blocks {
            let conv = Conv2d::forward(g, x, bound.node(block.weight), bound.node(block.bias))?;
            let normed = g.layer_norm(
                conv,
                bound.node(block.ln_gain),
                bound.node(block.ln_bias),
                crate::model::LN_EPS,
            )?;
            x = g.relu(normed);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::{bind, Tensor};

    use super::*;

    #[test]
    fn output_shape_is_divided_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, 16, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = bind(&mut g, &store);
        let img = g.leaf(Tensor::zeros(vec![32, 48]));
        let out = bb.forward(&mut g, &bound, img).unwrap();
        assert_eq!(g.shape(out), &[4, 6, 16]);
    }

    #[test]
    fn zero_image_zero_biases_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, 8, &mut rng).unwrap();
        // biases and layer-norm offsets start at zero already
        let mut g = Graph::new();
        let bound = bind(&mut g, &store);
        let img = g.leaf(Tensor::zeros(vec![16, 16]));
        let out = bb.forward(&mut g, &bound, img).unwrap();
        assert!(g.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = bind(&mut g, &store);
        let img = g.leaf(Tensor::zeros(vec![20, 16]));
        assert!(bb.forward(&mut g, &bound, img).is_err());
    }
}
