//! Direct-loop f64 reference forward pass, independent of the engine's
//! batched kernels. Used as the finite-difference oracle.

use cactusnet::nn::{LayerKind, LossKind, Network, Tensor};

#[derive(Clone)]
pub struct RefParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub struct RefNet {
    pub input_shape: Vec<usize>,
    pub kinds: Vec<LayerKind>,
    pub params: Vec<Option<RefParams>>,
}

impl RefNet {
    pub fn from_network(net: &Network) -> Self {
        RefNet {
            input_shape: net.input_shape().to_vec(),
            kinds: net.layers().iter().map(|l| l.spec.kind.clone()).collect(),
            params: net
                .layers()
                .iter()
                .map(|l| {
                    l.params.as_ref().map(|p| RefParams {
                        w: p.weights.data().iter().map(|&v| v as f64).collect(),
                        b: p.bias.data().iter().map(|&v| v as f64).collect(),
                    })
                })
                .collect(),
        }
    }

    pub fn forward_item(&self, x: &[f64]) -> Vec<f64> {
        let mut shape = self.input_shape.clone();
        let mut cur = x.to_vec();
        for (kind, p) in self.kinds.iter().zip(&self.params) {
            let (next, next_shape) = layer(kind, p.as_ref(), &cur, &shape);
            cur = next;
            shape = next_shape;
        }
        cur
    }

    /// Mean loss over a batch, matching the engine's definitions.
    pub fn loss(&self, xs: &[Vec<f64>], targets: &[Vec<f64>], kind: LossKind) -> f64 {
        let n = xs.len() as f64;
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, t) in xs.iter().zip(targets) {
            let y = self.forward_item(x);
            for (&yv, &tv) in y.iter().zip(t) {
                match kind {
                    LossKind::Mse => total += (yv - tv) * (yv - tv),
                    LossKind::CrossEntropy => {
                        if tv != 0.0 {
                            total -= tv * yv.ln();
                        }
                    }
                }
                count += 1;
            }
        }
        match kind {
            LossKind::Mse => total / count as f64,
            LossKind::CrossEntropy => total / n,
        }
    }
}

fn layer(
    kind: &LayerKind,
    p: Option<&RefParams>,
    x: &[f64],
    s: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    match *kind {
        LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            stride,
        } => {
            let p = p.unwrap();
            let (h, w, c) = (s[0], s[1], s[2]);
            let oh = (h - kernel_h) / stride + 1;
            let ow = (w - kernel_w) / stride + 1;
            let mut out = vec![0.0; oh * ow * filters];
            for oy in 0..oh {
                for ox in 0..ow {
                    for f in 0..filters {
                        let mut acc = p.b[f];
                        for ky in 0..kernel_h {
                            for kx in 0..kernel_w {
                                for ci in 0..c {
                                    let xi = ((oy * stride + ky) * w + ox * stride + kx) * c + ci;
                                    let ki = ((ky * kernel_w + kx) * c + ci) * filters + f;
                                    acc += x[xi] * p.w[ki];
                                }
                            }
                        }
                        out[(oy * ow + ox) * filters + f] = acc;
                    }
                }
            }
            (out, vec![oh, ow, filters])
        }
        LayerKind::MaxPool2D {
            pool_h,
            pool_w,
            stride,
        } => {
            let (h, w, c) = (s[0], s[1], s[2]);
            let oh = (h - pool_h) / stride + 1;
            let ow = (w - pool_w) / stride + 1;
            let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        for py in 0..pool_h {
                            for px in 0..pool_w {
                                let v = x[((oy * stride + py) * w + ox * stride + px) * c + ch];
                                let o = &mut out[(oy * ow + ox) * c + ch];
                                if v > *o {
                                    *o = v;
                                }
                            }
                        }
                    }
                }
            }
            (out, vec![oh, ow, c])
        }
        LayerKind::Dense { units } => {
            let p = p.unwrap();
            let mut out = p.b.clone();
            for (i, &xv) in x.iter().enumerate() {
                for (o, acc) in out.iter_mut().enumerate() {
                    *acc += xv * p.w[i * units + o];
                }
            }
            (out, vec![units])
        }
        LayerKind::ReLU => (x.iter().map(|v| v.max(0.0)).collect(), s.to_vec()),
        LayerKind::Softmax => {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (e.into_iter().map(|v| v / z).collect(), s.to_vec())
        }
        LayerKind::Flatten => (x.to_vec(), vec![x.len()]),
    }
}

pub fn items(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch_len())
        .map(|i| t.item(i).iter().map(|&v| v as f64).collect())
        .collect()
}
