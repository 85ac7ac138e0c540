use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// The layer kinds the engine supports. Spatial tensors are `[h, w, c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    Conv2D {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
    MaxPool2D {
        pool_h: usize,
        pool_w: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
    ReLU,
    Softmax,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub frozen: bool,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerKind::Conv2D {
            filters,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
        }
        .into()
    }

    pub fn max_pool(size: usize, stride: usize) -> Self {
        LayerKind::MaxPool2D {
            pool_h: size,
            pool_w: size,
            stride,
        }
        .into()
    }

    pub fn dense(units: usize) -> Self {
        LayerKind::Dense { units }.into()
    }

    pub fn relu() -> Self {
        LayerKind::ReLU.into()
    }

    pub fn softmax() -> Self {
        LayerKind::Softmax.into()
    }

    pub fn flatten() -> Self {
        LayerKind::Flatten.into()
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2D { .. } | LayerKind::Dense { .. }
        )
    }

    /// Checks hyperparameters and computes the output item shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let mismatch = |expected: Vec<usize>| NnError::ShapeMismatch {
            context: self.name(),
            left: input.to_vec(),
            right: expected,
        };
        match self.kind {
            LayerKind::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                stride,
            } => {
                if filters == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(NnError::InvalidLayer(format!("{self:?}")));
                }
                if input.len() != 3 || input[0] < kernel_h || input[1] < kernel_w {
                    return Err(mismatch(vec![kernel_h, kernel_w, 0]));
                }
                Ok(vec![
                    (input[0] - kernel_h) / stride + 1,
                    (input[1] - kernel_w) / stride + 1,
                    filters,
                ])
            }
            LayerKind::MaxPool2D {
                pool_h,
                pool_w,
                stride,
            } => {
                if pool_h == 0 || pool_w == 0 || stride == 0 {
                    return Err(NnError::InvalidLayer(format!("{self:?}")));
                }
                if input.len() != 3 || input[0] < pool_h || input[1] < pool_w {
                    return Err(mismatch(vec![pool_h, pool_w, 0]));
                }
                Ok(vec![
                    (input[0] - pool_h) / stride + 1,
                    (input[1] - pool_w) / stride + 1,
                    input[2],
                ])
            }
            LayerKind::Dense { units } => {
                if units == 0 {
                    return Err(NnError::InvalidLayer(format!("{self:?}")));
                }
                if input.len() != 1 {
                    return Err(mismatch(vec![input.iter().product()]));
                }
                Ok(vec![units])
            }
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(mismatch(vec![input.iter().product()]));
                }
                Ok(input.to_vec())
            }
            LayerKind::ReLU => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv2D { .. } => "Conv2D",
            LayerKind::MaxPool2D { .. } => "MaxPool2D",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::ReLU => "ReLU",
            LayerKind::Softmax => "Softmax",
            LayerKind::Flatten => "Flatten",
        }
    }

    /// Shapes of (weights, bias) for parameterized kinds.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                ..
            } => Some((vec![kernel_h, kernel_w, input[2], filters], vec![filters])),
            LayerKind::Dense { units } => Some((vec![input[0], units], vec![units])),
            _ => None,
        }
    }
}

impl From<LayerKind> for LayerSpec {
    fn from(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            frozen: false,
        }
    }
}

/// Weights and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Params {
    /// Glorot-uniform weights, zero bias.
    pub(crate) fn init<R: Rng>(weights: &[usize], bias: &[usize], rng: &mut R) -> Self {
        let (fan_in, fan_out) = match weights.len() {
            4 => {
                let receptive = weights[0] * weights[1];
                (receptive * weights[2], receptive * weights[3])
            }
            _ => (weights[0], weights[1]),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let n: usize = weights.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Params {
            weights: Tensor::from_parts(weights.to_vec(), data),
            bias: Tensor::zeros(bias),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.is_finite()
    }
}

/// Single-image valid convolution. `input` is `[h, w, c_in]`, `kernels` is
/// `[kh, kw, c_in, c_out]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor, NnError> {
    let (is, ks) = (input.shape(), kernels.shape());
    if stride == 0 {
        return Err(NnError::InvalidLayer("stride must be >= 1".into()));
    }
    if is.len() != 3 || ks.len() != 4 || ks[2] != is[2] || ks[0] > is[0] || ks[1] > is[1] {
        return Err(NnError::ShapeMismatch {
            context: "conv2d",
            left: is.to_vec(),
            right: ks.to_vec(),
        });
    }
    let geom = ConvGeom {
        n: 1,
        h: is[0],
        w: is[1],
        cin: is[2],
        kh: ks[0],
        kw: ks[1],
        cout: ks[3],
        stride,
    };
    let bias = vec![0.0; geom.cout];
    let out = conv_forward(&geom, input.data(), kernels.data(), &bias);
    Ok(Tensor::from_parts(
        vec![geom.oh(), geom.ow(), geom.cout],
        out,
    ))
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
}

impl ConvGeom {
    fn oh(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }
    fn ow(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }
}

fn conv_forward(g: &ConvGeom, x: &[f32], k: &[f32], bias: &[f32]) -> Vec<f32> {
    let (oh, ow) = (g.oh(), g.ow());
    let mut out = vec![0.0f32; g.n * oh * ow * g.cout];
    for b in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o_off = ((b * oh + oy) * ow + ox) * g.cout;
                let o = &mut out[o_off..o_off + g.cout];
                o.copy_from_slice(bias);
                for ky in 0..g.kh {
                    let iy = oy * g.stride + ky;
                    for kx in 0..g.kw {
                        let ix = ox * g.stride + kx;
                        let x_off = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let k_off = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = x[x_off + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let row = &k[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                            for (acc, &kv) in o.iter_mut().zip(row) {
                                *acc += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dK, db, dx). `dx` is only computed when requested.
fn conv_backward(
    g: &ConvGeom,
    x: &[f32],
    k: &[f32],
    grad: &[f32],
    want_input: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let (oh, ow) = (g.oh(), g.ow());
    let mut dk = vec![0.0f32; k.len()];
    let mut db = vec![0.0f32; g.cout];
    let mut dx = want_input.then(|| vec![0.0f32; x.len()]);
    for b in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let g_off = ((b * oh + oy) * ow + ox) * g.cout;
                let go = &grad[g_off..g_off + g.cout];
                for (d, &v) in db.iter_mut().zip(go) {
                    *d += v;
                }
                for ky in 0..g.kh {
                    let iy = oy * g.stride + ky;
                    for kx in 0..g.kw {
                        let ix = ox * g.stride + kx;
                        let x_off = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let k_off = (ky * g.kw + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let r = k_off + ci * g.cout..k_off + (ci + 1) * g.cout;
                            let xv = x[x_off + ci];
                            if xv != 0.0 {
                                for (d, &gv) in dk[r.clone()].iter_mut().zip(go) {
                                    *d += xv * gv;
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let s: f32 = k[r].iter().zip(go).map(|(a, b)| a * b).sum();
                                dx[x_off + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (dk, db, dx)
}

struct PoolGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
    stride: usize,
}

impl PoolGeom {
    fn oh(&self) -> usize {
        (self.h - self.ph) / self.stride + 1
    }
    fn ow(&self) -> usize {
        (self.w - self.pw) / self.stride + 1
    }

    /// Flat input index of the window maximum for each output element.
    fn argmax(&self, x: &[f32]) -> Vec<usize> {
        let (oh, ow) = (self.oh(), self.ow());
        let mut idx = Vec::with_capacity(self.n * oh * ow * self.c);
        for b in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..self.c {
                        let mut best = usize::MAX;
                        for py in 0..self.ph {
                            for px in 0..self.pw {
                                let i = ((b * self.h + oy * self.stride + py) * self.w
                                    + ox * self.stride
                                    + px)
                                    * self.c
                                    + ch;
                                if best == usize::MAX || x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        idx.push(best);
                    }
                }
            }
        }
        idx
    }
}

fn softmax_rows(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (v, &r) in o.iter_mut().zip(row) {
            *v = (r - max).exp();
            sum += *v;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Forward pass of one layer over a batch `[n, ...item]`.
pub(crate) fn forward(spec: &LayerSpec, params: Option<&Params>, x: &Tensor) -> Tensor {
    let n = x.batch_len();
    let item = x.item_shape();
    let out_item = spec
        .output_shape(item)
        .expect("layer shapes validated at construction");
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(&out_item);
    let data = match spec.kind {
        LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            stride,
        } => {
            let p = params.expect("conv params");
            let geom = ConvGeom {
                n,
                h: item[0],
                w: item[1],
                cin: item[2],
                kh: kernel_h,
                kw: kernel_w,
                cout: filters,
                stride,
            };
            conv_forward(&geom, x.data(), p.weights.data(), p.bias.data())
        }
        LayerKind::MaxPool2D {
            pool_h,
            pool_w,
            stride,
        } => {
            let geom = PoolGeom {
                n,
                h: item[0],
                w: item[1],
                c: item[2],
                ph: pool_h,
                pw: pool_w,
                stride,
            };
            let xd = x.data();
            geom.argmax(xd).into_iter().map(|i| xd[i]).collect()
        }
        LayerKind::Dense { units } => {
            let p = params.expect("dense params");
            let (w, b) = (p.weights.data(), p.bias.data());
            let inp = item[0];
            let mut out = vec![0.0f32; n * units];
            for (row, o) in x.data().chunks(inp).zip(out.chunks_mut(units)) {
                o.copy_from_slice(b);
                for (i, &xv) in row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (acc, &wv) in o.iter_mut().zip(&w[i * units..(i + 1) * units]) {
                        *acc += xv * wv;
                    }
                }
            }
            out
        }
        LayerKind::ReLU => x.data().iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::Softmax => softmax_rows(x.data(), item[0]),
        LayerKind::Flatten => x.data().to_vec(),
    };
    Tensor::from_parts(out_shape, data)
}

/// Backward pass of one layer. `y` is the layer's forward output and `grad`
/// the loss gradient with respect to it.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: Option<&Params>,
    x: &Tensor,
    y: &Tensor,
    grad: &Tensor,
    want_params: bool,
    want_input: bool,
) -> (Option<Params>, Option<Tensor>) {
    let n = x.batch_len();
    let item = x.item_shape();
    match spec.kind {
        LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            stride,
        } => {
            let p = params.expect("conv params");
            let geom = ConvGeom {
                n,
                h: item[0],
                w: item[1],
                cin: item[2],
                kh: kernel_h,
                kw: kernel_w,
                cout: filters,
                stride,
            };
            if !want_params && !want_input {
                return (None, None);
            }
            let (dk, db, dx) =
                conv_backward(&geom, x.data(), p.weights.data(), grad.data(), want_input);
            let pg = want_params.then(|| Params {
                weights: Tensor::from_parts(p.weights.shape().to_vec(), dk),
                bias: Tensor::from_parts(p.bias.shape().to_vec(), db),
            });
            (pg, dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)))
        }
        LayerKind::MaxPool2D {
            pool_h,
            pool_w,
            stride,
        } => {
            if !want_input {
                return (None, None);
            }
            let geom = PoolGeom {
                n,
                h: item[0],
                w: item[1],
                c: item[2],
                ph: pool_h,
                pw: pool_w,
                stride,
            };
            let mut dx = vec![0.0f32; x.len()];
            for (i, &g) in geom.argmax(x.data()).iter().zip(grad.data()) {
                dx[*i] += g;
            }
            (None, Some(Tensor::from_parts(x.shape().to_vec(), dx)))
        }
        LayerKind::Dense { units } => {
            let p = params.expect("dense params");
            let inp = item[0];
            let w = p.weights.data();
            let pg = want_params.then(|| {
                let mut dw = vec![0.0f32; w.len()];
                let mut db = vec![0.0f32; units];
                for (row, g) in x.data().chunks(inp).zip(grad.data().chunks(units)) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                    for (i, &xv) in row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, &gv) in dw[i * units..(i + 1) * units].iter_mut().zip(g) {
                            *d += xv * gv;
                        }
                    }
                }
                Params {
                    weights: Tensor::from_parts(p.weights.shape().to_vec(), dw),
                    bias: Tensor::from_parts(p.bias.shape().to_vec(), db),
                }
            });
            let dx = want_input.then(|| {
                let mut dx = vec![0.0f32; x.len()];
                for (d, g) in dx.chunks_mut(inp).zip(grad.data().chunks(units)) {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = w[i * units..(i + 1) * units]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), dx)
            });
            (pg, dx)
        }
        LayerKind::ReLU => {
            let dx = want_input.then(|| {
                let d = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), d)
            });
            (None, dx)
        }
        LayerKind::Softmax => {
            let dx = want_input.then(|| {
                let width = item[0];
                let mut d = vec![0.0f32; x.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(width)
                    .zip(grad.data().chunks(width))
                    .zip(d.chunks_mut(width))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), d)
            });
            (None, dx)
        }
        LayerKind::Flatten => {
            let dx =
                want_input.then(|| Tensor::from_parts(x.shape().to_vec(), grad.data().to_vec()));
            (None, dx)
        }
    }
}
