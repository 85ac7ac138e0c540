use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerKind, LayerSpec, Params};
use super::{NnError, Tensor, TrainConfig};

/// Serializable description of a network's layout (no parameters).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<Params>,
}

/// Ordered layer stack with per-layer parameters and freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Output item shape of every layer.
    shapes: Vec<Vec<usize>>,
}

/// Per-layer outputs of a forward pass, final output last.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub outputs: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("trace of a non-empty network")
    }
}

/// Parameter gradients, `None` for parameterless or skipped layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Params>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl Network {
    /// Builds a network and initializes all parameters from `seed`.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let mut rng = StdRng::seed_from_u64(seed);
        let shapes = Self::infer_shapes(input_shape, &specs)?;
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let inp = if i == 0 { input_shape } else { &shapes[i - 1] };
                let params = spec
                    .param_shapes(inp)
                    .map(|(w, b)| Params::init(&w, &b, &mut rng));
                Layer { spec, params }
            })
            .collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
        })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        params: Vec<Option<Params>>,
    ) -> Result<Self, NnError> {
        let shapes = Self::infer_shapes(input_shape, &specs)?;
        if params.len() != specs.len() {
            return Err(NnError::InvalidLayer(format!(
                "{} parameter slots for {} layers",
                params.len(),
                specs.len()
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, (spec, p)) in specs.into_iter().zip(params).enumerate() {
            let inp = if i == 0 { input_shape } else { &shapes[i - 1] };
            match (spec.param_shapes(inp), &p) {
                (Some((w, b)), Some(p)) => {
                    if p.weights.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                        return Err(NnError::ShapeMismatch {
                            context: "layer parameters",
                            left: p.weights.shape().to_vec(),
                            right: w,
                        });
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(NnError::InvalidLayer(format!(
                        "layer {i} ({}) has wrong parameter presence",
                        spec.name()
                    )))
                }
            }
            layers.push(Layer { spec, params: p });
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
        })
    }

    fn infer_shapes(
        input_shape: &[usize],
        specs: &[LayerSpec],
    ) -> Result<Vec<Vec<usize>>, NnError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::InvalidShape(input_shape.to_vec()));
        }
        if specs.is_empty() {
            return Err(NnError::InvalidLayer("network has no layers".into()));
        }
        let mut shapes = Vec::with_capacity(specs.len());
        let mut cur = input_shape.to_vec();
        for spec in specs {
            cur = spec.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty network")
    }

    /// Output item shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn params(&self, index: usize) -> Option<&Params> {
        self.layers[index].params.as_ref()
    }

    pub fn params_mut(&mut self, index: usize) -> Option<&mut Params> {
        self.layers[index].params.as_mut()
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) {
        self.layers[index].spec.frozen = frozen;
    }

    /// Freezes every layer at or below `index`.
    pub fn freeze_through(&mut self, index: usize) {
        for layer in self.layers.iter_mut().take(index + 1) {
            layer.spec.frozen = true;
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.shape().len() < 2 || batch.item_shape() != self.input_shape.as_slice() {
            let mut expected = vec![batch.batch_len()];
            expected.extend_from_slice(&self.input_shape);
            return Err(NnError::ShapeMismatch {
                context: "network input",
                left: batch.shape().to_vec(),
                right: expected,
            });
        }
        Ok(())
    }

    /// Runs the batch through every layer, keeping each output.
    pub fn forward(&self, batch: &Tensor) -> Result<ActivationTrace, NnError> {
        self.forward_until(batch, self.layers.len() - 1)
    }

    /// Runs layers `0..=last` and keeps each output.
    pub fn forward_until(&self, batch: &Tensor, last: usize) -> Result<ActivationTrace, NnError> {
        self.check_batch(batch)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(last + 1);
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            let x = if i == 0 { batch } else { &outputs[i - 1] };
            let y = layer::forward(&layer.spec, layer.params.as_ref(), x);
            if !y.is_finite() {
                return Err(NnError::NumericFailure {
                    layer: i,
                    phase: "forward",
                });
            }
            outputs.push(y);
        }
        Ok(ActivationTrace { outputs })
    }

    /// Final output only; intermediate tensors are dropped as soon as possible.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.activation_at(batch, self.layers.len() - 1)
    }

    /// Output of layer `last` without retaining the rest of the trace.
    pub fn activation_at(&self, batch: &Tensor, last: usize) -> Result<Tensor, NnError> {
        self.check_batch(batch)?;
        let mut cur: Option<Tensor> = None;
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            let x = cur.as_ref().unwrap_or(batch);
            let y = layer::forward(&layer.spec, layer.params.as_ref(), x);
            if !y.is_finite() {
                return Err(NnError::NumericFailure {
                    layer: i,
                    phase: "forward",
                });
            }
            cur = Some(y);
        }
        Ok(cur.expect("at least one layer"))
    }

    /// Loss and gradients for every unfrozen parameterized layer. Layers
    /// below the lowest trainable one are not visited.
    pub fn backward(
        &self,
        batch: &Tensor,
        targets: &Tensor,
        loss: LossKind,
    ) -> Result<(Gradients, f64), NnError> {
        let lowest = self
            .layers
            .iter()
            .position(|l| l.params.is_some() && !l.spec.frozen);
        let trace = self.forward(batch)?;
        let (grads, value, _) =
            self.backprop(batch, &trace, targets, loss, lowest, false, false)?;
        Ok((grads, value))
    }

    /// Gradients for all parameterized layers (ignoring freeze flags) and
    /// with respect to the input batch.
    pub fn backward_full(
        &self,
        batch: &Tensor,
        targets: &Tensor,
        loss: LossKind,
    ) -> Result<(Gradients, Tensor, f64), NnError> {
        let trace = self.forward(batch)?;
        let (grads, value, dx) =
            self.backprop(batch, &trace, targets, loss, Some(0), true, true)?;
        Ok((grads, dx.expect("input gradient requested"), value))
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        batch: &Tensor,
        trace: &ActivationTrace,
        targets: &Tensor,
        loss: LossKind,
        lowest: Option<usize>,
        ignore_freeze: bool,
        want_input: bool,
    ) -> Result<(Gradients, f64, Option<Tensor>), NnError> {
        let output = trace.output();
        if targets.shape() != output.shape() {
            return Err(NnError::ShapeMismatch {
                context: "loss targets",
                left: targets.shape().to_vec(),
                right: output.shape().to_vec(),
            });
        }
        let last = self.layers.len() - 1;
        let fused = loss == LossKind::CrossEntropy
            && matches!(self.layers[last].spec.kind, LayerKind::Softmax);
        let (value, mut grad) = loss_and_grad(loss, output, targets, fused);
        let mut layers: Vec<Option<Params>> = vec![None; self.layers.len()];
        let Some(lowest) = lowest else {
            return Ok((Gradients { layers }, value, None));
        };
        let stop = if want_input { 0 } else { lowest };
        let start = if fused {
            last.checked_sub(1)
        } else {
            Some(last)
        };
        let Some(start) = start else {
            // Single softmax layer under fused cross-entropy: the logit
            // gradient is the input gradient.
            return Ok((Gradients { layers }, value, want_input.then_some(grad)));
        };
        let mut input_grad = None;
        for i in (stop..=start).rev() {
            let layer = &self.layers[i];
            let x = if i == 0 { batch } else { &trace.outputs[i - 1] };
            let want_params = layer.params.is_some() && (ignore_freeze || !layer.spec.frozen);
            let need_dx = i > stop || want_input;
            let (pg, dx) = layer::backward(
                &layer.spec,
                layer.params.as_ref(),
                x,
                &trace.outputs[i],
                &grad,
                want_params,
                need_dx,
            );
            if let Some(pg) = &pg {
                if !pg.is_finite() {
                    return Err(NnError::NumericFailure {
                        layer: i,
                        phase: "backward",
                    });
                }
            }
            layers[i] = pg;
            match dx {
                Some(dx) => {
                    if !dx.is_finite() {
                        return Err(NnError::NumericFailure {
                            layer: i,
                            phase: "backward",
                        });
                    }
                    if i == 0 {
                        input_grad = Some(dx);
                    } else {
                        grad = dx;
                    }
                }
                None => break,
            }
        }
        Ok((Gradients { layers }, value, input_grad))
    }

    /// In-place plain SGD. Frozen layers are left untouched.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        learning_rate: f32,
    ) -> Result<(), NnError> {
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::InvalidLayer(format!(
                "{} gradient slots for {} layers",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            let (Some(p), Some(g)) = (layer.params.as_mut(), g.as_ref()) else {
                continue;
            };
            if p.weights.shape() != g.weights.shape() || p.bias.shape() != g.bias.shape() {
                return Err(NnError::ShapeMismatch {
                    context: "gradient vs parameter",
                    left: g.weights.shape().to_vec(),
                    right: p.weights.shape().to_vec(),
                });
            }
            if layer.spec.frozen || learning_rate == 0.0 {
                continue;
            }
            for (w, d) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w -= learning_rate * d;
            }
            for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *b -= learning_rate * d;
            }
            if !p.is_finite() {
                return Err(NnError::NumericFailure {
                    layer: i,
                    phase: "update",
                });
            }
        }
        Ok(())
    }

    /// Replaces the final Dense layer (optionally followed by Softmax) with
    /// a freshly initialized Dense of `num_outputs` units.
    pub fn replace_head(&self, num_outputs: usize, seed: u64) -> Result<Network, NnError> {
        if num_outputs == 0 {
            return Err(NnError::InvalidLayer("head width must be >= 1".into()));
        }
        let head = self.head_index().ok_or(NnError::UnsupportedArchitecture(
            "final block is not Dense".into(),
        ))?;
        let input = if head == 0 {
            self.input_shape.clone()
        } else {
            self.shapes[head - 1].clone()
        };
        let spec = LayerSpec::dense(num_outputs);
        let (w, b) = spec.param_shapes(&input).expect("dense has params");
        let mut rng = StdRng::seed_from_u64(seed);
        let params = Params::init(&w, &b, &mut rng);
        let mut net = self.clone();
        net.layers[head] = Layer {
            spec,
            params: Some(params),
        };
        net.shapes = Self::infer_shapes(
            &net.input_shape,
            &net.layers
                .iter()
                .map(|l| l.spec.clone())
                .collect::<Vec<_>>(),
        )?;
        Ok(net)
    }

    /// Index of the final Dense layer when it ends the network or is only
    /// followed by a Softmax.
    pub fn head_index(&self) -> Option<usize> {
        let last = self.layers.len() - 1;
        let candidate = match self.layers[last].spec.kind {
            LayerKind::Softmax if last > 0 => last - 1,
            _ => last,
        };
        matches!(self.layers[candidate].spec.kind, LayerKind::Dense { .. }).then_some(candidate)
    }

    /// The sub-network made of layers `start..end`, taking layer
    /// `start - 1`'s output shape as input.
    pub fn slice(&self, start: usize, end: usize) -> Result<Network, NnError> {
        if start >= end || end > self.layers.len() {
            return Err(NnError::InvalidLayer(format!(
                "invalid layer range {start}..{end} of {}",
                self.layers.len()
            )));
        }
        let input_shape = if start == 0 {
            self.input_shape.clone()
        } else {
            self.shapes[start - 1].clone()
        };
        Ok(Network {
            input_shape,
            layers: self.layers[start..end].to_vec(),
            shapes: self.shapes[start..end].to_vec(),
        })
    }
}

/// Mean loss over the batch and its gradient with respect to the network
/// output (or to the softmax input when `fused`).
fn loss_and_grad(kind: LossKind, output: &Tensor, targets: &Tensor, fused: bool) -> (f64, Tensor) {
    let n = output.batch_len().max(1);
    let (o, t) = (output.data(), targets.data());
    match kind {
        LossKind::Mse => {
            let count = o.len() as f64;
            let value = o
                .iter()
                .zip(t)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
                / count;
            let scale = 2.0 / count as f32;
            let g = o.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
            (value, Tensor::from_parts(output.shape().to_vec(), g))
        }
        LossKind::CrossEntropy => {
            const FLOOR: f32 = 1e-12;
            let value = o
                .iter()
                .zip(t)
                .filter(|(_, &b)| b != 0.0)
                .map(|(&p, &b)| -(b as f64) * (p.max(FLOOR) as f64).ln())
                .sum::<f64>()
                / n as f64;
            let inv = 1.0 / n as f32;
            let g = if fused {
                o.iter().zip(t).map(|(&p, &b)| (p - b) * inv).collect()
            } else {
                o.iter()
                    .zip(t)
                    .map(|(&p, &b)| -b / p.max(FLOOR) * inv)
                    .collect()
            };
            (value, Tensor::from_parts(output.shape().to_vec(), g))
        }
    }
}

/// Returns a new network after one SGD step.
pub fn sgd_step(net: &Network, grads: &Gradients, cfg: &TrainConfig) -> Result<Network, NnError> {
    let mut next = net.clone();
    next.apply_gradients(grads, cfg.learning_rate)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_trace() {
        let net = Network::new(&[2], vec![LayerSpec::relu()], 0).unwrap();
        let trace = net.forward(&t(&[1, 2], &[-1.0, 2.0])).unwrap();
        assert_eq!(trace.outputs.len(), 1);
        assert_eq!(trace.output().data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_input() {
        let net = Network::new(&[2], vec![LayerSpec::softmax()], 0).unwrap();
        let out = net.predict(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    fn identity_dense_relu() -> Network {
        let eye = Params {
            weights: t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            bias: Tensor::zeros(&[2]),
        };
        Network::from_parts(
            &[2],
            vec![LayerSpec::dense(2), LayerSpec::relu()],
            vec![Some(eye), None],
        )
        .unwrap()
    }

    #[test]
    fn dense_identity_then_relu() {
        let net = identity_dense_relu();
        let trace = net.forward(&t(&[1, 2], &[3.0, -3.0])).unwrap();
        assert_eq!(trace.outputs.len(), 2);
        assert_eq!(trace.output().data(), &[3.0, 0.0]);
    }

    #[test]
    fn nonconforming_batch_rejected() {
        let net = identity_dense_relu();
        let err = net.forward(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }

    #[test]
    fn mse_at_minimum_is_zero() {
        let net = identity_dense_relu();
        let x = t(&[1, 2], &[0.5, 0.25]);
        let (grads, loss) = net.backward(&x, &x, LossKind::Mse).unwrap();
        assert_eq!(loss, 0.0);
        for g in grads.layers.iter().flatten() {
            assert!(g
                .weights
                .data()
                .iter()
                .chain(g.bias.data())
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mse_half_half_against_one_zero() {
        let net = Network::new(&[1], vec![LayerSpec::relu()], 0).unwrap();
        let preds = t(&[2, 1], &[0.5, 0.5]);
        let targets = t(&[2, 1], &[1.0, 0.0]);
        let (_, loss) = net.backward(&preds, &targets, LossKind::Mse).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn target_shape_mismatch() {
        let net = identity_dense_relu();
        let err = net
            .backward(&t(&[1, 2], &[1.0, 1.0]), &t(&[1, 1], &[1.0]), LossKind::Mse)
            .unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }

    fn scalar_net(frozen: bool) -> (Network, Gradients) {
        let p = Params {
            weights: t(&[1, 1], &[1.0]),
            bias: t(&[1], &[0.0]),
        };
        let mut net = Network::from_parts(&[1], vec![LayerSpec::dense(1)], vec![Some(p)]).unwrap();
        net.set_frozen(0, frozen);
        let g = Gradients {
            layers: vec![Some(Params {
                weights: t(&[1, 1], &[0.5]),
                bias: t(&[1], &[0.0]),
            })],
        };
        (net, g)
    }

    fn cfg(lr: f32) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs: 1,
            batch_size: 1,
            seed: 0,
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let (net, g) = scalar_net(false);
        let next = sgd_step(&net, &g, &cfg(0.1)).unwrap();
        assert!((next.params(0).unwrap().weights.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn sgd_respects_freeze() {
        let (net, g) = scalar_net(true);
        let next = sgd_step(&net, &g, &cfg(0.1)).unwrap();
        assert_eq!(
            next.params(0).unwrap().weights.data()[0].to_bits(),
            1.0f32.to_bits()
        );
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let net = Network::new(
            &[3],
            vec![LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::dense(2)],
            5,
        )
        .unwrap();
        let x = t(&[2, 3], &[0.1, 0.2, 0.3, -0.1, 0.5, 0.9]);
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (g, _) = net.backward(&x, &y, LossKind::Mse).unwrap();
        assert_eq!(sgd_step(&net, &g, &cfg(0.0)).unwrap(), net);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let (net, _) = scalar_net(false);
        let g = Gradients {
            layers: vec![Some(Params {
                weights: Tensor::zeros(&[2, 1]),
                bias: Tensor::zeros(&[1]),
            })],
        };
        assert!(sgd_step(&net, &g, &cfg(0.1)).is_err());
    }

    fn five_way() -> Network {
        Network::new(
            &[6, 6, 1],
            vec![
                LayerSpec::conv(2, 3, 1),
                LayerSpec::relu(),
                LayerSpec::flatten(),
                LayerSpec::dense(5),
                LayerSpec::softmax(),
            ],
            11,
        )
        .unwrap()
    }

    #[test]
    fn replace_head_contract() {
        let net = five_way();
        let a = net.replace_head(2, 3).unwrap();
        let b = net.replace_head(2, 3).unwrap();
        assert_eq!(a.output_shape(), &[2]);
        assert_eq!(a.params(3), b.params(3));
        assert_eq!(a.params(0), net.params(0));
        let c = net.replace_head(2, 4).unwrap();
        assert_ne!(a.params(3), c.params(3));
    }

    #[test]
    fn replace_head_requires_dense_tail() {
        let net = Network::new(&[4, 4, 1], vec![LayerSpec::conv(1, 2, 1)], 0).unwrap();
        assert!(matches!(
            net.replace_head(2, 0),
            Err(NnError::UnsupportedArchitecture(_))
        ));
    }

    #[test]
    fn slice_matches_full_forward() {
        let net = five_way();
        let x = Tensor::new(
            vec![3, 6, 6, 1],
            (0..108).map(|v| (v as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let full = net.forward(&x).unwrap();
        let tail = net.slice(2, net.len()).unwrap();
        let out = tail.predict(&full.outputs[1]).unwrap();
        assert_eq!(out, *full.output());
    }
}
