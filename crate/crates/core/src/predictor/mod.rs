//! Per-layer applicability predictors: small regressors from one layer's
//! activation to the applicability of the input's class at that layer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::applicability::ApplicabilityTable;
use crate::data::{stack_images, ClassId, DataError, SplitStore, SubsetLabel};
use crate::nn::checkpoint::{decode_network, encode_network_with, read_file, write_atomic};
use crate::nn::{fit, CheckpointError, LayerSpec, LossKind, Network, NnError, Tensor, TrainConfig};
use crate::seed::mix;

pub const PREDICTOR_MAGIC: [u8; 8] = *b"CNLPRED1";

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid tap shape {0:?}: need three positive extents")]
    TapShape(Vec<usize>),
    #[error("activation shape {found:?} does not match predictor input {expected:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid samples: {0}")]
    Samples(String),
    #[error("held-out class {0} was used to train the predictor")]
    Leakage(ClassId),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "snake_case")]
pub enum PredictorPlan {
    /// Two conv blocks (two convs and a 2x2 max-pool each) with the given
    /// kernel sizes, then a 1-unit dense head.
    Conv { kernels: [usize; 2] },
    /// Dense 64, dense 32, dense 1.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub input_shape: [usize; 3],
    #[serde(flatten)]
    pub plan: PredictorPlan,
}

const BLOCK_FILTERS: [usize; 2] = [32, 64];

impl PredictorSpec {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self.plan {
            PredictorPlan::Conv { kernels } => {
                let mut out = Vec::new();
                for (filters, k) in BLOCK_FILTERS.into_iter().zip(kernels) {
                    out.extend([
                        LayerSpec::conv(filters, k, 1),
                        LayerSpec::relu(),
                        LayerSpec::conv(filters, k, 1),
                        LayerSpec::relu(),
                        LayerSpec::max_pool(2, 2),
                    ]);
                }
                out.extend([LayerSpec::flatten(), LayerSpec::dense(1)]);
                out
            }
            PredictorPlan::Dense => vec![
                LayerSpec::flatten(),
                LayerSpec::dense(64),
                LayerSpec::relu(),
                LayerSpec::dense(32),
                LayerSpec::relu(),
                LayerSpec::dense(1),
            ],
        }
    }
}

/// Spatial side left after one conv block with kernel `k` on side `s`, if
/// the block fits.
fn block_out(s: usize, k: usize) -> Option<usize> {
    let after_convs = s.checked_sub(2 * (k - 1))?;
    (after_convs >= 2).then_some(after_convs / 2)
}

/// Picks the conv plan when two blocks fit (`min(h, w) >= 4`), choosing for
/// each block the largest kernel in {3, 2, 1} that still lets both fit.
pub fn build_predictor(tap_shape: &[usize]) -> Result<PredictorSpec, PredictorError> {
    if tap_shape.len() != 3 || tap_shape.contains(&0) {
        return Err(PredictorError::TapShape(tap_shape.to_vec()));
    }
    let input_shape = [tap_shape[0], tap_shape[1], tap_shape[2]];
    let side = tap_shape[0].min(tap_shape[1]);
    let mut plan = PredictorPlan::Dense;
    'outer: for k1 in [3, 2, 1] {
        if let Some(s1) = block_out(side, k1) {
            for k2 in [3, 2, 1] {
                if block_out(s1, k2).is_some() {
                    plan = PredictorPlan::Conv { kernels: [k1, k2] };
                    break 'outer;
                }
            }
        }
    }
    Ok(PredictorSpec { input_shape, plan })
}

/// The predictor input shape for a layer output: spatial outputs are used
/// as is, vector outputs of width `n` become `(1, 1, n)`.
pub fn tap_input_shape(layer_output: &[usize]) -> Vec<usize> {
    match layer_output {
        [n] => vec![1, 1, *n],
        other => other.to_vec(),
    }
}

/// Activations with their per-sample applicability targets.
#[derive(Debug, Clone)]
pub struct PredictorSamples {
    /// `[n, h, w, c]` batch in the predictor's input shape.
    pub activations: Tensor,
    pub targets: Vec<f64>,
    pub classes: Vec<ClassId>,
}

impl PredictorSamples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Test,
}

/// Layer-`layer` activations of every image of `classes`, each labeled with
/// its class's applicability at that layer.
pub fn layer_samples(
    net: &Network,
    splits: &SplitStore,
    table: &ApplicabilityTable,
    layer: usize,
    classes: &[ClassId],
    part: SplitPart,
) -> Result<PredictorSamples, PredictorError> {
    let mut batches = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    for &c in classes {
        let split = splits
            .get(c)
            .ok_or_else(|| PredictorError::Samples(format!("class {c} has no data")))?;
        let app = table.get(c, layer).ok_or_else(|| {
            PredictorError::Samples(format!("no applicability for class {c} at layer {layer}"))
        })?;
        let images = match part {
            SplitPart::Train => &split.train,
            SplitPart::Test => &split.test,
        };
        if images.is_empty() {
            continue;
        }
        let acts = net.activation_at(&stack_images(images)?, layer)?;
        targets.extend(std::iter::repeat(app).take(images.len()));
        labels.extend(std::iter::repeat(c).take(images.len()));
        batches.push(acts);
    }
    if batches.is_empty() {
        return Err(PredictorError::Samples("no images".into()));
    }
    let refs: Vec<&Tensor> = batches.iter().collect();
    let stacked = concat_batches(&refs)?;
    let mut shape = vec![stacked.batch_len()];
    shape.extend(tap_input_shape(stacked.item_shape()));
    Ok(PredictorSamples {
        activations: stacked.reshape(shape)?,
        targets,
        classes: labels,
    })
}

fn concat_batches(parts: &[&Tensor]) -> Result<Tensor, NnError> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.batch_len()).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        if p.item_shape() != parts[0].item_shape() {
            return Err(NnError::ShapeMismatch {
                context: "activation batches",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Training-set MSE before any update.
    pub initial_mse: f64,
    /// Training-set MSE after each epoch.
    pub epoch_mse: Vec<f64>,
    pub n: usize,
    pub final_train_mse: f64,
    pub final_heldout_mse: Option<f64>,
    /// All targets were identical.
    pub degenerate_targets: bool,
}

/// Affine maps applied to inputs and outputs of the regression network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_shift: f32,
    pub input_scale: f32,
    pub target_shift: f64,
    pub target_scale: f64,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling {
        input_shift: 0.0,
        input_scale: 1.0,
        target_shift: 0.0,
        target_scale: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub spec: PredictorSpec,
    pub layer_index: usize,
    pub network: Network,
    pub scaling: Scaling,
    pub trained_classes: BTreeSet<ClassId>,
    pub report: Option<TrainingReport>,
}

impl PredictorModel {
    /// Wraps an existing regression network with identity scaling.
    pub fn from_network(
        spec: PredictorSpec,
        layer_index: usize,
        network: Network,
    ) -> Result<Self, PredictorError> {
        if network.input_shape() != spec.input_shape || network.output_shape() != [1] {
            return Err(PredictorError::Shape {
                expected: spec.input_shape.to_vec(),
                found: network.input_shape().to_vec(),
            });
        }
        Ok(PredictorModel {
            spec,
            layer_index,
            network,
            scaling: Scaling::IDENTITY,
            trained_classes: BTreeSet::new(),
            report: None,
        })
    }

    fn scale_inputs(&self, batch: &Tensor) -> Tensor {
        let s = self.scaling;
        let mut out = batch.clone();
        for v in out.data_mut() {
            *v = (*v - s.input_shift) * s.input_scale;
        }
        out
    }

    /// Unclamped predictions for a `[n, h, w, c]` batch.
    pub fn predict_raw(&self, batch: &Tensor) -> Result<Vec<f64>, PredictorError> {
        let mut shape = vec![batch.batch_len()];
        shape.extend(tap_input_shape(batch.item_shape()));
        let batch = batch.clone().reshape(shape)?;
        if batch.item_shape() != self.spec.input_shape {
            return Err(PredictorError::Shape {
                expected: self.spec.input_shape.to_vec(),
                found: batch.item_shape().to_vec(),
            });
        }
        let out = self.network.predict(&self.scale_inputs(&batch))?;
        let s = self.scaling;
        Ok(out
            .data()
            .iter()
            .map(|&v| s.target_shift + s.target_scale * v as f64)
            .collect())
    }

    /// Predictions for a batch, clamped to `[0, 1]`.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<f64>, PredictorError> {
        Ok(self
            .predict_raw(batch)?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect())
    }
}

/// Predicted applicability of one activation (`[h, w, c]` or `[n]`).
pub fn predict_applicability(
    model: &PredictorModel,
    activation: &Tensor,
) -> Result<f64, PredictorError> {
    let mut shape = vec![1];
    shape.extend(activation.shape());
    let batch = activation.clone().reshape(shape)?;
    Ok(model.predict_batch(&batch)?[0])
}

fn mse(pred: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    sum / targets.len().max(1) as f64
}

fn check_samples(spec: &PredictorSpec, s: &PredictorSamples) -> Result<(), PredictorError> {
    if s.is_empty() || s.activations.batch_len() != s.len() || s.classes.len() != s.len() {
        return Err(PredictorError::Samples(format!(
            "{} activations, {} targets, {} class labels",
            s.activations.batch_len(),
            s.len(),
            s.classes.len()
        )));
    }
    if s.activations.item_shape() != spec.input_shape {
        return Err(PredictorError::Shape {
            expected: spec.input_shape.to_vec(),
            found: s.activations.item_shape().to_vec(),
        });
    }
    if let Some(t) = s.targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(PredictorError::Samples(format!(
            "target {t} outside [0, 1]"
        )));
    }
    Ok(())
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains a predictor by minimizing mean squared error. Inputs and targets
/// are standardized with training-set statistics, which are stored in the
/// model.
pub fn train_predictor(
    spec: &PredictorSpec,
    layer_index: usize,
    samples: &PredictorSamples,
    heldout: Option<&PredictorSamples>,
    cfg: &TrainConfig,
) -> Result<(PredictorModel, TrainingReport), PredictorError> {
    cfg.validate()?;
    check_samples(spec, samples)?;
    if let Some(h) = heldout {
        check_samples(spec, h)?;
    }
    let (in_mean, in_std) = mean_std(samples.activations.data().iter().map(|&v| v as f64));
    let (t_mean, t_std) = mean_std(samples.targets.iter().copied());
    let degenerate = t_std == 0.0;
    if degenerate {
        log::warn!(
            "layer {layer_index}: all {} targets equal {t_mean}; regression is degenerate",
            samples.len()
        );
    }
    let scaling = Scaling {
        input_shift: in_mean as f32,
        input_scale: if in_std > 0.0 {
            (1.0 / in_std) as f32
        } else {
            1.0
        },
        target_shift: t_mean,
        target_scale: if degenerate { 1.0 } else { t_std },
    };
    let network = Network::new(
        &spec.input_shape,
        spec.layers(),
        mix(&[cfg.seed, 0x9DEC, layer_index as u64]),
    )?;
    let mut model = PredictorModel {
        spec: spec.clone(),
        layer_index,
        network,
        scaling,
        trained_classes: samples.classes.iter().copied().collect(),
        report: None,
    };
    if let Some(h) = heldout {
        if let Some(c) = h.classes.iter().find(|c| model.trained_classes.contains(c)) {
            return Err(PredictorError::Leakage(*c));
        }
    }

    let inputs = model.scale_inputs(&samples.activations);
    let z: Vec<f32> = samples
        .targets
        .iter()
        .map(|t| ((t - scaling.target_shift) / scaling.target_scale) as f32)
        .collect();
    let targets = Tensor::new(vec![z.len(), 1], z)?;
    let initial_mse = mse(&model.predict_raw(&samples.activations)?, &samples.targets);
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let one = TrainConfig {
            epochs: 1,
            seed: mix(&[cfg.seed, epoch as u64]),
            ..*cfg
        };
        fit(&mut model.network, &inputs, &targets, LossKind::Mse, &one)?;
        let m = mse(&model.predict_raw(&samples.activations)?, &samples.targets);
        log::debug!("predictor layer {layer_index} epoch {epoch}: mse {m:.6}");
        epoch_mse.push(m);
    }
    let final_heldout_mse = match heldout {
        Some(h) => Some(mse(&model.predict_batch(&h.activations)?, &h.targets)),
        None => None,
    };
    let report = TrainingReport {
        initial_mse,
        final_train_mse: *epoch_mse.last().expect("epochs >= 1"),
        epoch_mse,
        n: samples.len(),
        final_heldout_mse,
        degenerate_targets: degenerate,
    };
    model.report = Some(report.clone());
    Ok((model, report))
}

/// Samples of one held-out class with its measured applicability.
#[derive(Debug, Clone)]
pub struct HeldOutClass {
    pub class_id: ClassId,
    pub subset: SubsetLabel,
    pub actual_app: f64,
    pub activations: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub class_id: ClassId,
    pub subset: SubsetLabel,
    pub actual_app: f64,
    pub mean_predicted: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFidelity {
    pub subset: SubsetLabel,
    pub mean_abs_err: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub layer_index: usize,
    pub rows: Vec<FidelityRow>,
    pub subsets: Vec<SubsetFidelity>,
    /// Mean squared error over every held-out image.
    pub mse: f64,
}

pub const FIDELITY_HEADER: &str = "class,subset,actual_app,mean_predicted,abs_err";

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{FIDELITY_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.class_id, r.subset, r.actual_app, r.mean_predicted, r.abs_err
            ));
        }
        out
    }
}

pub fn evaluate_predictor(
    model: &PredictorModel,
    held_out: &[HeldOutClass],
) -> Result<Evaluation, PredictorError> {
    let mut rows = Vec::with_capacity(held_out.len());
    let mut by_subset: BTreeMap<SubsetLabel, (f64, f64, usize, usize)> = BTreeMap::new();
    let (mut sq_total, mut n_total) = (0.0, 0usize);
    for h in held_out {
        if model.trained_classes.contains(&h.class_id) {
            return Err(PredictorError::Leakage(h.class_id));
        }
        let preds = model.predict_batch(&h.activations)?;
        if preds.is_empty() {
            return Err(PredictorError::Samples(format!(
                "class {} has no images",
                h.class_id
            )));
        }
        let mean_predicted = preds.iter().sum::<f64>() / preds.len() as f64;
        let sq: f64 = preds.iter().map(|p| (p - h.actual_app).powi(2)).sum();
        sq_total += sq;
        n_total += preds.len();
        let abs_err = (mean_predicted - h.actual_app).abs();
        let e = by_subset.entry(h.subset).or_insert((0.0, 0.0, 0, 0));
        e.0 += abs_err;
        e.1 += sq;
        e.2 += 1;
        e.3 += preds.len();
        rows.push(FidelityRow {
            class_id: h.class_id,
            subset: h.subset,
            actual_app: h.actual_app,
            mean_predicted,
            abs_err,
        });
    }
    let subsets = by_subset
        .into_iter()
        .map(|(subset, (abs, sq, classes, images))| SubsetFidelity {
            subset,
            mean_abs_err: abs / classes as f64,
            mse: sq / images as f64,
        })
        .collect();
    Ok(Evaluation {
        layer_index: model.layer_index,
        rows,
        subsets,
        mse: sq_total / n_total.max(1) as f64,
    })
}

#[derive(Serialize, Deserialize)]
struct PredictorHeader {
    layer_index: usize,
    tap_shape: [usize; 3],
    spec: PredictorSpec,
    scaling: Scaling,
    trained_classes: BTreeSet<ClassId>,
    report: Option<TrainingReport>,
}

pub fn save_predictor(model: &PredictorModel, path: &Path) -> Result<(), PredictorError> {
    let header = PredictorHeader {
        layer_index: model.layer_index,
        tap_shape: model.spec.input_shape,
        spec: model.spec.clone(),
        scaling: model.scaling,
        trained_classes: model.trained_classes.clone(),
        report: model.report.clone(),
    };
    let extra = match serde_json::to_value(header).expect("header serializes") {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    };
    write_atomic(
        path,
        &encode_network_with(&PREDICTOR_MAGIC, &model.network, extra)?,
    )?;
    Ok(())
}

pub fn load_predictor(path: &Path) -> Result<PredictorModel, PredictorError> {
    let bytes = read_file(path)?;
    let (network, header) = decode_network(&PREDICTOR_MAGIC, &bytes)?;
    let h: PredictorHeader =
        serde_json::from_value(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if network.input_shape() != h.spec.input_shape {
        return Err(PredictorError::Shape {
            expected: h.spec.input_shape.to_vec(),
            found: network.input_shape().to_vec(),
        });
    }
    Ok(PredictorModel {
        spec: h.spec,
        layer_index: h.layer_index,
        network,
        scaling: h.scaling,
        trained_classes: h.trained_classes,
        report: h.report,
    })
}
