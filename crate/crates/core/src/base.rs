//! The base ("objective") classifier trained on the known classes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stack_images, ClassId, DataError, LabeledImage, SplitStore};
use crate::nn::{
    accuracy, fit, one_hot, LayerSpec, LossKind, Network, NnError, Tensor, TrainConfig,
};
use crate::seed::mix;

/// Default tapped layer indices of [`default_base_layers`]: the first
/// pooling output, the second conv block output and both hidden dense
/// activations.
pub const DEFAULT_TAPS: [usize; 4] = [2, 4, 7, 9];

#[derive(Debug, Error)]
pub enum BaseError {
    #[error("no known classes to train on")]
    NoKnownClasses,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NnError),
}

pub fn default_base_layers(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(6, 3, 1),
        LayerSpec::relu(),
        LayerSpec::max_pool(2, 2),
        LayerSpec::conv(12, 3, 1),
        LayerSpec::relu(),
        LayerSpec::flatten(),
        LayerSpec::dense(32),
        LayerSpec::relu(),
        LayerSpec::dense(16),
        LayerSpec::relu(),
        LayerSpec::dense(num_classes),
        LayerSpec::softmax(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    /// Output unit `i` predicts class `label_map[i]`.
    pub label_map: Vec<ClassId>,
    pub epochs: Vec<BaseEpoch>,
    pub test_accuracy: f64,
}

fn labeled_batch(
    splits: &SplitStore,
    label_map: &[ClassId],
    pick: impl Fn(&crate::data::ClassSplit) -> &Vec<LabeledImage>,
) -> Result<(Tensor, Vec<usize>), BaseError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, id) in label_map.iter().enumerate() {
        let split = splits.get(*id).expect("known class present");
        for img in pick(split) {
            images.push(img);
            labels.push(label);
        }
    }
    Ok((stack_images(images)?, labels))
}

/// Trains `layers` (whose last Dense must have one unit per known class)
/// on the known classes' train splits.
pub fn train_base(
    splits: &SplitStore,
    layers: Vec<LayerSpec>,
    cfg: &TrainConfig,
) -> Result<(Network, BaseReport), BaseError> {
    cfg.validate()?;
    let label_map = splits.known_classes();
    if label_map.is_empty() {
        return Err(BaseError::NoKnownClasses);
    }
    let shape = splits
        .image_shape()
        .ok_or(BaseError::NoKnownClasses)?
        .to_vec();
    let mut net = Network::new(&shape, layers, mix(&[cfg.seed, 0xBA5E]))?;
    if net.output_shape() != [label_map.len()] {
        return Err(BaseError::Network(NnError::InvalidConfig(format!(
            "network emits {:?} but there are {} known classes",
            net.output_shape(),
            label_map.len()
        ))));
    }
    let (train_x, train_y) = labeled_batch(splits, &label_map, |s| &s.train)?;
    let (test_x, test_y) = labeled_batch(splits, &label_map, |s| &s.test)?;
    let targets = one_hot(&train_y, label_map.len());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let one = TrainConfig {
            epochs: 1,
            seed: mix(&[cfg.seed, epoch as u64]),
            ..*cfg
        };
        let stats = fit(&mut net, &train_x, &targets, LossKind::CrossEntropy, &one)?;
        let e = BaseEpoch {
            epoch,
            loss: stats[0].loss,
            train_accuracy: accuracy(&net, &train_x, &train_y)?,
            test_accuracy: accuracy(&net, &test_x, &test_y)?,
        };
        log::info!(
            "base epoch {epoch}: loss {:.4} train acc {:.4} test acc {:.4}",
            e.loss,
            e.train_accuracy,
            e.test_accuracy
        );
        epochs.push(e);
    }
    let test_accuracy = epochs.last().map_or(0.0, |e| e.test_accuracy);
    Ok((
        net,
        BaseReport {
            label_map,
            epochs,
            test_accuracy,
        },
    ))
}
