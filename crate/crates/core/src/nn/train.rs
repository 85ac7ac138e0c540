use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{LossKind, Network, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(NnError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TrainConfig { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub loss: f64,
}

/// Mini-batch SGD over shuffled data. Deterministic given `cfg.seed`.
pub fn fit(
    net: &mut Network,
    inputs: &Tensor,
    targets: &Tensor,
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, NnError> {
    let n = inputs.batch_len();
    let batch_size = cfg.batch_size;
    fit_with_batches(net, inputs, targets, loss, cfg, |rng| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    })
}

/// Like [`fit`], with the caller deciding each epoch's batch composition.
pub fn fit_with_batches<F>(
    net: &mut Network,
    inputs: &Tensor,
    targets: &Tensor,
    loss: LossKind,
    cfg: &TrainConfig,
    mut plan: F,
) -> Result<Vec<EpochStats>, NnError>
where
    F: FnMut(&mut StdRng) -> Vec<Vec<usize>>,
{
    cfg.validate()?;
    if inputs.batch_len() == 0 {
        return Err(NnError::EmptyBatch);
    }
    if inputs.batch_len() != targets.batch_len() {
        return Err(NnError::ShapeMismatch {
            context: "inputs vs targets",
            left: inputs.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = plan(&mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let x = inputs.gather(idx);
            let y = targets.gather(idx);
            let (grads, value) = net.backward(&x, &y, loss)?;
            if !value.is_finite() {
                return Err(NnError::NumericFailure {
                    layer: net.len() - 1,
                    phase: "loss",
                });
            }
            net.apply_gradients(&grads, cfg.learning_rate)?;
            total += value;
        }
        stats.push(EpochStats {
            epoch,
            loss: total / batches.len().max(1) as f64,
        });
    }
    Ok(stats)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    if labels.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let preds = net.predict(inputs)?.argmax_rows();
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
