//! Freeze-and-finetune separability and class applicability.
//!
//! The separability of class `x` against probe class `u` at layer `i` is the
//! held-out accuracy of a 2-way classifier built from the base network with
//! layers `0..=i` frozen and a fresh 2-unit head, fine-tuned on balanced
//! `x`/`u` training images. A class's applicability at layer `i` is the mean
//! separability over the probe set.

mod csv;
mod sweep;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stack_images, ClassId, DataError, SplitStore, SubsetLabel};
use crate::nn::train::fit_with_batches;
use crate::nn::{accuracy, one_hot, LossKind, Network, NnError, Tensor, TrainConfig};
use crate::seed::mix;

pub use csv::{
    parse_records_csv, parse_table_csv, record_line, records_csv, subset_curves_csv, table_csv,
    TableRow, RECORDS_HEADER, SUBSET_HEADER, TABLE_HEADER,
};
pub use sweep::{
    job_seed, layer_sweep, layer_sweep_resumable, JobFailure, SweepOutcome, SweepPlan,
};

#[derive(Debug, Error)]
pub enum ApplicabilityError {
    #[error("data error: {0}")]
    Data(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("numeric failure in job (x={target}, un={probe}, layer={layer}): {source}")]
    Numeric {
        target: ClassId,
        probe: ClassId,
        layer: usize,
        source: NnError,
    },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DataError),
    #[error("csv error: {0}")]
    Csv(String),
}

/// One freeze-and-finetune job result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityRecord {
    pub target: ClassId,
    pub probe: ClassId,
    pub layer: usize,
    pub accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppEntry {
    pub app: f64,
    pub records: Vec<SeparabilityRecord>,
}

/// `(class, layer) -> applicability`, each entry backed by its records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApplicabilityTable {
    entries: BTreeMap<(ClassId, usize), AppEntry>,
    probe_set: Vec<ClassId>,
    k: usize,
}

impl ApplicabilityTable {
    pub fn new(probe_set: Vec<ClassId>) -> Self {
        ApplicabilityTable {
            entries: BTreeMap::new(),
            k: probe_set.len(),
            probe_set,
        }
    }

    /// Groups records by `(class, layer)`; only cells with a record for
    /// every probe become entries.
    pub fn from_records(
        probe_set: Vec<ClassId>,
        records: &[SeparabilityRecord],
    ) -> Result<Self, ApplicabilityError> {
        let mut table = ApplicabilityTable::new(probe_set);
        let mut groups: BTreeMap<(ClassId, usize), Vec<SeparabilityRecord>> = BTreeMap::new();
        for r in records {
            groups.entry((r.target, r.layer)).or_default().push(*r);
        }
        let probes: BTreeSet<_> = table.probe_set.iter().copied().collect();
        for ((x, layer), mut recs) in groups {
            recs.sort_by_key(|r| r.probe);
            recs.dedup_by_key(|r| r.probe);
            let covered: BTreeSet<_> = recs.iter().map(|r| r.probe).collect();
            if covered == probes {
                table.insert(x, layer, recs)?;
            }
        }
        Ok(table)
    }

    pub fn insert(
        &mut self,
        class: ClassId,
        layer: usize,
        records: Vec<SeparabilityRecord>,
    ) -> Result<(), ApplicabilityError> {
        if records.len() != self.k {
            return Err(ApplicabilityError::Aggregation(format!(
                "cell ({class}, {layer}) has {} records, k = {}",
                records.len(),
                self.k
            )));
        }
        let app = class_applicability(&records)?;
        if records
            .iter()
            .any(|r| r.target != class || r.layer != layer)
        {
            return Err(ApplicabilityError::Aggregation(format!(
                "records do not belong to cell ({class}, {layer})"
            )));
        }
        self.entries
            .insert((class, layer), AppEntry { app, records });
        Ok(())
    }

    pub fn get(&self, class: ClassId, layer: usize) -> Option<f64> {
        self.entries.get(&(class, layer)).map(|e| e.app)
    }

    pub fn entry(&self, class: ClassId, layer: usize) -> Option<&AppEntry> {
        self.entries.get(&(class, layer))
    }

    pub fn entries(&self) -> impl Iterator<Item = ((ClassId, usize), &AppEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probe_set(&self) -> &[ClassId] {
        &self.probe_set
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.entries.keys().map(|(c, _)| *c).collect()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|(_, l)| *l).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &SeparabilityRecord> {
        self.entries.values().flat_map(|e| &e.records)
    }
}

/// Mean separability of one `(class, layer)` cell over its probes.
pub fn class_applicability(records: &[SeparabilityRecord]) -> Result<f64, ApplicabilityError> {
    let first = records
        .first()
        .ok_or_else(|| ApplicabilityError::Aggregation("no records".into()))?;
    let mut probes = BTreeSet::new();
    for r in records {
        if r.target != first.target || r.layer != first.layer {
            return Err(ApplicabilityError::Aggregation(format!(
                "mixed cells: ({}, {}) and ({}, {})",
                first.target, first.layer, r.target, r.layer
            )));
        }
        if !probes.insert(r.probe) {
            return Err(ApplicabilityError::Aggregation(format!(
                "duplicate probe {} for ({}, {})",
                r.probe, r.target, r.layer
            )));
        }
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(ApplicabilityError::Aggregation(format!(
                "separability {} outside [0, 1]",
                r.accuracy
            )));
        }
    }
    Ok(records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64)
}

/// Per-subset mean applicability at each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetCurve {
    pub subset: SubsetLabel,
    /// `(layer, mean applicability)` in layer order.
    pub points: Vec<(usize, f64)>,
}

impl SubsetCurve {
    pub fn at(&self, layer: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, v)| *v)
    }
}

pub fn subset_average(
    table: &ApplicabilityTable,
    labels: &BTreeMap<ClassId, SubsetLabel>,
) -> Result<Vec<SubsetCurve>, ApplicabilityError> {
    let mut sums: BTreeMap<(SubsetLabel, usize), (f64, usize)> = BTreeMap::new();
    for ((class, layer), entry) in table.entries() {
        let subset = labels.get(&class).ok_or_else(|| {
            ApplicabilityError::Aggregation(format!("class {class} has no subset label"))
        })?;
        let s = sums.entry((*subset, layer)).or_insert((0.0, 0));
        s.0 += entry.app;
        s.1 += 1;
    }
    let mut curves: Vec<SubsetCurve> = Vec::new();
    for ((subset, layer), (sum, n)) in sums {
        let point = (layer, sum / n as f64);
        match curves.last_mut() {
            Some(c) if c.subset == subset => c.points.push(point),
            _ => curves.push(SubsetCurve {
                subset,
                points: vec![point],
            }),
        }
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Part {
    Train,
    Test,
}

/// Frozen-prefix activations per (class, layer, split part). Frozen layers
/// never change during a job, so their outputs are computed once and shared.
pub struct FeatureCache<'a> {
    net: &'a Network,
    splits: &'a SplitStore,
    cache: Mutex<HashMap<(ClassId, usize, Part), Arc<Tensor>>>,
}

impl<'a> FeatureCache<'a> {
    pub fn new(net: &'a Network, splits: &'a SplitStore) -> Self {
        FeatureCache {
            net,
            splits,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    fn features(
        &self,
        class: ClassId,
        layer: usize,
        part: Part,
    ) -> Result<Arc<Tensor>, ApplicabilityError> {
        let key = (class, layer, part);
        if let Some(t) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let split = self
            .splits
            .get(class)
            .ok_or_else(|| ApplicabilityError::Data(format!("class {class} not in splits")))?;
        let images = match part {
            Part::Train => &split.train,
            Part::Test => &split.test,
        };
        if images.is_empty() {
            return Err(ApplicabilityError::Data(format!(
                "class {class} has an empty {part:?} split"
            )));
        }
        let batch = stack_images(images)?;
        let feats = Arc::new(self.net.activation_at(&batch, layer)?);
        self.cache
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&feats));
        Ok(feats)
    }
}

/// Number of independent random-half draws averaged by a self-control job.
pub const SELF_CONTROL_DRAWS: usize = 4;

/// Separability of `target` vs `probe` with layers `0..=layer` frozen.
/// Pairing a class with itself splits its train and test images into two
/// random halves, giving a chance-level control; the result is the mean over
/// [`SELF_CONTROL_DRAWS`] such draws.
pub fn pair_separability(
    net: &Network,
    layer: usize,
    target: ClassId,
    probe: ClassId,
    splits: &SplitStore,
    cfg: &TrainConfig,
) -> Result<SeparabilityRecord, ApplicabilityError> {
    let cache = FeatureCache::new(net, splits);
    pair_separability_cached(&cache, layer, target, probe, cfg)
}

pub fn pair_separability_cached(
    cache: &FeatureCache<'_>,
    layer: usize,
    target: ClassId,
    probe: ClassId,
    cfg: &TrainConfig,
) -> Result<SeparabilityRecord, ApplicabilityError> {
    cfg.validate()?;
    let net = cache.network();
    let head = net.head_index().ok_or_else(|| {
        NnError::UnsupportedArchitecture("base network needs a Dense head".into())
    })?;
    if layer >= head {
        return Err(ApplicabilityError::Data(format!(
            "layer {layer} is not below the head (index {head})"
        )));
    }
    let numeric = |source: NnError| ApplicabilityError::Numeric {
        target,
        probe,
        layer,
        source,
    };

    let accuracy = if target == probe {
        let train = cache.features(target, layer, Part::Train)?;
        let test = cache.features(target, layer, Part::Test)?;
        let mut total = 0.0;
        for draw in 0..SELF_CONTROL_DRAWS {
            let seed = mix(&[cfg.seed, 0x5E1F, draw as u64]);
            let mut rng = StdRng::seed_from_u64(seed);
            let (ta, tb) = random_halves(&train, &mut rng)?;
            let (va, vb) = random_halves(&test, &mut rng)?;
            total += fit_and_score(net, layer, [&ta, &tb], [&va, &vb], &cfg.with_seed(seed))
                .map_err(numeric)?;
        }
        total / SELF_CONTROL_DRAWS as f64
    } else {
        let get = |c, p| cache.features(c, layer, p);
        let (ta, tb) = (get(target, Part::Train)?, get(probe, Part::Train)?);
        let (va, vb) = (get(target, Part::Test)?, get(probe, Part::Test)?);
        fit_and_score(net, layer, [&ta, &tb], [&va, &vb], cfg).map_err(numeric)?
    };
    Ok(SeparabilityRecord {
        target,
        probe,
        layer,
        accuracy,
        seed: cfg.seed,
    })
}

/// Fine-tunes a fresh 2-way head above frozen `layer` on `train` (class 0,
/// class 1 features) and returns balanced accuracy on `test`.
fn fit_and_score(
    net: &Network,
    layer: usize,
    train: [&Tensor; 2],
    test: [&Tensor; 2],
    cfg: &TrainConfig,
) -> Result<f64, NnError> {
    let mut tuned = net.replace_head(2, mix(&[cfg.seed, 0x4EAD]))?;
    tuned.freeze_through(layer);
    let mut tail = tuned.slice(layer + 1, tuned.len())?;

    let n_train = train[0].batch_len().min(train[1].batch_len());
    let (inputs, labels) = concat_balanced(train[0], train[1], n_train)?;
    let targets = one_hot(&labels, 2);
    let half = (cfg.batch_size / 2).max(1);
    fit_with_batches(
        &mut tail,
        &inputs,
        &targets,
        LossKind::CrossEntropy,
        cfg,
        |rng| balanced_batches(n_train, half, rng),
    )?;

    let n_test = test[0].batch_len().min(test[1].batch_len());
    let (test_x, test_y) = concat_balanced(test[0], test[1], n_test)?;
    accuracy(&tail, &test_x, &test_y)
}

fn random_halves(t: &Tensor, rng: &mut StdRng) -> Result<(Tensor, Tensor), ApplicabilityError> {
    let n = t.batch_len();
    if n < 2 {
        return Err(ApplicabilityError::Data(
            "self-control needs at least two images per split".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mid = n / 2;
    Ok((t.gather(&order[..mid]), t.gather(&order[mid..2 * mid])))
}

/// First `n` rows of `a` (label 0) followed by the first `n` of `b` (label 1).
fn concat_balanced(a: &Tensor, b: &Tensor, n: usize) -> Result<(Tensor, Vec<usize>), NnError> {
    if n == 0 {
        return Err(NnError::EmptyBatch);
    }
    let idx: Vec<usize> = (0..n).collect();
    let (ga, gb) = (a.gather(&idx), b.gather(&idx));
    let mut data = ga.into_data();
    data.extend_from_slice(gb.data());
    let mut shape = a.shape().to_vec();
    shape[0] = 2 * n;
    let mut labels = vec![0usize; n];
    labels.extend(std::iter::repeat(1).take(n));
    Ok((Tensor::new(shape, data)?, labels))
}

/// Each batch holds `half` rows of each class (rows `0..n` and `n..2n`).
fn balanced_batches(n: usize, half: usize, rng: &mut StdRng) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut b: Vec<usize> = (n..2 * n).collect();
    a.shuffle(rng);
    b.shuffle(rng);
    a.chunks(half)
        .zip(b.chunks(half))
        .map(|(ca, cb)| {
            let mut batch = Vec::with_capacity(ca.len() + cb.len());
            for (x, y) in ca.iter().zip(cb) {
                batch.push(*x);
                batch.push(*y);
            }
            batch
        })
        .collect()
}
