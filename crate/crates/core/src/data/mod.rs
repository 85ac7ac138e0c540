//! Dataset ingestion, the synthetic two-family corpus, manifests with
//! known/unknown subset labels, probe-set sampling and train/test splits.

pub mod idx;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::CheckpointError;
use crate::nn::{NnError, Tensor};
use crate::seed::mix;

pub use idx::{load_idx, IdxBatch};
pub use synthetic::{generate_synthetic, Family, SyntheticDataset, SyntheticParams};

pub type ClassId = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(String),
    #[error("idx format error: expected magic {expected:#010x}, found {found:#010x}")]
    IdxFormat { expected: u32, found: u32 },
    #[error("idx length error: expected {expected} bytes, found {found}")]
    IdxLength { expected: usize, found: usize },
    #[error("image side {side} is below the minimum of {min}")]
    TooSmall { side: usize, min: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("classes without image data: {0:?}")]
    Unresolved(Vec<ClassId>),
    #[error(
        "not enough eligible probe classes: need {need_objective} objective-unknown and \
         {need_nonobjective} nonobjective-unknown, have {have_objective} and {have_nonobjective}"
    )]
    InsufficientProbes {
        need_objective: usize,
        need_nonobjective: usize,
        have_objective: usize,
        have_nonobjective: usize,
    },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] NnError),
    #[error(transparent)]
    Container(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetLabel {
    ObjectiveKnown,
    ObjectiveUnknown,
    NonobjectiveUnknown,
}

impl SubsetLabel {
    pub const ALL: [SubsetLabel; 3] = [
        SubsetLabel::ObjectiveKnown,
        SubsetLabel::ObjectiveUnknown,
        SubsetLabel::NonobjectiveUnknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetLabel::ObjectiveKnown => "objective_known",
            SubsetLabel::ObjectiveUnknown => "objective_unknown",
            SubsetLabel::NonobjectiveUnknown => "nonobjective_unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl std::fmt::Display for SubsetLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub class_id: ClassId,
    pub class_name: String,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, class_id: ClassId, class_name: &str) -> Result<Self, DataError> {
        if pixels.shape().len() != 3 {
            return Err(DataError::Invalid(format!(
                "image must be [h, w, c], got {:?}",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Invalid(format!(
                "class {class_id}: pixel outside [0, 1]"
            )));
        }
        Ok(LabeledImage {
            pixels,
            class_id,
            class_name: class_name.to_string(),
        })
    }
}

/// Where a manifest class's images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassSource {
    /// A class of the manifest's synthetic corpus.
    Synthetic { class_index: ClassId },
    /// All images carrying `label` in an IDX image/label file pair.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        label: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub class_id: ClassId,
    pub class_name: String,
    pub subset: SubsetLabel,
    pub sources: Vec<ClassSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub objective_name: String,
    pub classes: Vec<ManifestClass>,
    pub probe_set: Vec<ClassId>,
    pub k: usize,
    pub train_fraction: f64,
    /// Cap on images taken per class before splitting.
    #[serde(default)]
    pub max_per_class: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub synthetic: Option<SyntheticParams>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Manifest(m));
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if c.class_name.contains([',', '"', '\n']) {
                return bad(format!(
                    "class name {:?} may not contain commas, quotes or newlines",
                    c.class_name
                ));
            }
            if !ids.insert(c.class_id) {
                return bad(format!("duplicate class id {}", c.class_id));
            }
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction {} not in (0, 1)",
                self.train_fraction
            ));
        }
        if self.probe_set.len() != self.k {
            return bad(format!(
                "probe set has {} classes but k = {}",
                self.probe_set.len(),
                self.k
            ));
        }
        let mut seen = BTreeSet::new();
        for &p in &self.probe_set {
            if !seen.insert(p) {
                return bad(format!("probe class {p} listed twice"));
            }
            match self.subset_of(p) {
                None => return bad(format!("probe class {p} not in manifest")),
                Some(SubsetLabel::ObjectiveKnown) => {
                    return bad(format!("probe class {p} is a known (trained) class"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn class(&self, id: ClassId) -> Option<&ManifestClass> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn subset_of(&self, id: ClassId) -> Option<SubsetLabel> {
        self.class(id).map(|c| c.subset)
    }

    pub fn labels(&self) -> BTreeMap<ClassId, SubsetLabel> {
        self.classes
            .iter()
            .map(|c| (c.class_id, c.subset))
            .collect()
    }

    pub fn class_ids(&self, subset: SubsetLabel) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.subset == subset)
            .map(|c| c.class_id)
            .collect()
    }

    /// Classes measured against the probe set: everything not in it.
    pub fn measured_classes(&self) -> Vec<ClassId> {
        let probes: BTreeSet<_> = self.probe_set.iter().collect();
        self.classes
            .iter()
            .map(|c| c.class_id)
            .filter(|id| !probes.contains(id))
            .collect()
    }
}

/// Balanced draw of `k` untrained classes: `ceil(k/2)` objective-unknown and
/// `floor(k/2)` nonobjective-unknown, returned sorted within each half.
pub fn sample_probe_set(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<ClassId>, DataError> {
    let objective = manifest.class_ids(SubsetLabel::ObjectiveUnknown);
    let nonobjective = manifest.class_ids(SubsetLabel::NonobjectiveUnknown);
    let (need_o, need_n) = (k.div_ceil(2), k / 2);
    if k == 0 || objective.len() < need_o || nonobjective.len() < need_n {
        return Err(DataError::InsufficientProbes {
            need_objective: need_o,
            need_nonobjective: need_n,
            have_objective: objective.len(),
            have_nonobjective: nonobjective.len(),
        });
    }
    let mut rng = StdRng::seed_from_u64(mix(&[seed, 0x9E0B]));
    let mut pick = |pool: &[ClassId], n: usize| {
        let mut chosen: Vec<ClassId> = pool.choose_multiple(&mut rng, n).copied().collect();
        chosen.sort_unstable();
        chosen
    };
    let mut out = pick(&objective, need_o);
    out.extend(pick(&nonobjective, need_n));
    Ok(out)
}

/// Raw per-class images before splitting.
pub type ClassImages = BTreeMap<ClassId, Vec<Tensor>>;

/// Loads every class referenced by the manifest. Relative IDX paths are
/// resolved against `base_dir`.
pub fn resolve_sources(
    manifest: &DatasetManifest,
    base_dir: &Path,
) -> Result<ClassImages, DataError> {
    let needs_synthetic = manifest
        .classes
        .iter()
        .flat_map(|c| &c.sources)
        .any(|s| matches!(s, ClassSource::Synthetic { .. }));
    let synthetic = match (needs_synthetic, manifest.synthetic) {
        (true, Some(p)) => Some(generate_synthetic(
            p.per_family,
            p.per_class,
            p.image_side,
            p.seed,
        )?),
        (true, None) => {
            return Err(DataError::Manifest(
                "synthetic sources without a `synthetic` block".into(),
            ))
        }
        _ => None,
    };
    let mut idx_cache: BTreeMap<(PathBuf, PathBuf), IdxBatch> = BTreeMap::new();
    let mut out = ClassImages::new();
    for class in &manifest.classes {
        let mut images = Vec::new();
        for source in &class.sources {
            match source {
                ClassSource::Synthetic { class_index } => {
                    let ds = synthetic.as_ref().expect("generated above");
                    images.extend(ds.images_of(*class_index).map(|i| i.pixels.clone()));
                }
                ClassSource::Idx {
                    images: ip,
                    labels: lp,
                    label,
                } => {
                    let key = (base_dir.join(ip), base_dir.join(lp));
                    if !idx_cache.contains_key(&key) {
                        let batch = load_idx(&key.0, Some(&key.1))?;
                        idx_cache.insert(key.clone(), batch);
                    }
                    let batch = &idx_cache[&key];
                    let labels = batch.labels.as_ref().expect("labels requested");
                    let shape = batch.images.item_shape().to_vec();
                    for (i, &l) in labels.iter().enumerate() {
                        if l == *label {
                            images.push(Tensor::new(shape.clone(), batch.images.item(i).to_vec())?);
                        }
                    }
                }
            }
        }
        if !images.is_empty() {
            out.insert(class.class_id, images);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ClassSplit {
    pub class_id: ClassId,
    pub class_name: String,
    pub subset: SubsetLabel,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Per-class train/test partitions. Read-only after construction.
#[derive(Debug, Clone)]
pub struct SplitStore {
    classes: BTreeMap<ClassId, ClassSplit>,
    probe_set: Vec<ClassId>,
}

impl SplitStore {
    pub fn get(&self, id: ClassId) -> Option<&ClassSplit> {
        self.classes.get(&id)
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassSplit> {
        self.classes.values()
    }

    pub fn probe_set(&self) -> &[ClassId] {
        &self.probe_set
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.classes
            .values()
            .flat_map(|c| c.train.first())
            .next()
            .map(|i| i.pixels.shape())
    }

    /// Train images of the known classes, the base network's training pool.
    pub fn base_training_pool(&self) -> Vec<&LabeledImage> {
        self.classes
            .values()
            .filter(|c| c.subset == SubsetLabel::ObjectiveKnown)
            .flat_map(|c| &c.train)
            .collect()
    }

    pub fn known_classes(&self) -> Vec<ClassId> {
        self.classes
            .values()
            .filter(|c| c.subset == SubsetLabel::ObjectiveKnown)
            .map(|c| c.class_id)
            .collect()
    }
}

/// Stacks images into a `[n, h, w, c]` batch.
pub fn stack_images<'a, I>(images: I) -> Result<Tensor, DataError>
where
    I: IntoIterator<Item = &'a LabeledImage>,
{
    let refs: Vec<&Tensor> = images.into_iter().map(|i| &i.pixels).collect();
    Ok(Tensor::stack(&refs)?)
}

/// Partitions every manifest class into disjoint train/test sets.
pub fn build_splits(
    manifest: &DatasetManifest,
    sources: &ClassImages,
) -> Result<SplitStore, DataError> {
    manifest.validate()?;
    let missing: Vec<ClassId> = manifest
        .classes
        .iter()
        .map(|c| c.class_id)
        .filter(|id| sources.get(id).map_or(true, Vec::is_empty))
        .collect();
    if !missing.is_empty() {
        return Err(DataError::Unresolved(missing));
    }
    let mut classes = BTreeMap::new();
    for class in &manifest.classes {
        let pool = &sources[&class.class_id];
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = StdRng::seed_from_u64(mix(&[manifest.seed, class.class_id as u64]));
        order.shuffle(&mut rng);
        if let Some(cap) = manifest.max_per_class {
            order.truncate(cap);
        }
        let n_train = (order.len() as f64 * manifest.train_fraction).round() as usize;
        let wrap =
            |i: &usize| LabeledImage::new(pool[*i].clone(), class.class_id, &class.class_name);
        let train = order[..n_train]
            .iter()
            .map(wrap)
            .collect::<Result<Vec<_>, _>>()?;
        let test = order[n_train..]
            .iter()
            .map(wrap)
            .collect::<Result<Vec<_>, _>>()?;
        classes.insert(
            class.class_id,
            ClassSplit {
                class_id: class.class_id,
                class_name: class.class_name.clone(),
                subset: class.subset,
                train,
                test,
            },
        );
    }
    Ok(SplitStore {
        classes,
        probe_set: manifest.probe_set.clone(),
    })
}

/// How many synthetic classes go into each subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub known: usize,
    pub objective_unknown: usize,
    pub nonobjective_unknown: usize,
}

/// Manifest over a synthetic corpus: the first `known` organic classes are
/// known, the next `objective_unknown` organic classes are
/// objective-unknown and the first `nonobjective_unknown` manufactured
/// classes are nonobjective-unknown. The probe set is sampled from the
/// unknown classes; the remaining unknown classes are the ones measured.
pub fn synthetic_manifest(
    params: SyntheticParams,
    counts: SubsetCounts,
    k: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let n = params.per_family;
    if counts.known + counts.objective_unknown > n || counts.nonobjective_unknown > n {
        return Err(DataError::Manifest(format!(
            "{counts:?} needs more than the {n} classes per family generated"
        )));
    }
    let organic = counts.known + counts.objective_unknown;
    let ids = (0..organic).chain(n..n + counts.nonobjective_unknown);
    let mut classes = Vec::new();
    for i in ids {
        let (subset, name) = if i < counts.known {
            (SubsetLabel::ObjectiveKnown, format!("organic-{i:02}"))
        } else if i < n {
            (SubsetLabel::ObjectiveUnknown, format!("organic-{i:02}"))
        } else {
            (
                SubsetLabel::NonobjectiveUnknown,
                format!("manufactured-{:02}", i - n),
            )
        };
        classes.push(ManifestClass {
            class_id: i as ClassId,
            class_name: name,
            subset,
            sources: vec![ClassSource::Synthetic {
                class_index: i as ClassId,
            }],
        });
    }
    let mut manifest = DatasetManifest {
        objective_name: "organic".into(),
        classes,
        probe_set: Vec::new(),
        k,
        train_fraction,
        max_per_class: None,
        seed,
        synthetic: Some(params),
    };
    manifest.probe_set = sample_probe_set(&manifest, k, seed)?;
    manifest.validate()?;
    Ok(manifest)
}
