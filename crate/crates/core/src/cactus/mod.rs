//! CactusNet: a trunk of pretrained blocks that grows branches for inputs
//! its features do not cover.
//!
//! Each node holds one block of layers, an applicability predictor for the
//! block's output and a pair of thresholds. Inputs descend from the root
//! by picking, at every depth, the child with the highest predicted
//! applicability; at the configured decision depth the applicability is
//! compared against the thresholds to decide between known, objective
//! unknown and nonobjective unknown.

mod grow;
mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::applicability::{subset_average, ApplicabilityError, ApplicabilityTable};
use crate::data::{ClassId, SubsetLabel};
use crate::nn::{CheckpointError, NnError};
use crate::predictor::PredictorError;

pub use grow::{grow, replay, GrowthConfig, GrowthEvent, GrowthLog, RoutingStats};
pub use tree::{
    classify_or_flag, load_tree, save_tree, ApplicabilityScorer, CactusNode, CactusTree, LeafHead,
    NodeId, PredictorScorer, RouteDecision,
};

#[derive(Debug, Error)]
pub enum CactusError {
    #[error("{name} = {value} is outside [0, 1]")]
    Range { name: &'static str, value: f64 },
    #[error("missing subset coverage: {0}")]
    Coverage(String),
    #[error("{candidates} candidates but {predictions} predictions")]
    CountMismatch {
        candidates: usize,
        predictions: usize,
    },
    #[error("node {0} has no trained predictor")]
    UntrainedPredictor(NodeId),
    #[error("node {0} has no thresholds")]
    MissingThresholds(NodeId),
    #[error("no node {0}")]
    UnknownNode(NodeId),
    #[error("invalid tree: {0}")]
    Tree(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("growth log: {0}")]
    Log(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Applicability(#[from] ApplicabilityError),
}

/// Baselines and the two thresholds derived from them. Each threshold sits
/// one third of the way from the upper baseline `q` down to its lower
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub q: f64,
    pub y1: f64,
    pub y2: f64,
    pub tau1: f64,
    pub tau2: f64,
}

fn unit(name: &'static str, value: f64) -> Result<f64, CactusError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(CactusError::Range { name, value })
    }
}

pub fn threshold(q: f64, y: f64) -> f64 {
    q - (q - y) / 3.0
}

pub fn compute_thresholds(q: f64, y1: f64, y2: f64) -> Result<Thresholds, CactusError> {
    let (q, y1, y2) = (unit("q", q)?, unit("y1", y1)?, unit("y2", y2)?);
    Ok(Thresholds {
        q,
        y1,
        y2,
        tau1: threshold(q, y1),
        tau2: threshold(q, y2),
    })
}

impl Thresholds {
    pub fn verdict(&self, app: f64) -> VerdictKind {
        classify_app(app, self.tau1, self.tau2)
    }
}

/// `(q, y1, y2)`: the known-subset mean and objective-unknown mean at
/// `layer`, and the nonobjective-unknown mean at `final_layer`.
pub fn baseline_from_tables(
    table: &ApplicabilityTable,
    labels: &BTreeMap<ClassId, SubsetLabel>,
    layer: usize,
    final_layer: usize,
) -> Result<(f64, f64, f64), CactusError> {
    let curves = subset_average(table, labels)?;
    let at = |subset: SubsetLabel, l: usize| {
        curves
            .iter()
            .find(|c| c.subset == subset)
            .and_then(|c| c.at(l))
            .ok_or_else(|| CactusError::Coverage(format!("no {subset} entries at layer {l}")))
    };
    Ok((
        at(SubsetLabel::ObjectiveKnown, layer)?,
        at(SubsetLabel::ObjectiveUnknown, layer)?,
        at(SubsetLabel::NonobjectiveUnknown, final_layer)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Known,
    ObjectiveUnknown,
    NonobjectiveUnknown,
}

impl VerdictKind {
    pub const ALL: [VerdictKind; 3] = [
        VerdictKind::Known,
        VerdictKind::ObjectiveUnknown,
        VerdictKind::NonobjectiveUnknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Known => "known",
            VerdictKind::ObjectiveUnknown => "objective_unknown",
            VerdictKind::NonobjectiveUnknown => "nonobjective_unknown",
        }
    }
}

/// Three-way comparison with strict inequalities: known only when
/// `app > tau1`, objective unknown when `tau2 < app <= tau1`.
pub fn classify_app(app: f64, tau1: f64, tau2: f64) -> VerdictKind {
    if app > tau1 {
        VerdictKind::Known
    } else if app > tau2 {
        VerdictKind::ObjectiveUnknown
    } else {
        VerdictKind::NonobjectiveUnknown
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Known { label: String },
    ObjectiveUnknown,
    NonobjectiveUnknown,
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Verdict::Known { .. } => VerdictKind::Known,
            Verdict::ObjectiveUnknown => VerdictKind::ObjectiveUnknown,
            Verdict::NonobjectiveUnknown => VerdictKind::NonobjectiveUnknown,
        }
    }
}

/// One child considered by a routing step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub node: NodeId,
    pub branch_id: u32,
    pub app: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Child(NodeId),
    BranchNeeded,
}

/// Among candidates whose applicability strictly exceeds their `tau2`,
/// the one with the highest applicability; ties go to the lowest branch id.
pub fn select_candidate(candidates: &[Candidate]) -> StepOutcome {
    best_of(candidates.iter().filter(|c| c.app > c.tau2))
        .map_or(StepOutcome::BranchNeeded, |c| StepOutcome::Child(c.node))
}

pub(crate) fn best_of<'a>(
    candidates: impl Iterator<Item = &'a Candidate>,
) -> Option<&'a Candidate> {
    candidates.fold(None, |best: Option<&Candidate>, c| match best {
        Some(b) if b.app > c.app || (b.app == c.app && b.branch_id <= c.branch_id) => Some(b),
        _ => Some(c),
    })
}
