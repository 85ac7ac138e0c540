use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::seed::mix;

use super::tree::{classify_or_flag, ApplicabilityScorer, CactusTree, NodeId, RouteDecision};
use super::{CactusError, VerdictKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthConfig {
    pub max_branches_per_node: usize,
    /// A provisional branch keeps absorbing below-threshold inputs while
    /// its most recent absorption is fewer than this many inputs ago.
    pub consolidation_window: usize,
    pub seed: u64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            max_branches_per_node: 4,
            consolidation_window: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum GrowthEvent {
    BranchCreated {
        index: usize,
        at_node: NodeId,
        branch_id: u32,
        seed: u64,
    },
    Route {
        index: usize,
        decision: RouteDecision,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub inputs: usize,
    pub known: usize,
    pub objective_unknown: usize,
    pub nonobjective_unknown: usize,
    pub branches_created: usize,
    pub absorbed: usize,
    pub unrouted: usize,
}

impl RoutingStats {
    fn record(&mut self, d: &RouteDecision) {
        self.inputs += 1;
        match d.verdict.kind() {
            VerdictKind::Known => self.known += 1,
            VerdictKind::ObjectiveUnknown => self.objective_unknown += 1,
            VerdictKind::NonobjectiveUnknown => self.nonobjective_unknown += 1,
        }
        self.branches_created += usize::from(d.branch_created.is_some());
        self.absorbed += usize::from(d.absorbed_by.is_some());
        self.unrouted += usize::from(d.unrouted);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowthLog {
    pub events: Vec<GrowthEvent>,
    pub stats: RoutingStats,
}

impl GrowthLog {
    fn push(&mut self, event: GrowthEvent) {
        if let GrowthEvent::Route { decision, .. } = &event {
            self.stats.record(decision);
        }
        self.events.push(event);
    }

    /// Appends the events of a later growth run.
    pub fn append(&mut self, other: GrowthLog) {
        for e in other.events {
            self.push(e);
        }
    }

    pub fn decisions(&self) -> impl Iterator<Item = &RouteDecision> {
        self.events.iter().filter_map(|e| match e {
            GrowthEvent::Route { decision, .. } => Some(decision),
            GrowthEvent::BranchCreated { .. } => None,
        })
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), CactusError> {
        for e in &self.events {
            let line = serde_json::to_string(e).map_err(|e| CactusError::Log(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| CactusError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, CactusError> {
        let mut log = GrowthLog::default();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| CactusError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line)
                .map_err(|e| CactusError::Log(format!("line {}: {e}", n + 1)))?;
            log.push(event);
        }
        Ok(log)
    }
}

fn live_branch(tree: &CactusTree, node: NodeId, index: usize, window: usize) -> Option<NodeId> {
    tree.branches_at(node)
        .into_iter()
        .filter(|&b| tree.nodes[b].provisional)
        .filter(|&b| {
            tree.nodes[b]
                .absorbed
                .last()
                .is_some_and(|&last| index - last < window)
        })
        .min_by_key(|&b| tree.nodes[b].branch_id)
}

/// Routes each input in order. A nonobjective-unknown verdict is absorbed
/// by a live provisional branch at the decision node when one exists,
/// otherwise it spawns a new branch there (up to the per-node limit).
pub fn grow(
    tree: &mut CactusTree,
    inputs: &[Tensor],
    scorer: &dyn ApplicabilityScorer,
    cfg: &GrowthConfig,
) -> Result<GrowthLog, CactusError> {
    if cfg.consolidation_window == 0 {
        return Err(CactusError::Tree(
            "consolidation window must be positive".into(),
        ));
    }
    let mut log = GrowthLog::default();
    for input in inputs {
        let index = tree.inputs_seen;
        let mut decision = classify_or_flag(tree, input, scorer)?;
        if decision.verdict.kind() == VerdictKind::NonobjectiveUnknown {
            let at = decision.decision_node;
            if let Some(b) = live_branch(tree, at, index, cfg.consolidation_window) {
                tree.nodes[b].absorbed.push(index);
                decision.absorbed_by = Some(tree.nodes[b].branch_id);
            } else if tree.branches_at(at).len() >= cfg.max_branches_per_node {
                log::warn!("input {index}: branch limit reached at node {at}; unrouted");
                decision.unrouted = true;
            } else {
                let seed = mix(&[cfg.seed, u64::from(tree.next_branch)]);
                let branch_id = tree.create_branch(at, seed)?;
                let root = tree.branch_root(branch_id).expect("just created");
                tree.nodes[root].absorbed.push(index);
                decision.branch_created = Some(branch_id);
                log.push(GrowthEvent::BranchCreated {
                    index,
                    at_node: at,
                    branch_id,
                    seed,
                });
            }
        }
        log.push(GrowthEvent::Route { index, decision });
        tree.inputs_seen += 1;
    }
    Ok(log)
}

/// Rebuilds the grown tree from the tree `grow` started with and its log.
pub fn replay(initial: &CactusTree, log: &GrowthLog) -> Result<CactusTree, CactusError> {
    let mut tree = initial.clone();
    for event in &log.events {
        match event {
            GrowthEvent::BranchCreated {
                index,
                at_node,
                branch_id,
                seed,
            } => {
                let id = tree.create_branch(*at_node, *seed)?;
                if id != *branch_id {
                    return Err(CactusError::Log(format!(
                        "input {index}: expected branch {branch_id}, replay created {id}"
                    )));
                }
                let root = tree.branch_root(id).expect("just created");
                tree.nodes[root].absorbed.push(*index);
            }
            GrowthEvent::Route { index, decision } => {
                if let Some(b) = decision.absorbed_by {
                    let root = tree
                        .branch_root(b)
                        .ok_or_else(|| CactusError::Log(format!("input {index}: no branch {b}")))?;
                    tree.nodes[root].absorbed.push(*index);
                }
                tree.inputs_seen = tree.inputs_seen.max(index + 1);
            }
        }
    }
    Ok(tree)
}
