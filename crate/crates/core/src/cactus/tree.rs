use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::checkpoint::{read_file, write_atomic};
use crate::nn::{load_checkpoint, save_checkpoint, Network, NnError, Tensor};
use crate::predictor::{load_predictor, save_predictor, PredictorModel};
use crate::seed::mix;

use super::{
    best_of, select_candidate, CactusError, Candidate, StepOutcome, Thresholds, Verdict,
    VerdictKind,
};

pub type NodeId = usize;

/// Output classifier at the end of a path.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafHead {
    pub network: Network,
    /// Output unit `i` predicts `labels[i]`. Empty for a new branch.
    pub labels: Vec<String>,
    /// Label given to inputs reaching a branch that has no labels yet.
    pub provisional_label: Option<String>,
}

impl LeafHead {
    fn label_for(&self, activation: &Tensor) -> Result<String, CactusError> {
        let out = self.network.predict(activation)?;
        let idx = out.argmax_rows()[0];
        Ok(self
            .labels
            .get(idx)
            .cloned()
            .or_else(|| self.provisional_label.clone())
            .unwrap_or_else(|| format!("output-{idx}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CactusNode {
    pub id: NodeId,
    /// 0 for the trunk; each created branch gets the next id.
    pub branch_id: u32,
    pub parent: Option<NodeId>,
    /// 1 for the root block.
    pub depth: usize,
    pub block: Network,
    pub predictor: Option<PredictorModel>,
    pub thresholds: Option<Thresholds>,
    pub children: Vec<NodeId>,
    pub head: Option<LeafHead>,
    /// Created by growth and not yet given a predictor; skipped when
    /// scoring candidates.
    pub provisional: bool,
    /// Stream positions of the inputs this branch root absorbed.
    pub absorbed: Vec<usize>,
}

/// Scores a node's output activation. `input` is the original image.
pub trait ApplicabilityScorer {
    fn score(
        &self,
        node: &CactusNode,
        activation: &Tensor,
        input: &Tensor,
    ) -> Result<f64, CactusError>;
}

impl<F> ApplicabilityScorer for F
where
    F: Fn(&CactusNode, &Tensor, &Tensor) -> f64,
{
    fn score(
        &self,
        node: &CactusNode,
        activation: &Tensor,
        input: &Tensor,
    ) -> Result<f64, CactusError> {
        Ok(self(node, activation, input))
    }
}

/// Uses each node's installed predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct PredictorScorer;

impl ApplicabilityScorer for PredictorScorer {
    fn score(
        &self,
        node: &CactusNode,
        activation: &Tensor,
        _input: &Tensor,
    ) -> Result<f64, CactusError> {
        let model = node
            .predictor
            .as_ref()
            .ok_or(CactusError::UntrainedPredictor(node.id))?;
        Ok(model.predict_batch(activation)?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CactusTree {
    pub nodes: Vec<CactusNode>,
    pub decision_depth: usize,
    pub next_branch: u32,
    /// Stream inputs processed by growth so far.
    pub inputs_seen: usize,
}

/// Outcome of routing one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    #[serde(flatten)]
    pub verdict: Verdict,
    /// Nodes traversed from the root.
    pub path: Vec<NodeId>,
    /// Predicted applicability of each node on `path`.
    pub apps: Vec<f64>,
    pub decision_node: NodeId,
    pub decision_app: f64,
    /// Depths at which no candidate cleared its lower threshold; descent
    /// continued through the best one.
    pub below_threshold_depths: Vec<usize>,
    pub branch_created: Option<u32>,
    pub absorbed_by: Option<u32>,
    /// Below threshold but the branch limit was reached.
    pub unrouted: bool,
}

impl CactusTree {
    /// Splits `net` into blocks ending at each tap layer; layers after the
    /// last tap become the leaf head of the deepest trunk node.
    pub fn from_trunk(
        net: &Network,
        taps: &[usize],
        labels: Vec<String>,
        decision_depth: usize,
    ) -> Result<Self, CactusError> {
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CactusError::Tree(format!(
                "taps {taps:?} must be increasing"
            )));
        }
        let last = *taps.last().expect("nonempty");
        if last + 1 >= net.len() {
            return Err(CactusError::Tree(format!(
                "last tap {last} leaves no head layers (network has {})",
                net.len()
            )));
        }
        if decision_depth == 0 || decision_depth > taps.len() {
            return Err(CactusError::Tree(format!(
                "decision depth {decision_depth} outside 1..={}",
                taps.len()
            )));
        }
        let mut nodes = Vec::with_capacity(taps.len());
        let mut start = 0;
        for (i, &tap) in taps.iter().enumerate() {
            nodes.push(CactusNode {
                id: i,
                branch_id: 0,
                parent: i.checked_sub(1),
                depth: i + 1,
                block: net.slice(start, tap + 1)?,
                predictor: None,
                thresholds: None,
                children: if i + 1 < taps.len() {
                    vec![i + 1]
                } else {
                    vec![]
                },
                head: None,
                provisional: false,
                absorbed: Vec::new(),
            });
            start = tap + 1;
        }
        let head = net.slice(start, net.len())?;
        if head.output_shape() != [labels.len()] {
            return Err(CactusError::Tree(format!(
                "head emits {:?} but {} labels were given",
                head.output_shape(),
                labels.len()
            )));
        }
        nodes.last_mut().expect("nonempty").head = Some(LeafHead {
            network: head,
            labels,
            provisional_label: None,
        });
        Ok(CactusTree {
            nodes,
            decision_depth,
            next_branch: 1,
            inputs_seen: 0,
        })
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> Result<&CactusNode, CactusError> {
        self.nodes.get(id).ok_or(CactusError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut CactusNode, CactusError> {
        self.nodes.get_mut(id).ok_or(CactusError::UnknownNode(id))
    }

    /// Trunk nodes ordered by depth.
    pub fn trunk(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.branch_id == 0)
            .map(|n| n.id)
            .collect()
    }

    pub fn trunk_node_at(&self, depth: usize) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.branch_id == 0 && n.depth == depth)
            .map(|n| n.id)
    }

    pub fn branch_count(&self) -> usize {
        (self.next_branch - 1) as usize
    }

    /// Branch roots (children on another branch) hanging off `node`.
    pub fn branches_at(&self, node: NodeId) -> Vec<NodeId> {
        let n = &self.nodes[node];
        n.children
            .iter()
            .copied()
            .filter(|c| self.nodes[*c].branch_id != n.branch_id)
            .collect()
    }

    pub fn install_predictor(
        &mut self,
        node: NodeId,
        model: PredictorModel,
    ) -> Result<(), CactusError> {
        self.node_mut(node)?.predictor = Some(model);
        Ok(())
    }

    pub fn set_thresholds(&mut self, node: NodeId, t: Thresholds) -> Result<(), CactusError> {
        self.node_mut(node)?.thresholds = Some(t);
        Ok(())
    }

    /// Children that take part in scoring.
    pub fn routable_children(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes[node]
            .children
            .iter()
            .copied()
            .filter(|c| !self.nodes[*c].provisional)
            .collect()
    }

    /// One routing step at `node`, given one predicted applicability per
    /// routable child (in `routable_children` order).
    pub fn route_step(&self, node: NodeId, apps: &[f64]) -> Result<StepOutcome, CactusError> {
        let candidates = self.candidates(node, apps)?;
        Ok(select_candidate(&candidates))
    }

    fn candidates(&self, node: NodeId, apps: &[f64]) -> Result<Vec<Candidate>, CactusError> {
        self.node(node)?;
        let children = self.routable_children(node);
        if children.len() != apps.len() {
            return Err(CactusError::CountMismatch {
                candidates: children.len(),
                predictions: apps.len(),
            });
        }
        children
            .iter()
            .zip(apps)
            .map(|(&c, &app)| {
                let child = &self.nodes[c];
                let t = child.thresholds.ok_or(CactusError::MissingThresholds(c))?;
                Ok(Candidate {
                    node: c,
                    branch_id: child.branch_id,
                    app,
                    tau2: t.tau2,
                })
            })
            .collect()
    }

    /// Grows a provisional branch off `at`: fresh copies of every trunk
    /// block below `at`'s depth plus a fresh head, initialized from `seed`.
    pub fn create_branch(&mut self, at: NodeId, seed: u64) -> Result<u32, CactusError> {
        let parent = self.node(at)?;
        let depth = parent.depth;
        let in_shape = parent.block.output_shape().to_vec();
        let trunk_below: Vec<NodeId> = self
            .trunk()
            .into_iter()
            .filter(|&t| self.nodes[t].depth > depth)
            .collect();
        let trunk_leaf = *self.trunk().last().expect("trunk nonempty");
        let template_head = self.nodes[trunk_leaf]
            .head
            .as_ref()
            .ok_or_else(|| CactusError::Tree("trunk has no head".into()))?;

        if trunk_below.is_empty() {
            return Err(CactusError::Tree(format!(
                "node {at} is at the deepest block; nothing to branch"
            )));
        }
        let branch_id = self.next_branch;
        let mut shape = in_shape;
        let mut blocks = Vec::new();
        for (i, &t) in trunk_below.iter().enumerate() {
            let arch = self.nodes[t].block.architecture();
            let block = Network::new(&shape, arch.layers, mix(&[seed, i as u64]))?;
            shape = block.output_shape().to_vec();
            blocks.push(block);
        }
        let head_arch = template_head.network.architecture();
        let head = Network::new(&shape, head_arch.layers, mix(&[seed, 0x4EAD]))?;

        let mut parent_id = at;
        for (i, block) in blocks.into_iter().enumerate() {
            let id = self.nodes.len();
            self.nodes.push(CactusNode {
                id,
                branch_id,
                parent: Some(parent_id),
                depth: depth + 1 + i,
                block,
                predictor: None,
                thresholds: None,
                children: Vec::new(),
                head: None,
                provisional: true,
                absorbed: Vec::new(),
            });
            self.nodes[parent_id].children.push(id);
            parent_id = id;
        }
        let leaf_head = LeafHead {
            network: head,
            labels: Vec::new(),
            provisional_label: Some(format!("new-{branch_id}")),
        };
        self.nodes[parent_id].head = Some(leaf_head);
        self.next_branch += 1;
        log::info!("created branch {branch_id} at node {at} (depth {depth})");
        Ok(branch_id)
    }

    pub fn branch_root(&self, branch_id: u32) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.branch_id == branch_id)
            .map(|n| n.id)
    }
}

fn batch_of(input: &Tensor) -> Result<Tensor, NnError> {
    let mut shape = vec![1];
    shape.extend(input.shape());
    input.clone().reshape(shape)
}

/// Routes `input` (`[h, w, c]`) through the tree without modifying it.
pub fn classify_or_flag(
    tree: &CactusTree,
    input: &Tensor,
    scorer: &dyn ApplicabilityScorer,
) -> Result<RouteDecision, CactusError> {
    let x = batch_of(input)?;
    let root = tree.root();
    let mut node = root;
    let mut act = tree.nodes[root].block.predict(&x)?;
    let mut app = scorer.score(&tree.nodes[root], &act, input)?;
    let mut path = vec![root];
    let mut apps = vec![app];
    let mut below = Vec::new();
    let mut decision: Option<(NodeId, f64, VerdictKind)> = None;
    loop {
        let n = &tree.nodes[node];
        if n.depth == tree.decision_depth && decision.is_none() {
            let t = n.thresholds.ok_or(CactusError::MissingThresholds(node))?;
            let kind = t.verdict(app);
            decision = Some((node, app, kind));
            if kind != VerdictKind::Known {
                break;
            }
        }
        let children = tree.routable_children(node);
        if children.is_empty() {
            break;
        }
        let mut child_acts = Vec::with_capacity(children.len());
        let mut child_apps = Vec::with_capacity(children.len());
        for &c in &children {
            let a = tree.nodes[c].block.predict(&act)?;
            child_apps.push(scorer.score(&tree.nodes[c], &a, input)?);
            child_acts.push(a);
        }
        let candidates = tree.candidates(node, &child_apps)?;
        let chosen = match select_candidate(&candidates) {
            StepOutcome::Child(c) => c,
            StepOutcome::BranchNeeded => {
                below.push(n.depth + 1);
                best_of(candidates.iter()).expect("children nonempty").node
            }
        };
        let pos = children
            .iter()
            .position(|&c| c == chosen)
            .expect("chosen is a child");
        node = chosen;
        act = child_acts.swap_remove(pos);
        app = child_apps[pos];
        path.push(node);
        apps.push(app);
    }
    let (decision_node, decision_app, kind) =
        decision.ok_or_else(|| CactusError::Tree("path ended above the decision depth".into()))?;
    let verdict = match kind {
        VerdictKind::Known => {
            let leaf = &tree.nodes[node];
            let head = leaf
                .head
                .as_ref()
                .ok_or_else(|| CactusError::Tree(format!("leaf node {node} has no head")))?;
            Verdict::Known {
                label: head.label_for(&act)?,
            }
        }
        VerdictKind::ObjectiveUnknown => Verdict::ObjectiveUnknown,
        VerdictKind::NonobjectiveUnknown => Verdict::NonobjectiveUnknown,
    };
    Ok(RouteDecision {
        verdict,
        path,
        apps,
        decision_node,
        decision_app,
        below_threshold_depths: below,
        branch_created: None,
        absorbed_by: None,
        unrouted: false,
    })
}

#[derive(Serialize, Deserialize)]
struct HeadRecord {
    checkpoint: String,
    labels: Vec<String>,
    provisional_label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    branch_id: u32,
    parent: Option<NodeId>,
    depth: usize,
    children: Vec<NodeId>,
    provisional: bool,
    absorbed: Vec<usize>,
    thresholds: Option<Thresholds>,
    block_checkpoint: String,
    predictor_checkpoint: Option<String>,
    head: Option<HeadRecord>,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    format_version: u32,
    decision_depth: usize,
    next_branch: u32,
    inputs_seen: usize,
    nodes: Vec<NodeRecord>,
}

const TREE_FILE: &str = "tree.json";

/// Writes `tree.json` plus one checkpoint per block, head and predictor.
pub fn save_tree(tree: &CactusTree, dir: &Path) -> Result<(), CactusError> {
    std::fs::create_dir_all(dir).map_err(|e| CactusError::Io(format!("{}: {e}", dir.display())))?;
    let mut nodes = Vec::with_capacity(tree.nodes.len());
    for n in &tree.nodes {
        let block_checkpoint = format!("node-{:03}.ckpt", n.id);
        save_checkpoint(&n.block, &dir.join(&block_checkpoint))?;
        let predictor_checkpoint = match &n.predictor {
            Some(p) => {
                let name = format!("node-{:03}.pred", n.id);
                save_predictor(p, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let head = match &n.head {
            Some(h) => {
                let name = format!("node-{:03}-head.ckpt", n.id);
                save_checkpoint(&h.network, &dir.join(&name))?;
                Some(HeadRecord {
                    checkpoint: name,
                    labels: h.labels.clone(),
                    provisional_label: h.provisional_label.clone(),
                })
            }
            None => None,
        };
        nodes.push(NodeRecord {
            id: n.id,
            branch_id: n.branch_id,
            parent: n.parent,
            depth: n.depth,
            children: n.children.clone(),
            provisional: n.provisional,
            absorbed: n.absorbed.clone(),
            thresholds: n.thresholds,
            block_checkpoint,
            predictor_checkpoint,
            head,
        });
    }
    let record = TreeRecord {
        format_version: 1,
        decision_depth: tree.decision_depth,
        next_branch: tree.next_branch,
        inputs_seen: tree.inputs_seen,
        nodes,
    };
    let json = serde_json::to_string_pretty(&record).expect("tree serializes");
    write_atomic(&dir.join(TREE_FILE), format!("{json}\n").as_bytes())?;
    Ok(())
}

pub fn load_tree(dir: &Path) -> Result<CactusTree, CactusError> {
    let bytes = read_file(&dir.join(TREE_FILE))?;
    let record: TreeRecord =
        serde_json::from_slice(&bytes).map_err(|e| CactusError::Tree(e.to_string()))?;
    let mut nodes = Vec::with_capacity(record.nodes.len());
    for (i, r) in record.nodes.into_iter().enumerate() {
        if r.id != i {
            return Err(CactusError::Tree(format!("node ids out of order at {i}")));
        }
        let head = match r.head {
            Some(h) => Some(LeafHead {
                network: load_checkpoint(&dir.join(&h.checkpoint))?,
                labels: h.labels,
                provisional_label: h.provisional_label,
            }),
            None => None,
        };
        let predictor = match &r.predictor_checkpoint {
            Some(p) => Some(load_predictor(&dir.join(p))?),
            None => None,
        };
        nodes.push(CactusNode {
            id: r.id,
            branch_id: r.branch_id,
            parent: r.parent,
            depth: r.depth,
            block: load_checkpoint(&dir.join(&r.block_checkpoint))?,
            predictor,
            thresholds: r.thresholds,
            children: r.children,
            head,
            provisional: r.provisional,
            absorbed: r.absorbed,
        });
    }
    Ok(CactusTree {
        nodes,
        decision_depth: record.decision_depth,
        next_branch: record.next_branch,
        inputs_seen: record.inputs_seen,
    })
}
