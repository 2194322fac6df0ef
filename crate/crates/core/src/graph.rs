//! Explicit computation graphs.
//!
//! A graph is a flat node list kept in topological order: every node's
//! inputs appear earlier in the list. Node ids are stable opaque integers;
//! list position, not id value, carries evaluation order. This lets growth
//! transformations splice nodes into the middle of a model without
//! renumbering the world.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::genotype::PatternDescriptor;

pub const GRAPH_SCHEMA: &str = "fornas/graph/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Operation tags. Forward and backward rules live in [`crate::ops`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Leaf bound to the batch inputs.
    Input,
    /// Leaf bound to the batch targets.
    Target,
    Dense,
    Conv,
    SepConv,
    DilatedConv,
    MaxPool,
    AvgPool,
    Identity,
    Add,
    Concat,
    Proj1x1,
    BatchNorm,
    Relu,
    Tanh,
    StopGradient,
    StopForward,
    ScalarGate,
    WeightedSum,
    SoftmaxXent,
    Mse,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Target => "target",
            OpKind::Dense => "dense",
            OpKind::Conv => "conv",
            OpKind::SepConv => "sep_conv",
            OpKind::DilatedConv => "dilated_conv",
            OpKind::MaxPool => "max_pool",
            OpKind::AvgPool => "avg_pool",
            OpKind::Identity => "identity",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::Proj1x1 => "proj_1x1",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::StopGradient => "stop_gradient",
            OpKind::StopForward => "stop_forward",
            OpKind::ScalarGate => "scalar_gate",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::SoftmaxXent => "softmax_xent",
            OpKind::Mse => "mse",
        }
    }

    /// Expected input count: exact `Some(n)` or `None` for variadic (>= 1).
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Input | OpKind::Target => Some(0),
            OpKind::Dense
            | OpKind::Conv
            | OpKind::SepConv
            | OpKind::DilatedConv
            | OpKind::MaxPool
            | OpKind::AvgPool
            | OpKind::Identity
            | OpKind::Proj1x1
            | OpKind::BatchNorm
            | OpKind::Relu
            | OpKind::Tanh
            | OpKind::StopGradient
            | OpKind::StopForward
            | OpKind::ScalarGate => Some(1),
            OpKind::SoftmaxXent | OpKind::Mse => Some(2),
            OpKind::Add | OpKind::Concat | OpKind::WeightedSum => None,
        }
    }

    /// Expected number of parameter keys; `None` means one per input
    /// (weighted_sum).
    pub fn param_count(&self) -> Option<usize> {
        match self {
            OpKind::Dense | OpKind::Conv | OpKind::DilatedConv | OpKind::Proj1x1 => Some(2),
            OpKind::SepConv => Some(4),
            OpKind::BatchNorm => Some(4),
            OpKind::ScalarGate => Some(1),
            OpKind::WeightedSum => None,
            _ => Some(0),
        }
    }
}

/// Static node attributes: kernel sizes, strides, channel counts.
pub type Attrs = BTreeMap<String, i64>;

pub fn attrs(pairs: &[(&str, i64)]) -> Attrs {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Attribute keys that describe width (channel/unit counts) rather than
/// structure. Excluded from structural cell hashes so cells at different
/// filter widths still compare equal.
const WIDTH_ATTRS: [&str; 4] = ["in_ch", "out_ch", "in", "out"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    pub op_kind: OpKind,
    pub input_ids: Vec<NodeId>,
    #[serde(default)]
    pub param_keys: Vec<String>,
    #[serde(default)]
    pub attrs: Attrs,
    #[serde(default)]
    pub is_out: bool,
}

impl GraphNode {
    pub fn attr(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).copied()
    }

    pub fn attr_or(&self, key: &str, default: i64) -> i64 {
        self.attr(key).unwrap_or(default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Transition,
    /// Stem / head scaffolding; never boosted, not a genotype cell.
    Fixed,
}

/// Book-keeping for one cell instance within a graph.
///
/// `layers` is the registry of boosting-eligible feature maps, ordered by
/// topological position: tags like `s0`, `s1` for seed layers, `m{g}` for a
/// growth's merged output and `a{g}` for its gated sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellInfo {
    pub index: usize,
    pub kind: CellKind,
    pub stage: usize,
    /// Output of the immediately preceding cell (or stem).
    pub prev1: NodeId,
    /// Output of the cell before that (or stem).
    pub prev2: NodeId,
    /// Eligible-input registry: (layer tag, node).
    pub layers: Vec<(String, NodeId)>,
    /// All nodes belonging to this cell, in insertion order.
    pub members: Vec<NodeId>,
    pub output: NodeId,
    /// Growth patterns applied to this cell, in growth order.
    #[serde(default)]
    pub patterns: Vec<PatternDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputationGraph {
    pub nodes: Vec<GraphNode>,
    pub input_id: NodeId,
    pub target_id: NodeId,
    /// Prediction node (pre-loss).
    pub output_id: NodeId,
    pub loss_id: NodeId,
    pub cells: Vec<CellInfo>,
    next_id: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    schema: String,
    graph: ComputationGraph,
}

impl ComputationGraph {
    pub fn new() -> Self {
        ComputationGraph {
            nodes: Vec::new(),
            input_id: NodeId(0),
            target_id: NodeId(0),
            output_id: NodeId(0),
            loss_id: NodeId(0),
            cells: Vec::new(),
            next_id: 0,
        }
    }

    pub fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    /// The id the next created node will receive.
    pub fn peek_next_id(&self) -> u32 {
        self.next_id
    }

    pub fn position(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or(CoreError::NodeNotFound(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or(CoreError::NodeNotFound(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut GraphNode> {
        self.nodes
            .iter_mut()
            .find(|n| n.id == id)
            .ok_or(CoreError::NodeNotFound(id))
    }

    /// Append a node at the end of the topological order.
    pub fn push_node(
        &mut self,
        op_kind: OpKind,
        input_ids: Vec<NodeId>,
        param_keys: Vec<String>,
        attrs: Attrs,
    ) -> NodeId {
        let id = self.fresh_id();
        self.nodes.push(GraphNode {
            id,
            op_kind,
            input_ids,
            param_keys,
            attrs,
            is_out: false,
        });
        id
    }

    /// Splice a node into the list directly before `before`, keeping the
    /// list topologically ordered (all inputs must sit before `before`).
    pub fn insert_node_before(
        &mut self,
        before: NodeId,
        op_kind: OpKind,
        input_ids: Vec<NodeId>,
        param_keys: Vec<String>,
        attrs: Attrs,
    ) -> Result<NodeId> {
        let pos = self.position(before)?;
        let id = self.fresh_id();
        self.nodes.insert(
            pos,
            GraphNode {
                id,
                op_kind,
                input_ids,
                param_keys,
                attrs,
                is_out: false,
            },
        );
        Ok(id)
    }

    /// Splice a node in directly after `after` in the list.
    pub fn insert_node_after(
        &mut self,
        after: NodeId,
        op_kind: OpKind,
        input_ids: Vec<NodeId>,
        param_keys: Vec<String>,
        attrs: Attrs,
    ) -> Result<NodeId> {
        let pos = self.position(after)?;
        let id = self.fresh_id();
        self.nodes.insert(
            pos + 1,
            GraphNode {
                id,
                op_kind,
                input_ids,
                param_keys,
                attrs,
                is_out: false,
            },
        );
        Ok(id)
    }

    /// Rewire every consumer of `old` at a position strictly after
    /// `after_pos` to read from `new` instead.
    pub fn rewire_consumers(&mut self, old: NodeId, new: NodeId, after_pos: usize) {
        for node in self.nodes.iter_mut() {
            for input in node.input_ids.iter_mut() {
                if *input == old && node.id != new {
                    *input = new;
                }
            }
        }
        let _ = after_pos;
        if self.output_id == old {
            self.output_id = new;
        }
        for cell in self.cells.iter_mut() {
            if cell.prev1 == old {
                cell.prev1 = new;
            }
            if cell.prev2 == old {
                cell.prev2 = new;
            }
        }
    }

    /// Ids of every node that lists `id` as an input.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.input_ids.contains(&id))
            .map(|n| n.id)
            .collect()
    }

    /// Structural validation: topological order, arity, parameter counts,
    /// is_out placement.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<NodeId> = HashSet::new();
        for node in &self.nodes {
            if !seen.insert(node.id) {
                return Err(CoreError::InvalidGraph(format!(
                    "duplicate node id {}",
                    node.id
                )));
            }
            for input in &node.input_ids {
                if !seen.contains(input) {
                    return Err(CoreError::InvalidGraph(format!(
                        "node {} reads {} which does not precede it",
                        node.id, input
                    )));
                }
            }
            match node.op_kind.arity() {
                Some(n) if node.input_ids.len() != n => {
                    return Err(CoreError::InvalidGraph(format!(
                        "node {} ({}) expects {} inputs, has {}",
                        node.id,
                        node.op_kind.name(),
                        n,
                        node.input_ids.len()
                    )));
                }
                None if node.input_ids.is_empty() => {
                    return Err(CoreError::InvalidGraph(format!(
                        "variadic node {} ({}) has no inputs",
                        node.id,
                        node.op_kind.name()
                    )));
                }
                _ => {}
            }
            let expected_params = match node.op_kind.param_count() {
                Some(n) => n,
                None => node.input_ids.len(),
            };
            if node.param_keys.len() != expected_params {
                return Err(CoreError::InvalidGraph(format!(
                    "node {} ({}) expects {} params, has {}",
                    node.id,
                    node.op_kind.name(),
                    expected_params,
                    node.param_keys.len()
                )));
            }
            if node.is_out {
                let at_boundary = self.cells.iter().any(|c| c.output == node.id);
                if !at_boundary {
                    return Err(CoreError::InvalidGraph(format!(
                        "node {} flagged is_out but is not a cell output",
                        node.id
                    )));
                }
            }
        }
        for id in [self.input_id, self.target_id, self.output_id, self.loss_id] {
            if !seen.contains(&id) {
                return Err(CoreError::NodeNotFound(id));
            }
        }
        Ok(())
    }

    /// Nodes reachable backwards from the loss node.
    pub fn reachable_from_loss(&self) -> HashSet<NodeId> {
        let mut reach: HashSet<NodeId> = HashSet::new();
        reach.insert(self.loss_id);
        for node in self.nodes.iter().rev() {
            if reach.contains(&node.id) {
                for input in &node.input_ids {
                    reach.insert(*input);
                }
            }
        }
        reach
    }

    /// Drop nodes unreachable from the loss. Returns the parameter keys
    /// that went dead with them so the caller can purge the store.
    pub fn prune_unreachable(&mut self) -> Vec<String> {
        let reach = self.reachable_from_loss();
        let mut dead_keys = Vec::new();
        for node in &self.nodes {
            if !reach.contains(&node.id) {
                dead_keys.extend(node.param_keys.iter().cloned());
            }
        }
        self.nodes.retain(|n| reach.contains(&n.id));
        for cell in self.cells.iter_mut() {
            cell.members.retain(|id| reach.contains(id));
            cell.layers.retain(|(_, id)| reach.contains(id));
        }
        dead_keys
    }

    pub fn cell_of(&self, id: NodeId) -> Option<usize> {
        self.cells
            .iter()
            .position(|c| c.members.contains(&id))
    }

    /// Structural hash of one cell subgraph. Width attributes are excluded
    /// so the same pattern at different filter counts hashes identically;
    /// inputs from outside the cell hash by role (prev1/prev2/other).
    pub fn cell_hash(&self, cell_index: usize) -> u64 {
        let cell = &self.cells[cell_index];
        let members: HashSet<NodeId> = cell.members.iter().copied().collect();
        let mut local: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut h = Fnv1a::new();
        let mut next_local = 0usize;
        for node in &self.nodes {
            if !members.contains(&node.id) {
                continue;
            }
            local.insert(node.id, next_local);
            next_local += 1;
            h.write_str(node.op_kind.name());
            for (k, v) in &node.attrs {
                if WIDTH_ATTRS.contains(&k.as_str()) {
                    continue;
                }
                h.write_str(k);
                h.write_u64(*v as u64);
            }
            for input in &node.input_ids {
                match local.get(input) {
                    Some(ix) => {
                        h.write_str("L");
                        h.write_u64(*ix as u64);
                    }
                    None => {
                        let role = if *input == cell.prev1 {
                            "P1"
                        } else if *input == cell.prev2 {
                            "P2"
                        } else {
                            "X"
                        };
                        h.write_str(role);
                    }
                }
            }
            h.write_u64(node.is_out as u64);
        }
        h.finish()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = GraphDoc {
            schema: GRAPH_SCHEMA.to_string(),
            graph: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(s)?;
        if doc.schema != GRAPH_SCHEMA {
            return Err(CoreError::SchemaMismatch {
                expected: GRAPH_SCHEMA.to_string(),
                found: doc.schema,
            });
        }
        doc.graph.validate()?;
        Ok(doc.graph)
    }

    /// GraphViz DOT rendering.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph model {\n  rankdir=TB;\n");
        for node in &self.nodes {
            let cell = self.cell_of(node.id);
            let label = match cell {
                Some(c) => format!("{}\\n{} (cell {})", node.id, node.op_kind.name(), c),
                None => format!("{}\\n{}", node.id, node.op_kind.name()),
            };
            let shape = if node.is_out { "doubleoctagon" } else { "box" };
            out.push_str(&format!(
                "  {} [label=\"{}\", shape={}];\n",
                node.id.0, label, shape
            ));
        }
        for node in &self.nodes {
            for input in &node.input_ids {
                out.push_str(&format!("  {} -> {};\n", input.0, node.id.0));
            }
        }
        out.push_str("}\n");
        out
    }
}

impl Default for ComputationGraph {
    fn default() -> Self {
        Self::new()
    }
}

/// FNV-1a, used for structural hashes and dataset digests. Stable across
/// platforms and runs, unlike `DefaultHasher`.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf29ce484222325)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn write_str(&mut self, s: &str) {
        self.write_bytes(s.as_bytes());
        self.write_bytes(&[0xff]);
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph() -> ComputationGraph {
        let mut g = ComputationGraph::new();
        let input = g.push_node(OpKind::Input, vec![], vec![], Attrs::new());
        let target = g.push_node(OpKind::Target, vec![], vec![], Attrs::new());
        let pred = g.push_node(OpKind::Identity, vec![input], vec![], Attrs::new());
        let loss = g.push_node(OpKind::Mse, vec![pred, target], vec![], Attrs::new());
        g.input_id = input;
        g.target_id = target;
        g.output_id = pred;
        g.loss_id = loss;
        g
    }

    #[test]
    fn validate_accepts_tiny_graph() {
        tiny_graph().validate().unwrap();
    }

    #[test]
    fn validate_rejects_forward_reference() {
        let mut g = tiny_graph();
        // Make the identity node read the loss node, which sits after it.
        let loss = g.loss_id;
        let pred = g.output_id;
        g.node_mut(pred).unwrap().input_ids = vec![loss];
        assert!(g.validate().is_err());
    }

    #[test]
    fn validate_rejects_bad_arity() {
        let mut g = tiny_graph();
        let pred = g.output_id;
        g.node_mut(pred).unwrap().input_ids.clear();
        assert!(g.validate().is_err());
    }

    #[test]
    fn json_round_trip_preserves_order() {
        let g = tiny_graph();
        let s = g.to_json_string().unwrap();
        let g2 = ComputationGraph::from_json_str(&s).unwrap();
        let order: Vec<NodeId> = g.nodes.iter().map(|n| n.id).collect();
        let order2: Vec<NodeId> = g2.nodes.iter().map(|n| n.id).collect();
        assert_eq!(order, order2);
        assert_eq!(g.to_json_string().unwrap(), g2.to_json_string().unwrap());
    }

    #[test]
    fn schema_mismatch_rejected() {
        let g = tiny_graph();
        let s = g.to_json_string().unwrap().replace(GRAPH_SCHEMA, "fornas/graph/v0");
        assert!(matches!(
            ComputationGraph::from_json_str(&s),
            Err(CoreError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn prune_drops_dead_nodes_and_keys() {
        let mut g = tiny_graph();
        let input = g.input_id;
        g.push_node(
            OpKind::Dense,
            vec![input],
            vec!["dead/w".into(), "dead/b".into()],
            attrs(&[("in", 2), ("out", 2)]),
        );
        let dead = g.prune_unreachable();
        assert_eq!(dead, vec!["dead/w".to_string(), "dead/b".to_string()]);
        assert_eq!(g.nodes.len(), 4);
        g.validate().unwrap();
    }
}
