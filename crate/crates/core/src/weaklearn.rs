//! Joint weak-learner construction and training.
//!
//! For every boosted layer x_k the candidate
//! x_c = sum_{i,j} alpha_{i,j} * op_j(sg(z_i)) is spliced in directly
//! before x_k, and x_k is replaced downstream by x_k + sf(x_c). The
//! stop-gradient inputs keep candidate training out of the parent model's
//! gradients; the stop-forward keeps candidate outputs out of the parent
//! model's predictions, while routing grad(x_k) of the loss straight into
//! the candidate. Selection pressure comes from an L1 penalty on the
//! alpha weights.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::construct::{bn_keys, ensure_const, InsertPoint, NodeFactory};
use crate::cost::resolve_shapes;
use crate::error::{CoreError, Result};
use crate::genotype::ShortcutOp;
use crate::graph::{Attrs, ComputationGraph, GraphNode, NodeId, OpKind};
use crate::growth::TaskShape;
use crate::optim::{train, ExtraLoss, TrainOptions};
use crate::params::ParameterStore;
use crate::tensor::TensorValue;

pub const ALPHA_INIT: f64 = 1e-3;

/// Eligible input layers for one boosted layer, ascending topological
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputScope {
    pub eligible: Vec<NodeId>,
}

/// One shortcut candidate: op_j applied to sg(z_i), batch-normalized,
/// weighted by alpha_{i,j}.
#[derive(Debug, Clone)]
pub struct ShortcutTerm {
    pub input_node: NodeId,
    pub op: ShortcutOp,
    /// Key of alpha_{i,j} in the parameter store.
    pub weight_key: String,
    pub bn_keys: Vec<String>,
    pub input_index: usize,
    pub op_index: usize,
    /// Stop-gradient guard (absent in the Joint ablation).
    pub sg_node: Option<NodeId>,
    /// Batch-norm output feeding the joint weighted sum.
    pub output_node: NodeId,
    pub key_prefix: String,
}

/// How the candidate attaches to the model.
#[derive(Debug, Clone, Copy)]
pub enum Shield {
    /// x_k + sf(x_c): predictions and parent gradients untouched.
    Isolated { sf_node: NodeId },
    /// x_k + eta * x_c with eta trainable from 0; no sg/sf guards.
    Joint { gate_node: NodeId },
}

/// Weak-learner state for one boosted layer.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// The boosted layer x_k (pre-augmentation cell output).
    pub target_node: NodeId,
    /// The joint weighted-sum node x_c.
    pub candidate_node: NodeId,
    pub terms: Vec<ShortcutTerm>,
    pub lambda: f64,
    pub shield: Shield,
    /// The add node that now computes x_k + sf(x_c).
    pub add_node: NodeId,
    pub cell_index: usize,
    /// 1-based growth index within the cell.
    pub growth_index: usize,
}

/// Inputs eligible for shortcuts into `x_k`: layers topologically earlier
/// than x_k that are in the same cell, plus the outputs of the previous
/// two cells. Deterministic, duplicate-free, ascending topological order.
pub fn enumerate_inputs(
    graph: &ComputationGraph,
    x_k: NodeId,
    _mode: crate::genotype::SearchMode,
) -> Result<InputScope> {
    let cell = graph
        .cells
        .iter()
        .find(|c| c.output == x_k)
        .ok_or(CoreError::NodeNotFound(x_k))?;
    let pos_k = graph.position(x_k)?;
    let mut eligible: Vec<NodeId> = Vec::new();
    let mut push = |id: NodeId| {
        if !eligible.contains(&id) {
            eligible.push(id);
        }
    };
    push(cell.prev2);
    push(cell.prev1);
    for (_, id) in &cell.layers {
        if graph.position(*id)? < pos_k {
            push(*id);
        }
    }
    let mut with_pos: Vec<(usize, NodeId)> = eligible
        .into_iter()
        .map(|id| graph.position(id).map(|p| (p, id)))
        .collect::<Result<_>>()?;
    with_pos.sort();
    Ok(InputScope {
        eligible: with_pos.into_iter().map(|(_, id)| id).collect(),
    })
}

/// Top-`i_max` indices by |alpha|, descending; ties break toward the
/// smaller (input index, op index). Returns everything (with a warning)
/// when fewer terms exist.
pub fn select_top(alphas: &[f64], tie_keys: &[(usize, usize)], i_max: usize) -> Vec<usize> {
    debug_assert_eq!(alphas.len(), tie_keys.len());
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| {
        alphas[b]
            .abs()
            .partial_cmp(&alphas[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(tie_keys[a].cmp(&tie_keys[b]))
    });
    if alphas.len() < i_max {
        log::warn!(
            "only {} shortcut terms available, wanted {i_max}; keeping all",
            alphas.len()
        );
    }
    order.truncate(i_max);
    order
}

/// Algorithm: for each layer passing `is_out`, enumerate eligible inputs,
/// splice in the joint candidate right before the layer, replace the layer
/// downstream with layer + sf(candidate), and accumulate the L1 selection
/// loss. Model predictions are unchanged by construction.
#[allow(clippy::too_many_arguments)]
pub fn initialize_candidates(
    graph: &mut ComputationGraph,
    params: &mut ParameterStore,
    is_out: &dyn Fn(&GraphNode) -> bool,
    lambda: f64,
    opset: &[ShortcutOp],
    isolated: bool,
    task: &TaskShape,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<CandidateSet>, ExtraLoss)> {
    if opset.is_empty() {
        return Err(CoreError::EmptyInput("shortcut opset is empty".into()));
    }
    let shapes = resolve_shapes(graph, task)?;
    let per_example = |id: NodeId| -> Result<Vec<usize>> {
        shapes
            .get(&id)
            .map(|s| s[1..].to_vec())
            .ok_or(CoreError::MissingActivation(id))
    };

    // scopes come from the pre-augmentation graph: all candidates read the
    // original layers even when several layers grow at once
    let targets: Vec<NodeId> = graph
        .nodes
        .iter()
        .filter(|n| is_out(n))
        .map(|n| n.id)
        .collect();
    let mut jobs = Vec::new();
    for x_k in targets {
        let cell_index = graph
            .cells
            .iter()
            .position(|c| c.output == x_k)
            .ok_or_else(|| {
                CoreError::InvalidGraph(format!("is_out node {x_k} is not a cell output"))
            })?;
        let mode = crate::genotype::SearchMode::Macro; // scope rule is mode-independent
        let scope = enumerate_inputs(graph, x_k, mode)?;
        if scope.eligible.is_empty() {
            log::warn!("no eligible inputs for boosted layer {x_k}; skipping");
            continue;
        }
        jobs.push((x_k, cell_index, scope));
    }

    let mut candidates = Vec::with_capacity(jobs.len());
    let mut extra = ExtraLoss::none();
    for (x_k, cell_index, scope) in jobs {
        let growth_index = graph.cells[cell_index].patterns.len() + 1;
        let target_shape = per_example(x_k)?;
        let mut terms: Vec<ShortcutTerm> = Vec::with_capacity(scope.eligible.len() * opset.len());
        let mut term_outputs = Vec::with_capacity(terms.capacity());
        let mut alpha_keys = Vec::with_capacity(terms.capacity());
        let mut new_members: Vec<NodeId> = Vec::new();
        for (input_index, &z) in scope.eligible.iter().enumerate() {
            let src_shape = per_example(z)?;
            for (op_index, &op) in opset.iter().enumerate() {
                let prefix = format!(
                    "c{cell_index}/g{growth_index}/t{}",
                    input_index * opset.len() + op_index
                );
                let chain = {
                    let mut fac =
                        NodeFactory::new(graph, params, rng, InsertPoint::Before(x_k));
                    fac.shortcut_chain(z, &src_shape, &target_shape, op, &prefix, isolated)?
                };
                let weight_key = format!("{prefix}/alpha");
                ensure_const(params, &weight_key, &[1], ALPHA_INIT, true);
                terms.push(ShortcutTerm {
                    input_node: z,
                    op,
                    weight_key: weight_key.clone(),
                    bn_keys: bn_keys(&prefix),
                    input_index,
                    op_index,
                    sg_node: chain.sg_node,
                    output_node: chain.output,
                    key_prefix: prefix,
                });
                term_outputs.push(chain.output);
                alpha_keys.push(weight_key);
                new_members.extend(chain.nodes);
            }
        }

        let candidate_node = graph.insert_node_before(
            x_k,
            OpKind::WeightedSum,
            term_outputs,
            alpha_keys.clone(),
            Attrs::new(),
        )?;
        new_members.push(candidate_node);

        let (attach, shield) = if isolated {
            let sf = graph.insert_node_before(
                x_k,
                OpKind::StopForward,
                vec![candidate_node],
                vec![],
                Attrs::new(),
            )?;
            new_members.push(sf);
            (sf, Shield::Isolated { sf_node: sf })
        } else {
            let gate_key = format!("c{cell_index}/g{growth_index}/joint_gate");
            ensure_const(params, &gate_key, &[1], 0.0, true);
            let gate = graph.insert_node_before(
                x_k,
                OpKind::ScalarGate,
                vec![candidate_node],
                vec![gate_key],
                Attrs::new(),
            )?;
            new_members.push(gate);
            (gate, Shield::Joint { gate_node: gate })
        };

        // x_k <- x_k + sf(x_c), spliced right after x_k; every downstream
        // consumer now reads the sum
        let add_node = graph.insert_node_after(
            x_k,
            OpKind::Add,
            vec![x_k, attach],
            vec![],
            Attrs::new(),
        )?;
        let add_pos = graph.position(add_node)?;
        for node in graph.nodes.iter_mut().skip(add_pos + 1) {
            for input in node.input_ids.iter_mut() {
                if *input == x_k {
                    *input = add_node;
                }
            }
        }
        if graph.output_id == x_k {
            graph.output_id = add_node;
        }
        for cell in graph.cells.iter_mut() {
            if cell.prev1 == x_k {
                cell.prev1 = add_node;
            }
            if cell.prev2 == x_k {
                cell.prev2 = add_node;
            }
        }
        new_members.push(add_node);
        graph.node_mut(x_k)?.is_out = false;
        graph.node_mut(add_node)?.is_out = true;
        let cell = &mut graph.cells[cell_index];
        cell.members.extend(new_members);
        cell.output = add_node;

        extra.groups.push((lambda, alpha_keys));
        candidates.push(CandidateSet {
            target_node: x_k,
            candidate_node,
            terms,
            lambda,
            shield,
            add_node,
            cell_index,
            growth_index,
        });
    }
    graph.validate()?;
    Ok((candidates, extra))
}

/// Outcome of a weak-learning round: the trained selection weights and the
/// per-epoch total objective (data loss + L1).
#[derive(Debug, Clone)]
pub struct WeakLearnOutcome {
    pub alphas: BTreeMap<String, f64>,
    pub epoch_losses: Vec<f64>,
}

/// Train the augmented model: the parent keeps training under its own
/// gradients while the candidates minimize <grad_{x_k} L, x_c> plus the
/// L1 selection penalty. Selection weights and gates are exempt from
/// weight decay.
#[allow(clippy::too_many_arguments)]
pub fn weak_learn(
    graph: &ComputationGraph,
    params: &mut ParameterStore,
    candidates: &[CandidateSet],
    extra: &ExtraLoss,
    inputs: &TensorValue,
    targets: &TensorValue,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<WeakLearnOutcome> {
    let mut opts = opts.clone();
    for cand in candidates {
        for term in &cand.terms {
            opts.no_decay_keys.push(term.weight_key.clone());
        }
        if let Shield::Joint { gate_node } = cand.shield {
            opts.no_decay_keys
                .push(graph.node(gate_node)?.param_keys[0].clone());
        }
    }
    let stats = train(graph, params, inputs, targets, extra, &opts, rng)
        .map_err(|e| match e {
            CoreError::Diverged(msg) => {
                CoreError::Diverged(format!("weak learning aborted: {msg}"))
            }
            other => other,
        })?;
    let mut alphas = BTreeMap::new();
    for cand in candidates {
        for term in &cand.terms {
            alphas.insert(term.weight_key.clone(), params.get(&term.weight_key)?.scalar_value());
        }
    }
    Ok(WeakLearnOutcome {
        alphas,
        epoch_losses: stats.iter().map(|s| s.mean_loss).collect(),
    })
}

/// One line of the per-round candidate report (JSONL).
#[derive(Debug, Clone, Serialize)]
pub struct CandidateRecord {
    pub target_node: u32,
    pub input_node: u32,
    pub op: &'static str,
    pub input_index: usize,
    pub op_index: usize,
    pub alpha: f64,
    pub selected: bool,
}

/// Flatten candidates + trained alphas into report records, marking the
/// top-`i_max` selection per candidate.
pub fn candidate_records(
    candidates: &[CandidateSet],
    alphas: &BTreeMap<String, f64>,
    i_max: usize,
) -> Vec<CandidateRecord> {
    let mut records = Vec::new();
    for cand in candidates {
        let a: Vec<f64> = cand
            .terms
            .iter()
            .map(|t| alphas.get(&t.weight_key).copied().unwrap_or(0.0))
            .collect();
        let ties: Vec<(usize, usize)> = cand
            .terms
            .iter()
            .map(|t| (t.input_index, t.op_index))
            .collect();
        let selected = select_top(&a, &ties, i_max);
        for (j, term) in cand.terms.iter().enumerate() {
            records.push(CandidateRecord {
                target_node: cand.target_node.0,
                input_node: term.input_node.0,
                op: term.op.name(),
                input_index: term.input_index,
                op_index: term.op_index,
                alpha: a[j],
                selected: selected.contains(&j),
            });
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_top_by_magnitude() {
        let alphas = [0.5, -0.9, 0.1, 0.3];
        let ties = [(0, 0), (0, 1), (1, 0), (1, 1)];
        assert_eq!(select_top(&alphas, &ties, 2), vec![1, 0]);
    }

    #[test]
    fn select_top_tie_break() {
        let alphas = [0.5, -0.5];
        let ties = [(0, 0), (0, 1)];
        assert_eq!(select_top(&alphas, &ties, 1), vec![0]);
    }

    #[test]
    fn select_top_short_input_returns_all() {
        let alphas = [0.5, -0.5];
        let ties = [(0, 0), (0, 1)];
        assert_eq!(select_top(&alphas, &ties, 3), vec![0, 1]);
    }

    #[test]
    fn select_top_permutation_invariant() {
        let alphas = [0.2, -0.8, 0.5, 0.5];
        let ties = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let picked: Vec<(usize, usize)> = select_top(&alphas, &ties, 2)
            .into_iter()
            .map(|i| ties[i])
            .collect();
        // permute the terms and select again
        let perm = [2usize, 0, 3, 1];
        let alphas_p: Vec<f64> = perm.iter().map(|&i| alphas[i]).collect();
        let ties_p: Vec<(usize, usize)> = perm.iter().map(|&i| ties[i]).collect();
        let picked_p: Vec<(usize, usize)> = select_top(&alphas_p, &ties_p, 2)
            .into_iter()
            .map(|i| ties_p[i])
            .collect();
        assert_eq!(picked, picked_p);
    }
}
