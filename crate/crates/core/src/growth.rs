//! Model growth: seed construction, genotype-driven builds, finalization
//! of weak learners and cell-tying semantics.
//!
//! Graphs are always buildable from (genotype, task, params): existing
//! parameter keys are reused (warm start by key), missing keys are freshly
//! initialized. Finalization performs in-place surgery on the weak-learned
//! graph so selected shortcut parameters survive verbatim.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::construct::{bn_keys, ensure_const, InsertPoint, NodeFactory};
use crate::error::{CoreError, Result};
use crate::genotype::{
    CellDescriptor, Genotype, MergeVariant, PatternDescriptor, SearchMode, Skeleton,
    TermDescriptor,
};
use crate::graph::{attrs, Attrs, CellInfo, CellKind, ComputationGraph, NodeId, OpKind};
use crate::params::ParameterStore;
use crate::weaklearn::{select_top, CandidateSet, Shield};

/// Input geometry of the task: per-example input shape (no batch axis),
/// the class count, and the per-example target shape (empty for class
/// indices).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskShape {
    pub input: Vec<usize>,
    pub classes: usize,
    pub target: Vec<usize>,
}

impl TaskShape {
    pub fn new(input: Vec<usize>, classes: usize) -> Self {
        TaskShape {
            input,
            classes,
            target: vec![],
        }
    }

    /// Regression task with explicit target shape (mse losses).
    pub fn regression(input: Vec<usize>, target: Vec<usize>) -> Self {
        TaskShape {
            input,
            classes: 1,
            target,
        }
    }
}

/// Per-cell shape plan derived from the skeleton: widths double and
/// spatial dims halve at each transition in image mode; toy mode keeps a
/// constant width.
#[derive(Debug, Clone)]
pub struct CellPlan {
    pub kind: CellKind,
    pub stage: usize,
    /// Output shape of this cell (per-example).
    pub shape: Vec<usize>,
    pub prev1_shape: Vec<usize>,
    pub prev2_shape: Vec<usize>,
}

/// Walk the skeleton and produce the cell sequence with shapes resolved.
pub fn skeleton_plan(skeleton: &Skeleton, task: &TaskShape) -> Result<Vec<CellPlan>> {
    if skeleton.normal_per_stage < 1 || skeleton.filters < 1 || skeleton.stages < 1 {
        return Err(CoreError::InvalidConfig(
            "skeleton requires n >= 1, f >= 1, stages >= 1".into(),
        ));
    }
    let f = skeleton.filters;
    let stem_shape: Vec<usize> = match skeleton.arch {
        crate::genotype::ArchKind::Toy => vec![f],
        crate::genotype::ArchKind::Image => {
            if task.input.len() != 3 {
                return Err(CoreError::InvalidConfig(format!(
                    "image arch expects [c, h, w] inputs, got {:?}",
                    task.input
                )));
            }
            vec![f, task.input[1], task.input[2]]
        }
    };
    let mut plans = Vec::new();
    let mut prev1 = stem_shape.clone();
    let mut prev2 = stem_shape;
    for stage in 0..skeleton.stages {
        for _ in 0..skeleton.normal_per_stage {
            let shape = prev1.clone();
            plans.push(CellPlan {
                kind: CellKind::Normal,
                stage,
                shape: shape.clone(),
                prev1_shape: prev1.clone(),
                prev2_shape: prev2.clone(),
            });
            prev2 = prev1;
            prev1 = shape;
        }
        if stage + 1 < skeleton.stages {
            let shape = match prev1.len() {
                1 => prev1.clone(),
                3 => vec![prev1[0] * 2, prev1[1] / 2, prev1[2] / 2],
                _ => unreachable!(),
            };
            if shape.len() == 3 && (shape[1] == 0 || shape[2] == 0) {
                return Err(CoreError::InvalidConfig(
                    "input too small for the requested stage count".into(),
                ));
            }
            plans.push(CellPlan {
                kind: CellKind::Transition,
                stage,
                shape: shape.clone(),
                prev1_shape: prev1.clone(),
                prev2_shape: prev2.clone(),
            });
            prev2 = prev1;
            prev1 = shape;
        }
    }
    Ok(plans)
}

/// Empty genotype matching a skeleton: the seed architecture.
pub fn seed_genotype(mode: SearchMode, skeleton: Skeleton) -> Genotype {
    let mut cells = Vec::new();
    for stage in 0..skeleton.stages {
        for _ in 0..skeleton.normal_per_stage {
            cells.push(CellDescriptor {
                kind: CellKind::Normal,
                stage,
                patterns: Vec::new(),
            });
        }
        if stage + 1 < skeleton.stages {
            cells.push(CellDescriptor {
                kind: CellKind::Transition,
                stage,
                patterns: Vec::new(),
            });
        }
    }
    Genotype {
        mode,
        skeleton,
        cells,
    }
}

/// Build the seed model: N cells per stage, transition cells between
/// stages, every normal-cell output flagged for boosting.
pub fn seed_model(
    config: &RunConfig,
    task: &TaskShape,
    rng: &mut ChaCha8Rng,
) -> Result<(ComputationGraph, ParameterStore, Genotype)> {
    let genotype = seed_genotype(config.mode, config.skeleton());
    let mut params = ParameterStore::new();
    let graph = build_graph(&genotype, task, &mut params, rng)?;
    Ok((graph, params, genotype))
}

/// Build a graph from a genotype, reusing any parameter keys already in
/// the store and freshly initializing the rest.
pub fn build_graph(
    genotype: &Genotype,
    task: &TaskShape,
    params: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
) -> Result<ComputationGraph> {
    genotype.validate()?;
    let plans = skeleton_plan(&genotype.skeleton, task)?;
    if plans.len() != genotype.cells.len() {
        return Err(CoreError::InvalidGraph(format!(
            "genotype lists {} cells but the skeleton implies {}",
            genotype.cells.len(),
            plans.len()
        )));
    }
    for (plan, desc) in plans.iter().zip(&genotype.cells) {
        if plan.kind != desc.kind {
            return Err(CoreError::InvalidGraph(
                "genotype cell kinds do not match the skeleton order".into(),
            ));
        }
    }

    let arch = genotype.skeleton.arch;
    let f = genotype.skeleton.filters;
    let mut graph = ComputationGraph::new();
    let input = graph.push_node(OpKind::Input, vec![], vec![], Attrs::new());
    let target = graph.push_node(OpKind::Target, vec![], vec![], Attrs::new());
    graph.input_id = input;
    graph.target_id = target;

    // stem
    let stem_out = {
        let mut fac = NodeFactory::new(&mut graph, params, rng, InsertPoint::Append);
        match arch {
            crate::genotype::ArchKind::Toy => {
                let in_dim: usize = task.input.iter().product();
                let d = fac.dense(input, in_dim, f, "stem/dense")?;
                fac.add_node(OpKind::Tanh, vec![d], vec![], Attrs::new())?
            }
            crate::genotype::ArchKind::Image => {
                let c0 = task.input[0];
                let conv = fac.conv(input, c0, f, 3, 1, "stem/conv")?;
                fac.batch_norm(conv, f, "stem/bn")?
            }
        }
    };

    let mut prev1 = stem_out;
    let mut prev2 = stem_out;
    for (index, (plan, desc)) in plans.iter().zip(&genotype.cells).enumerate() {
        let out = match plan.kind {
            CellKind::Normal => build_normal_cell(
                &mut graph, params, rng, index, plan, desc, prev1, prev2,
            )?,
            CellKind::Transition => {
                build_transition_cell(&mut graph, params, rng, index, plan, prev1, prev2)?
            }
            CellKind::Fixed => unreachable!("plans never contain fixed cells"),
        };
        prev2 = prev1;
        prev1 = out;
    }

    // head
    let last_shape = plans
        .last()
        .map(|p| p.shape.clone())
        .unwrap_or_else(|| vec![f]);
    let head_in: usize = last_shape.iter().product();
    let (output, loss) = {
        let mut fac = NodeFactory::new(&mut graph, params, rng, InsertPoint::Append);
        let logits = fac.dense(prev1, head_in, task.classes, "head/dense")?;
        let loss = fac.add_node(OpKind::SoftmaxXent, vec![logits, target], vec![], Attrs::new())?;
        (logits, loss)
    };
    graph.output_id = output;
    graph.loss_id = loss;
    graph.validate()?;
    Ok(graph)
}

#[allow(clippy::too_many_arguments)]
fn build_normal_cell(
    graph: &mut ComputationGraph,
    params: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    index: usize,
    plan: &CellPlan,
    desc: &CellDescriptor,
    prev1: NodeId,
    prev2: NodeId,
) -> Result<NodeId> {
    let first_id = graph.peek_next_id();
    let width = plan.shape[0];
    let mut layers: Vec<(String, NodeId)> = Vec::new();
    let mut fac = NodeFactory::new(graph, params, rng, InsertPoint::Append);
    // seed body: out = input + op(op(input))
    let (s0, s1) = match plan.shape.len() {
        1 => {
            let d0 = fac.dense(prev1, width, width, &format!("c{index}/s0"))?;
            let s0 = fac.add_node(OpKind::Tanh, vec![d0], vec![], Attrs::new())?;
            let d1 = fac.dense(s0, width, width, &format!("c{index}/s1"))?;
            let s1 = fac.add_node(OpKind::Tanh, vec![d1], vec![], Attrs::new())?;
            (s0, s1)
        }
        _ => {
            let c0 = fac.sep_conv(prev1, width, 3, &format!("c{index}/s0"))?;
            let s0 = fac.batch_norm(c0, width, &format!("c{index}/s0_bn"))?;
            let c1 = fac.sep_conv(s0, width, 3, &format!("c{index}/s1"))?;
            let s1 = fac.batch_norm(c1, width, &format!("c{index}/s1_bn"))?;
            (s0, s1)
        }
    };
    let a0 = fac.add_node(OpKind::Add, vec![prev1, s1], vec![], Attrs::new())?;
    layers.push(("s0".into(), s0));
    layers.push(("s1".into(), s1));
    layers.push(("a0".into(), a0));
    let mut output = a0;

    // replay grown patterns
    for (g0, pattern) in desc.patterns.iter().enumerate() {
        let g = g0 + 1;
        let mut term_outputs = Vec::with_capacity(pattern.terms.len());
        let mut alpha_keys = Vec::with_capacity(pattern.terms.len());
        for (slot, term) in pattern.terms.iter().enumerate() {
            let (src, src_shape) = resolve_source(&term.source, prev1, prev2, plan, &layers)?;
            let prefix = format!("c{index}/g{g}/t{slot}");
            let chain = fac.shortcut_chain(src, &src_shape, &plan.shape, term.op, &prefix, false)?;
            term_outputs.push(chain.output);
            alpha_keys.push(format!("{prefix}/alpha"));
        }
        let merged = match pattern.merge {
            MergeVariant::CpEach => {
                let cat = fac.add_node(OpKind::Concat, term_outputs.clone(), vec![], Attrs::new())?;
                fac.proj(
                    cat,
                    width * pattern.terms.len(),
                    width,
                    &format!("c{index}/g{g}/proj"),
                )?
            }
            MergeVariant::Ws | MergeVariant::CpEnd => {
                for (key, term) in alpha_keys.iter().zip(&pattern.terms) {
                    ensure_const(fac.params, key, &[1], term.alpha, true);
                }
                fac.add_node(
                    OpKind::WeightedSum,
                    term_outputs.clone(),
                    alpha_keys.clone(),
                    Attrs::new(),
                )?
            }
        };
        let gate = fac.scalar_gate(merged, &format!("c{index}/g{g}/gate"), 0.0)?;
        let new_out = fac.add_node(OpKind::Add, vec![output, gate], vec![], Attrs::new())?;
        layers.push((format!("m{g}"), merged));
        layers.push((format!("a{g}"), new_out));
        output = new_out;
    }

    graph.node_mut(output)?.is_out = true;
    let members: Vec<NodeId> = graph
        .nodes
        .iter()
        .filter(|n| n.id.0 >= first_id)
        .map(|n| n.id)
        .collect();
    graph.cells.push(CellInfo {
        index,
        kind: CellKind::Normal,
        stage: plan.stage,
        prev1,
        prev2,
        layers,
        members,
        output,
        patterns: desc.patterns.clone(),
    });
    Ok(output)
}

fn build_transition_cell(
    graph: &mut ComputationGraph,
    params: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    index: usize,
    plan: &CellPlan,
    prev1: NodeId,
    prev2: NodeId,
) -> Result<NodeId> {
    let first_id = graph.peek_next_id();
    let mut layers: Vec<(String, NodeId)> = Vec::new();
    let mut fac = NodeFactory::new(graph, params, rng, InsertPoint::Append);
    let output = match plan.shape.len() {
        1 => {
            let width = plan.shape[0];
            let d = fac.dense(prev1, width, width, &format!("c{index}/t0"))?;
            let t = fac.add_node(OpKind::Tanh, vec![d], vec![], Attrs::new())?;
            layers.push(("s0".into(), t));
            t
        }
        _ => {
            let in_ch = plan.prev1_shape[0];
            let out_ch = plan.shape[0];
            // strided conv branch plus pooled projection residual
            let conv = fac.conv(prev1, in_ch, out_ch, 3, 2, &format!("c{index}/t0"))?;
            let conv_bn = fac.batch_norm(conv, out_ch, &format!("c{index}/t0_bn"))?;
            let pool = fac.pool(OpKind::AvgPool, prev1, 3, 2)?;
            let proj = fac.proj(pool, in_ch, out_ch, &format!("c{index}/t1"))?;
            let proj_bn = fac.batch_norm(proj, out_ch, &format!("c{index}/t1_bn"))?;
            let sum = fac.add_node(OpKind::Add, vec![conv_bn, proj_bn], vec![], Attrs::new())?;
            layers.push(("s0".into(), conv_bn));
            layers.push(("s1".into(), proj_bn));
            layers.push(("a0".into(), sum));
            sum
        }
    };
    let members: Vec<NodeId> = graph
        .nodes
        .iter()
        .filter(|n| n.id.0 >= first_id)
        .map(|n| n.id)
        .collect();
    graph.cells.push(CellInfo {
        index,
        kind: CellKind::Transition,
        stage: plan.stage,
        prev1,
        prev2,
        layers,
        members,
        output,
        patterns: Vec::new(),
    });
    Ok(output)
}

fn resolve_source(
    tag: &str,
    prev1: NodeId,
    prev2: NodeId,
    plan: &CellPlan,
    layers: &[(String, NodeId)],
) -> Result<(NodeId, Vec<usize>)> {
    match tag {
        "prev1" => Ok((prev1, plan.prev1_shape.clone())),
        "prev2" => Ok((prev2, plan.prev2_shape.clone())),
        _ => layers
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, id)| (*id, plan.shape.clone()))
            .ok_or_else(|| {
                CoreError::InvalidGraph(format!("pattern references unknown layer tag `{tag}`"))
            }),
    }
}

/// Layer tag of a node inside a cell, with prev1/prev2 pseudo-tags.
fn tag_of(cell: &CellInfo, id: NodeId) -> Result<String> {
    if id == cell.prev1 {
        return Ok("prev1".into());
    }
    if id == cell.prev2 {
        return Ok("prev2".into());
    }
    cell.layers
        .iter()
        .find(|(_, l)| *l == id)
        .map(|(t, _)| t.clone())
        .ok_or_else(|| CoreError::InvalidGraph(format!("node {id} has no layer tag")))
}

/// Finalize weak learners in place: per candidate, keep the top-`i_max`
/// shortcuts by |alpha|, merge them per the variant, drop stop-gradients,
/// swap the stop-forward for a zero-initialized scalar gate and discard
/// everything unselected. Returns the pattern descriptor per boosted cell.
pub fn finalize_candidates(
    graph: &mut ComputationGraph,
    params: &mut ParameterStore,
    candidates: &[CandidateSet],
    alphas: &BTreeMap<String, f64>,
    i_max: usize,
    merge_variant: MergeVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, PatternDescriptor)>> {
    let mut results = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut term_alphas = Vec::with_capacity(cand.terms.len());
        let mut tie_keys = Vec::with_capacity(cand.terms.len());
        for term in &cand.terms {
            let a = alphas.get(&term.weight_key).copied().ok_or_else(|| {
                CoreError::InvalidArgument(format!(
                    "alpha missing for shortcut weight `{}`",
                    term.weight_key
                ))
            })?;
            term_alphas.push(a);
            tie_keys.push((term.input_index, term.op_index));
        }
        let selected = select_top(&term_alphas, &tie_keys, i_max);

        let cell_index = cand.cell_index;
        let g = cand.growth_index;
        let target_tag = tag_of(&graph.cells[cell_index], cand.target_node)?;

        // descriptor in selection order (descending |alpha|)
        let mut descriptor_terms = Vec::with_capacity(selected.len());
        for &j in &selected {
            let term = &cand.terms[j];
            descriptor_terms.push(TermDescriptor {
                source: tag_of(&graph.cells[cell_index], term.input_node)?,
                target: target_tag.clone(),
                op: term.op,
                alpha: term_alphas[j],
            });
        }

        // rename selected term keys from enumeration index to slot index,
        // two-phase to survive overlaps
        let mut renames: Vec<(String, String)> = Vec::new();
        for (slot, &j) in selected.iter().enumerate() {
            let old_prefix = cand.terms[j].key_prefix.clone();
            let new_prefix = format!("c{cell_index}/g{g}/t{slot}");
            if old_prefix != new_prefix {
                renames.push((old_prefix, new_prefix));
            }
        }
        rename_prefixes(graph, params, &renames)?;

        // drop stop-gradients on the selected branches
        for &j in &selected {
            if let Some(sg) = cand.terms[j].sg_node {
                let src = graph.node(sg)?.input_ids[0];
                graph.rewire_consumers(sg, src, 0);
                remove_node(graph, sg);
            }
        }

        let selected_outputs: Vec<NodeId> =
            selected.iter().map(|&j| cand.terms[j].output_node).collect();
        let width = first_width(graph, params, cand.target_node)?;

        let merged = match merge_variant {
            MergeVariant::CpEach => {
                let anchor = cand.candidate_node;
                let mut fac =
                    NodeFactory::new(graph, params, rng, InsertPoint::Before(anchor));
                let cat =
                    fac.add_node(OpKind::Concat, selected_outputs.clone(), vec![], Attrs::new())?;
                fac.proj(
                    cat,
                    width * selected_outputs.len(),
                    width,
                    &format!("c{cell_index}/g{g}/proj"),
                )?
            }
            MergeVariant::Ws | MergeVariant::CpEnd => {
                // shrink the joint weighted sum to the selected terms,
                // whose keys were just renamed to slot order
                let alpha_keys: Vec<String> = (0..selected.len())
                    .map(|slot| format!("c{cell_index}/g{g}/t{slot}/alpha"))
                    .collect();
                let ws = graph.node_mut(cand.candidate_node)?;
                ws.input_ids = selected_outputs.clone();
                ws.param_keys = alpha_keys;
                cand.candidate_node
            }
        };

        // the shield becomes a scalar gate (eta = 0); Joint mode already
        // trained a gate, which is kept as-is
        match cand.shield {
            Shield::Isolated { sf_node } => {
                let gate_key = format!("c{cell_index}/g{g}/gate");
                ensure_const(params, &gate_key, &[1], 0.0, true);
                let sf = graph.node_mut(sf_node)?;
                sf.op_kind = OpKind::ScalarGate;
                sf.input_ids = vec![merged];
                sf.param_keys = vec![gate_key];
                register_pattern(graph, cell_index, g, merged, cand.add_node);
            }
            Shield::Joint { gate_node } => {
                let gate = graph.node_mut(gate_node)?;
                gate.input_ids = vec![merged];
                register_pattern(graph, cell_index, g, merged, cand.add_node);
            }
        }

        let pattern = PatternDescriptor {
            terms: descriptor_terms,
            merge: merge_variant,
        };
        graph.cells[cell_index].patterns.push(pattern.clone());
        results.push((cell_index, pattern));
    }

    // unselected branches and the old joint sums are now unreachable
    for key in graph.prune_unreachable() {
        params.remove(&key);
    }
    graph.validate()?;
    Ok(results)
}

fn register_pattern(
    graph: &mut ComputationGraph,
    cell_index: usize,
    g: usize,
    merged: NodeId,
    add_node: NodeId,
) {
    let cell = &mut graph.cells[cell_index];
    cell.layers.push((format!("m{g}"), merged));
    cell.layers.push((format!("a{g}"), add_node));
}

/// Channel/width of a node's output, read from the cell plan geometry via
/// its parameter store entries. Falls back to scanning the target's cell.
fn first_width(
    graph: &ComputationGraph,
    _params: &ParameterStore,
    target: NodeId,
) -> Result<usize> {
    // the target is a cell output; its width is the cell's width, which
    // equals the batch-norm/bias width of any seed op in the cell
    let cell_ix = graph
        .cell_of(target)
        .ok_or_else(|| CoreError::InvalidGraph(format!("node {target} not in any cell")))?;
    let cell = &graph.cells[cell_ix];
    for id in &cell.members {
        if let Ok(node) = graph.node(*id) {
            if node.op_kind == OpKind::Dense {
                if let Some(out) = node.attr("out") {
                    return Ok(out as usize);
                }
            }
            if node.op_kind == OpKind::SepConv {
                if let Some(ch) = node.attr("ch") {
                    return Ok(ch as usize);
                }
            }
        }
    }
    Err(CoreError::InvalidGraph(format!(
        "cannot infer width for cell {cell_ix}"
    )))
}

fn remove_node(graph: &mut ComputationGraph, id: NodeId) {
    graph.nodes.retain(|n| n.id != id);
    for cell in graph.cells.iter_mut() {
        cell.members.retain(|m| *m != id);
        cell.layers.retain(|(_, l)| *l != id);
    }
}

fn rename_prefixes(
    graph: &mut ComputationGraph,
    params: &mut ParameterStore,
    renames: &[(String, String)],
) -> Result<()> {
    if renames.is_empty() {
        return Ok(());
    }
    let rename_key = |key: &str, from: &str, to: &str| -> Option<String> {
        key.strip_prefix(from).and_then(|rest| {
            if rest.is_empty() || rest.starts_with('/') {
                Some(format!("{to}{rest}"))
            } else {
                None
            }
        })
    };
    // stage 1: pull all affected entries out
    let mut staged: Vec<(String, crate::tensor::TensorValue, bool)> = Vec::new();
    let all_keys: Vec<String> = params.keys().cloned().collect();
    for key in all_keys {
        for (from, to) in renames {
            if let Some(new_key) = rename_key(&key, from, to) {
                let value = params.get(&key)?.clone();
                let trainable = params.is_trainable(&key);
                params.remove(&key);
                staged.push((new_key, value, trainable));
                break;
            }
        }
    }
    for (key, value, trainable) in staged {
        params.insert(key, value, trainable);
    }
    // stage 2: rewrite node references
    for node in graph.nodes.iter_mut() {
        for pk in node.param_keys.iter_mut() {
            for (from, to) in renames {
                if let Some(new_key) = rename_key(pk, from, to) {
                    *pk = new_key;
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Cell-mode tying replicates a finalized pattern into every normal cell;
/// macro mode touches only the boosted cell.
pub fn apply_tying(
    genotype: &Genotype,
    boosted_cell: usize,
    pattern: &PatternDescriptor,
    mode: SearchMode,
) -> Result<Genotype> {
    let mut out = genotype.clone();
    let apply_to: Vec<usize> = match mode {
        SearchMode::Cell => out
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == CellKind::Normal)
            .map(|(i, _)| i)
            .collect(),
        SearchMode::Macro => vec![boosted_cell],
    };
    for ix in apply_to {
        let cell = &mut out.cells[ix];
        let expected_target = if cell.patterns.is_empty() {
            "a0".to_string()
        } else {
            format!("a{}", cell.patterns.len())
        };
        let mut known_tags: Vec<String> =
            vec!["prev1".into(), "prev2".into(), "s0".into(), "s1".into(), "a0".into()];
        for i in 1..=cell.patterns.len() {
            known_tags.push(format!("m{i}"));
            known_tags.push(format!("a{i}"));
        }
        for term in &pattern.terms {
            if !known_tags.contains(&term.source) {
                return Err(CoreError::InvalidGraph(format!(
                    "pattern source `{}` absent from cell {ix}",
                    term.source
                )));
            }
            if term.target != expected_target {
                return Err(CoreError::InvalidGraph(format!(
                    "pattern targets `{}` but cell {ix} expects `{expected_target}`",
                    term.target
                )));
            }
        }
        cell.patterns.push(pattern.clone());
    }
    out.validate()?;
    Ok(out)
}

/// Lift the genotype out of a graph's cell annotations.
pub fn graph_to_genotype(
    graph: &ComputationGraph,
    mode: SearchMode,
    skeleton: Skeleton,
) -> Genotype {
    Genotype {
        mode,
        skeleton,
        cells: graph
            .cells
            .iter()
            .map(|c| CellDescriptor {
                kind: c.kind,
                stage: c.stage,
                patterns: c.patterns.clone(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::forward;
    use crate::genotype::{ArchKind, OpSetName, ShortcutOp};
    use crate::ops::Mode;
    use crate::tensor::{Batch, TensorValue};
    use rand::SeedableRng;

    fn toy_config(n: usize, stages: usize) -> RunConfig {
        let mut cfg = RunConfig::toy_default();
        cfg.skeleton.n = n;
        cfg.skeleton.stages = stages;
        cfg.skeleton.f = 6;
        cfg
    }

    #[test]
    fn toy_seed_is_residual_dense_cell() {
        let cfg = toy_config(1, 1);
        let task = TaskShape::new(vec![2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (graph, mut params, genotype) = seed_model(&cfg, &task, &mut rng).unwrap();
        assert_eq!(genotype.cells.len(), 1);
        assert_eq!(graph.cells.len(), 1);
        let cell = &graph.cells[0];
        // registry: two seed layers plus the residual output
        let tags: Vec<&str> = cell.layers.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tags, vec!["s0", "s1", "a0"]);
        // the output adds the cell input and the second op
        let out = graph.node(cell.output).unwrap();
        assert_eq!(out.op_kind, OpKind::Add);
        assert!(out.is_out);
        assert_eq!(out.input_ids[0], cell.prev1);
        // forward runs
        let batch = Batch::new(
            TensorValue::new(vec![3, 2], vec![0.1; 6]),
            TensorValue::new(vec![3], vec![0.0, 1.0, 0.0]),
        );
        forward(&graph, &mut params, &batch, Mode::Train).unwrap();
    }

    #[test]
    fn image_skeleton_counts_cells() {
        let mut cfg = toy_config(3, 3);
        cfg.opset = OpSetName::Image;
        cfg.skeleton.f = 4;
        let task = TaskShape::new(vec![1, 8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (graph, _params, genotype) = seed_model(&cfg, &task, &mut rng).unwrap();
        let normals = graph
            .cells
            .iter()
            .filter(|c| c.kind == CellKind::Normal)
            .count();
        let transitions = graph
            .cells
            .iter()
            .filter(|c| c.kind == CellKind::Transition)
            .count();
        assert_eq!(normals, 9);
        assert_eq!(transitions, 2);
        assert_eq!(genotype.cells.len(), 11);
    }

    #[test]
    fn seed_build_is_deterministic() {
        let cfg = toy_config(2, 2);
        let task = TaskShape::new(vec![2], 2);
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let (g1, p1, _) = seed_model(&cfg, &task, &mut rng1).unwrap();
        let (g2, p2, _) = seed_model(&cfg, &task, &mut rng2).unwrap();
        assert_eq!(g1.to_json_string().unwrap(), g2.to_json_string().unwrap());
        assert_eq!(p1.to_bytes().unwrap(), p2.to_bytes().unwrap());
    }

    #[test]
    fn invalid_skeleton_rejected() {
        let skeleton = Skeleton {
            normal_per_stage: 0,
            stages: 1,
            filters: 4,
            arch: ArchKind::Toy,
        };
        assert!(skeleton_plan(&skeleton, &TaskShape::new(vec![2], 2)).is_err());
    }

    #[test]
    fn tying_cell_mode_replicates() {
        let cfg = toy_config(3, 1);
        let genotype = seed_genotype(SearchMode::Cell, cfg.skeleton());
        let pattern = PatternDescriptor {
            terms: vec![TermDescriptor {
                source: "s0".into(),
                target: "a0".into(),
                op: ShortcutOp::DenseTanh,
                alpha: 0.5,
            }],
            merge: MergeVariant::CpEach,
        };
        let tied = apply_tying(&genotype, 1, &pattern, SearchMode::Cell).unwrap();
        for cell in tied.cells.iter().filter(|c| c.kind == CellKind::Normal) {
            assert_eq!(cell.patterns.len(), 1);
        }
    }

    #[test]
    fn tying_macro_mode_is_local() {
        let cfg = toy_config(3, 1);
        let genotype = seed_genotype(SearchMode::Macro, cfg.skeleton());
        let pattern = PatternDescriptor {
            terms: vec![TermDescriptor {
                source: "prev1".into(),
                target: "a0".into(),
                op: ShortcutOp::Identity,
                alpha: 1.0,
            }],
            merge: MergeVariant::Ws,
        };
        let tied = apply_tying(&genotype, 1, &pattern, SearchMode::Macro).unwrap();
        assert_eq!(tied.cells[0].patterns.len(), 0);
        assert_eq!(tied.cells[1].patterns.len(), 1);
        assert_eq!(tied.cells[2].patterns.len(), 0);
    }

    #[test]
    fn tying_appends_in_growth_order() {
        let cfg = toy_config(2, 1);
        let genotype = seed_genotype(SearchMode::Cell, cfg.skeleton());
        let p = |op: ShortcutOp, target: &str| PatternDescriptor {
            terms: vec![TermDescriptor {
                source: "s0".into(),
                target: target.into(),
                op,
                alpha: 1.0,
            }],
            merge: MergeVariant::Ws,
        };
        let after_p = apply_tying(&genotype, 0, &p(ShortcutOp::DenseRelu, "a0"), SearchMode::Cell).unwrap();
        let after_q = apply_tying(&after_p, 0, &p(ShortcutOp::Identity, "a1"), SearchMode::Cell).unwrap();
        for cell in after_q.cells.iter().filter(|c| c.kind == CellKind::Normal) {
            assert_eq!(cell.patterns.len(), 2);
            assert_eq!(cell.patterns[0].terms[0].op, ShortcutOp::DenseRelu);
            assert_eq!(cell.patterns[1].terms[0].op, ShortcutOp::Identity);
        }
    }

    #[test]
    fn tying_rejects_unknown_source() {
        let cfg = toy_config(2, 1);
        let genotype = seed_genotype(SearchMode::Cell, cfg.skeleton());
        let pattern = PatternDescriptor {
            terms: vec![TermDescriptor {
                source: "m7".into(),
                target: "a0".into(),
                op: ShortcutOp::Identity,
                alpha: 1.0,
            }],
            merge: MergeVariant::Ws,
        };
        assert!(apply_tying(&genotype, 0, &pattern, SearchMode::Cell).is_err());
    }

    #[test]
    fn genotype_graph_round_trip() {
        let cfg = toy_config(2, 2);
        let task = TaskShape::new(vec![2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let genotype = {
            let seed = seed_genotype(SearchMode::Cell, cfg.skeleton());
            let pattern = PatternDescriptor {
                terms: vec![
                    TermDescriptor {
                        source: "prev2".into(),
                        target: "a0".into(),
                        op: ShortcutOp::DenseTanh,
                        alpha: -0.7,
                    },
                    TermDescriptor {
                        source: "s1".into(),
                        target: "a0".into(),
                        op: ShortcutOp::Identity,
                        alpha: 0.3,
                    },
                ],
                merge: MergeVariant::CpEach,
            };
            apply_tying(&seed, 0, &pattern, SearchMode::Cell).unwrap()
        };
        let mut params = ParameterStore::new();
        let graph = build_graph(&genotype, &task, &mut params, &mut rng).unwrap();
        let lifted = graph_to_genotype(&graph, genotype.mode, genotype.skeleton);
        assert_eq!(genotype, lifted);
        // rebuilt graph evaluates
        let batch = Batch::new(
            TensorValue::new(vec![2, 2], vec![0.3, -0.4, 0.9, 0.1]),
            TensorValue::new(vec![2], vec![0.0, 2.0]),
        );
        forward(&graph, &mut params, &batch, Mode::Train).unwrap();
    }

    #[test]
    fn cell_mode_cells_hash_identically_after_build() {
        let cfg = toy_config(3, 1);
        let task = TaskShape::new(vec![2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let genotype = {
            let seed = seed_genotype(SearchMode::Cell, cfg.skeleton());
            let pattern = PatternDescriptor {
                terms: vec![TermDescriptor {
                    source: "s0".into(),
                    target: "a0".into(),
                    op: ShortcutOp::AvgPool1x3,
                    alpha: 0.2,
                }],
                merge: MergeVariant::Ws,
            };
            apply_tying(&seed, 0, &pattern, SearchMode::Cell).unwrap()
        };
        let mut params = ParameterStore::new();
        let graph = build_graph(&genotype, &task, &mut params, &mut rng).unwrap();
        let hashes: Vec<u64> = (0..3).map(|i| graph.cell_hash(i)).collect();
        assert_eq!(hashes[0], hashes[1]);
        assert_eq!(hashes[1], hashes[2]);
    }
}
