//! Test-time multiply-add accounting and parameter bookkeeping.
//!
//! The cost of an architecture is the sum of per-op multiply-adds for one
//! example. Only channel-mixing ops (dense, convolutions, projections) and
//! scalar reweightings count; pooling, normalization, activations and
//! additions contribute zero.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::genotype::{ArchKind, Genotype, MergeVariant, ShortcutOp};
use crate::graph::{ComputationGraph, NodeId, OpKind};
use crate::growth::{skeleton_plan, TaskShape};
use crate::ops::infer_shape;

/// Resolve every node's output shape with a symbolic batch of 1.
pub fn resolve_shapes(
    graph: &ComputationGraph,
    task: &TaskShape,
) -> Result<BTreeMap<NodeId, Vec<usize>>> {
    let mut shapes: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for node in &graph.nodes {
        let shape = match node.op_kind {
            OpKind::Input => {
                let mut s = vec![1];
                s.extend_from_slice(&task.input);
                s
            }
            OpKind::Target => {
                let mut s = vec![1];
                s.extend_from_slice(&task.target);
                s
            }
            _ => {
                let input_shapes: Vec<Vec<usize>> = node
                    .input_ids
                    .iter()
                    .map(|id| {
                        shapes
                            .get(id)
                            .cloned()
                            .ok_or(CoreError::MissingActivation(*id))
                    })
                    .collect::<Result<_>>()?;
                infer_shape(node, &input_shapes)?
            }
        };
        shapes.insert(node.id, shape);
    }
    Ok(shapes)
}

/// Multiply-adds for a single example.
pub fn cost(graph: &ComputationGraph, task: &TaskShape) -> Result<u64> {
    let shapes = resolve_shapes(graph, task)?;
    let mut total: u64 = 0;
    for node in &graph.nodes {
        let out_shape = &shapes[&node.id];
        let numel: u64 = out_shape.iter().product::<usize>() as u64;
        total += match node.op_kind {
            OpKind::Dense => {
                let in_dim: u64 = shapes[&node.input_ids[0]][1..]
                    .iter()
                    .product::<usize>() as u64;
                let out_dim = node.attr_or("out", 0) as u64;
                in_dim * out_dim
            }
            OpKind::Conv => {
                let k = node.attr_or("kernel", 3) as u64;
                let cin = node.attr_or("in_ch", 0) as u64;
                let cout = node.attr_or("out_ch", 0) as u64;
                let spatial = (out_shape[2] * out_shape[3]) as u64;
                k * k * cin * cout * spatial
            }
            OpKind::SepConv => {
                let k = node.attr_or("kernel", 3) as u64;
                let c = node.attr_or("ch", 0) as u64;
                let spatial = (out_shape[2] * out_shape[3]) as u64;
                2 * (k * k * c + c * c) * spatial
            }
            OpKind::DilatedConv => {
                let k = node.attr_or("kernel", 3) as u64;
                let c = node.attr_or("ch", 0) as u64;
                let spatial = (out_shape[2] * out_shape[3]) as u64;
                (k * k * c + c * c) * spatial
            }
            OpKind::Proj1x1 => {
                let cin = node.attr_or("in_ch", 0) as u64;
                let cout = node.attr_or("out_ch", 0) as u64;
                let spatial: u64 = if out_shape.len() == 4 {
                    (out_shape[2] * out_shape[3]) as u64
                } else {
                    1
                };
                cin * cout * spatial
            }
            OpKind::ScalarGate => numel,
            OpKind::WeightedSum => node.input_ids.len() as u64 * numel,
            _ => 0,
        };
    }
    Ok(total)
}

fn op_param_count(op: ShortcutOp, width: usize) -> usize {
    match op {
        ShortcutOp::DenseRelu | ShortcutOp::DenseTanh => width * width + width,
        ShortcutOp::Identity
        | ShortcutOp::AvgPool1x3
        | ShortcutOp::MaxPool3x3
        | ShortcutOp::AvgPool3x3 => 0,
        ShortcutOp::SepConv3x3 => 2 * (width * 9 + width * width),
        ShortcutOp::SepConv5x5 => 2 * (width * 25 + width * width),
        ShortcutOp::DilConv3x3 => width * 9 + width * width,
        ShortcutOp::DilConv5x5 => width * 25 + width * width,
    }
}

/// Analytic parameter count (every stored element, including batch-norm
/// running statistics) implied by a genotype. Must agree with the store
/// contents of a freshly built model.
pub fn param_count_from_genotype(genotype: &Genotype, task: &TaskShape) -> Result<usize> {
    let plans = skeleton_plan(&genotype.skeleton, task)?;
    let f = genotype.skeleton.filters;
    let arch = genotype.skeleton.arch;
    let bn = |c: usize| 4 * c;
    let mut total = match arch {
        ArchKind::Toy => {
            let in_dim: usize = task.input.iter().product();
            in_dim * f + f
        }
        ArchKind::Image => 9 * task.input[0] * f + f + bn(f),
    };
    for (plan, desc) in plans.iter().zip(&genotype.cells) {
        let w = plan.shape[0];
        // seed body
        total += match (plan.kind, arch) {
            (crate::graph::CellKind::Normal, ArchKind::Toy) => 2 * (w * w + w),
            (crate::graph::CellKind::Normal, ArchKind::Image) => {
                2 * (2 * (w * 9 + w * w)) + 2 * bn(w)
            }
            (crate::graph::CellKind::Transition, ArchKind::Toy) => w * w + w,
            (crate::graph::CellKind::Transition, ArchKind::Image) => {
                let cin = plan.prev1_shape[0];
                (9 * cin * w + w + bn(w)) + (cin * w + w + bn(w))
            }
            (crate::graph::CellKind::Fixed, _) => 0,
        };
        // grown patterns
        for pattern in &desc.patterns {
            for term in &pattern.terms {
                let src_shape = match term.source.as_str() {
                    "prev1" => &plan.prev1_shape,
                    "prev2" => &plan.prev2_shape,
                    _ => &plan.shape,
                };
                // aligner
                if src_shape != &plan.shape {
                    total += match plan.shape.len() {
                        1 => src_shape[0] * w + w,
                        _ => {
                            if src_shape[0] != w {
                                src_shape[0] * w + w
                            } else {
                                0
                            }
                        }
                    };
                }
                total += op_param_count(term.op, w);
                total += bn(w);
            }
            total += match pattern.merge {
                MergeVariant::CpEach => w * pattern.terms.len() * w + w,
                MergeVariant::Ws | MergeVariant::CpEnd => pattern.terms.len(),
            };
            total += 1; // gate
        }
    }
    // head
    let last: usize = plans
        .last()
        .map(|p| p.shape.iter().product())
        .unwrap_or(f);
    total += last * task.classes + task.classes;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attrs, Attrs};

    fn graph_with(
        build: impl FnOnce(&mut ComputationGraph, NodeId, NodeId) -> (NodeId, NodeId),
    ) -> ComputationGraph {
        let mut g = ComputationGraph::new();
        let input = g.push_node(OpKind::Input, vec![], vec![], Attrs::new());
        let target = g.push_node(OpKind::Target, vec![], vec![], Attrs::new());
        let (output, loss) = build(&mut g, input, target);
        g.input_id = input;
        g.target_id = target;
        g.output_id = output;
        g.loss_id = loss;
        g
    }

    #[test]
    fn dense_cost_is_in_times_out() {
        let g = graph_with(|g, input, target| {
            let d = g.push_node(
                OpKind::Dense,
                vec![input],
                vec!["w".into(), "b".into()],
                attrs(&[("in", 4), ("out", 3)]),
            );
            let loss = g.push_node(OpKind::SoftmaxXent, vec![d, target], vec![], Attrs::new());
            (d, loss)
        });
        let task = TaskShape::new(vec![4], 3);
        assert_eq!(cost(&g, &task).unwrap(), 12);
    }

    #[test]
    fn identity_costs_nothing() {
        let g = graph_with(|g, input, target| {
            let id = g.push_node(OpKind::Identity, vec![input], vec![], Attrs::new());
            let d = g.push_node(
                OpKind::Dense,
                vec![id],
                vec!["w".into(), "b".into()],
                attrs(&[("in", 2), ("out", 2)]),
            );
            let loss = g.push_node(OpKind::SoftmaxXent, vec![d, target], vec![], Attrs::new());
            (d, loss)
        });
        let task = TaskShape::new(vec![2], 2);
        assert_eq!(cost(&g, &task).unwrap(), 4);
    }

    #[test]
    fn conv_cost_standard_formula() {
        let g = graph_with(|g, input, target| {
            let c = g.push_node(
                OpKind::Conv,
                vec![input],
                vec!["w".into(), "b".into()],
                attrs(&[("kernel", 3), ("stride", 1), ("in_ch", 2), ("out_ch", 4)]),
            );
            let d = g.push_node(
                OpKind::Dense,
                vec![c],
                vec!["hw".into(), "hb".into()],
                attrs(&[("in", 256), ("out", 2)]),
            );
            let loss = g.push_node(OpKind::SoftmaxXent, vec![d, target], vec![], Attrs::new());
            (d, loss)
        });
        let task = TaskShape::new(vec![2, 8, 8], 2);
        // conv: 3*3*2*4*8*8 = 4608, head dense: 256*2 = 512
        assert_eq!(cost(&g, &task).unwrap(), 4608 + 512);
    }
}
