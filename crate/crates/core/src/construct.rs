//! Shared node-construction helpers used by the model builder and the
//! candidate initializer: parameter initialization, shortcut-op expansion
//! and shape alignment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::genotype::ShortcutOp;
use crate::graph::{attrs, Attrs, ComputationGraph, NodeId, OpKind};
use crate::params::ParameterStore;
use crate::tensor::TensorValue;

/// Where new nodes go: appended at the tail, or spliced in directly before
/// an existing node.
#[derive(Debug, Clone, Copy)]
pub enum InsertPoint {
    Append,
    Before(NodeId),
}

/// Fan-in-scaled uniform init; reuses the stored tensor when the key
/// already exists (warm start by key).
pub fn ensure_param(
    params: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    key: &str,
    shape: &[usize],
    fan_in: usize,
    trainable: bool,
) {
    if params.contains(key) {
        return;
    }
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    params.insert(key, TensorValue::new(shape.to_vec(), data), trainable);
}

pub fn ensure_const(
    params: &mut ParameterStore,
    key: &str,
    shape: &[usize],
    value: f64,
    trainable: bool,
) {
    if params.contains(key) {
        return;
    }
    let data = vec![value; shape.iter().product()];
    params.insert(key, TensorValue::new(shape.to_vec(), data), trainable);
}

/// Node factory bound to one graph + parameter store.
pub struct NodeFactory<'a> {
    pub graph: &'a mut ComputationGraph,
    pub params: &'a mut ParameterStore,
    pub rng: &'a mut ChaCha8Rng,
    pub insert: InsertPoint,
}

impl<'a> NodeFactory<'a> {
    pub fn new(
        graph: &'a mut ComputationGraph,
        params: &'a mut ParameterStore,
        rng: &'a mut ChaCha8Rng,
        insert: InsertPoint,
    ) -> Self {
        NodeFactory {
            graph,
            params,
            rng,
            insert,
        }
    }

    pub fn add_node(
        &mut self,
        op_kind: OpKind,
        inputs: Vec<NodeId>,
        keys: Vec<String>,
        a: Attrs,
    ) -> Result<NodeId> {
        match self.insert {
            InsertPoint::Append => Ok(self.graph.push_node(op_kind, inputs, keys, a)),
            InsertPoint::Before(anchor) => {
                self.graph.insert_node_before(anchor, op_kind, inputs, keys, a)
            }
        }
    }

    pub fn dense(&mut self, src: NodeId, in_dim: usize, out_dim: usize, prefix: &str) -> Result<NodeId> {
        let wk = format!("{prefix}/w");
        let bk = format!("{prefix}/b");
        ensure_param(self.params, self.rng, &wk, &[in_dim, out_dim], in_dim, true);
        ensure_const(self.params, &bk, &[out_dim], 0.0, true);
        self.add_node(
            OpKind::Dense,
            vec![src],
            vec![wk, bk],
            attrs(&[("in", in_dim as i64), ("out", out_dim as i64)]),
        )
    }

    pub fn conv(
        &mut self,
        src: NodeId,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        prefix: &str,
    ) -> Result<NodeId> {
        let wk = format!("{prefix}/w");
        let bk = format!("{prefix}/b");
        ensure_param(
            self.params,
            self.rng,
            &wk,
            &[out_ch, in_ch, kernel, kernel],
            in_ch * kernel * kernel,
            true,
        );
        ensure_const(self.params, &bk, &[out_ch], 0.0, true);
        self.add_node(
            OpKind::Conv,
            vec![src],
            vec![wk, bk],
            attrs(&[
                ("kernel", kernel as i64),
                ("stride", stride as i64),
                ("in_ch", in_ch as i64),
                ("out_ch", out_ch as i64),
            ]),
        )
    }

    pub fn sep_conv(&mut self, src: NodeId, ch: usize, kernel: usize, prefix: &str) -> Result<NodeId> {
        let keys = ["dw1", "pw1", "dw2", "pw2"].map(|s| format!("{prefix}/{s}"));
        ensure_param(self.params, self.rng, &keys[0], &[ch, kernel, kernel], kernel * kernel, true);
        ensure_param(self.params, self.rng, &keys[1], &[ch, ch], ch, true);
        ensure_param(self.params, self.rng, &keys[2], &[ch, kernel, kernel], kernel * kernel, true);
        ensure_param(self.params, self.rng, &keys[3], &[ch, ch], ch, true);
        self.add_node(
            OpKind::SepConv,
            vec![src],
            keys.to_vec(),
            attrs(&[("kernel", kernel as i64), ("ch", ch as i64)]),
        )
    }

    pub fn dil_conv(&mut self, src: NodeId, ch: usize, kernel: usize, prefix: &str) -> Result<NodeId> {
        let keys = ["dw", "pw"].map(|s| format!("{prefix}/{s}"));
        ensure_param(self.params, self.rng, &keys[0], &[ch, kernel, kernel], kernel * kernel, true);
        ensure_param(self.params, self.rng, &keys[1], &[ch, ch], ch, true);
        self.add_node(
            OpKind::DilatedConv,
            vec![src],
            keys.to_vec(),
            attrs(&[("kernel", kernel as i64), ("dilation", 2), ("ch", ch as i64)]),
        )
    }

    pub fn proj(&mut self, src: NodeId, in_ch: usize, out_ch: usize, prefix: &str) -> Result<NodeId> {
        let wk = format!("{prefix}/w");
        let bk = format!("{prefix}/b");
        ensure_param(self.params, self.rng, &wk, &[out_ch, in_ch], in_ch, true);
        ensure_const(self.params, &bk, &[out_ch], 0.0, true);
        self.add_node(
            OpKind::Proj1x1,
            vec![src],
            vec![wk, bk],
            attrs(&[("in_ch", in_ch as i64), ("out_ch", out_ch as i64)]),
        )
    }

    pub fn batch_norm(&mut self, src: NodeId, channels: usize, prefix: &str) -> Result<NodeId> {
        let keys = ["gamma", "beta", "rm", "rv"].map(|s| format!("{prefix}/{s}"));
        ensure_const(self.params, &keys[0], &[channels], 1.0, true);
        ensure_const(self.params, &keys[1], &[channels], 0.0, true);
        ensure_const(self.params, &keys[2], &[channels], 0.0, false);
        ensure_const(self.params, &keys[3], &[channels], 1.0, false);
        self.add_node(OpKind::BatchNorm, vec![src], keys.to_vec(), Attrs::new())
    }

    pub fn scalar_gate(&mut self, src: NodeId, key: &str, init: f64) -> Result<NodeId> {
        ensure_const(self.params, key, &[1], init, true);
        self.add_node(OpKind::ScalarGate, vec![src], vec![key.to_string()], Attrs::new())
    }

    pub fn pool(
        &mut self,
        op: OpKind,
        src: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId> {
        self.add_node(
            op,
            vec![src],
            vec![],
            attrs(&[("kernel", kernel as i64), ("stride", stride as i64)]),
        )
    }

    /// Downsample/retype `src` to match `target_shape` (per-example shapes,
    /// batch axis excluded): strided average pooling for spatial ratios and
    /// a projection for channel changes; dense for 1-D width changes.
    fn align(
        &mut self,
        src: NodeId,
        src_shape: &[usize],
        target_shape: &[usize],
        prefix: &str,
    ) -> Result<NodeId> {
        if src_shape == target_shape {
            return Ok(src);
        }
        match (src_shape.len(), target_shape.len()) {
            (1, 1) => self.dense(src, src_shape[0], target_shape[0], &format!("{prefix}/align")),
            (3, 3) => {
                let (sc, sh) = (src_shape[0], src_shape[1]);
                let (tc, th) = (target_shape[0], target_shape[1]);
                if sh % th != 0 {
                    return Err(CoreError::InvalidGraph(format!(
                        "cannot align spatial {sh} to {th}"
                    )));
                }
                let ratio = sh / th;
                let mut cur = src;
                if ratio > 1 {
                    cur = self.pool(OpKind::AvgPool, cur, 3, ratio)?;
                }
                if sc != tc {
                    cur = self.proj(cur, sc, tc, &format!("{prefix}/align"))?;
                }
                Ok(cur)
            }
            _ => Err(CoreError::InvalidGraph(format!(
                "cannot align shape {src_shape:?} to {target_shape:?}"
            ))),
        }
    }

    /// Expand one shortcut operation on `src` into graph nodes:
    /// optional stop-gradient, shape alignment, the operation itself, and
    /// batch-norm on the output. Returns the batch-norm output node and the
    /// ids of every created node.
    pub fn shortcut_chain(
        &mut self,
        src: NodeId,
        src_shape: &[usize],
        target_shape: &[usize],
        op: ShortcutOp,
        prefix: &str,
        stop_gradient: bool,
    ) -> Result<ShortcutChain> {
        let first_new_id = self.graph.peek_next_id();
        let mut sg_node = None;
        let mut cur = src;
        if stop_gradient {
            cur = self.add_node(OpKind::StopGradient, vec![cur], vec![], Attrs::new())?;
            sg_node = Some(cur);
        }
        cur = self.align(cur, src_shape, target_shape, prefix)?;
        cur = match op {
            ShortcutOp::Identity => {
                self.add_node(OpKind::Identity, vec![cur], vec![], Attrs::new())?
            }
            ShortcutOp::DenseRelu => {
                let d = self.dense(cur, target_shape[0], target_shape[0], prefix)?;
                self.add_node(OpKind::Relu, vec![d], vec![], Attrs::new())?
            }
            ShortcutOp::DenseTanh => {
                let d = self.dense(cur, target_shape[0], target_shape[0], prefix)?;
                self.add_node(OpKind::Tanh, vec![d], vec![], Attrs::new())?
            }
            ShortcutOp::AvgPool1x3 => self.pool(OpKind::AvgPool, cur, 3, 1)?,
            ShortcutOp::SepConv3x3 => self.sep_conv(cur, target_shape[0], 3, prefix)?,
            ShortcutOp::SepConv5x5 => self.sep_conv(cur, target_shape[0], 5, prefix)?,
            ShortcutOp::DilConv3x3 => self.dil_conv(cur, target_shape[0], 3, prefix)?,
            ShortcutOp::DilConv5x5 => self.dil_conv(cur, target_shape[0], 5, prefix)?,
            ShortcutOp::MaxPool3x3 => self.pool(OpKind::MaxPool, cur, 3, 1)?,
            ShortcutOp::AvgPool3x3 => self.pool(OpKind::AvgPool, cur, 3, 1)?,
        };
        let channels = target_shape[0];
        let bn_prefix = format!("{prefix}/bn");
        let out = self.batch_norm(cur, channels, &bn_prefix)?;
        // fresh ids are monotone, so "created in this call" == id >= first_new_id
        let created: Vec<NodeId> = self
            .graph
            .nodes
            .iter()
            .filter(|n| n.id.0 >= first_new_id)
            .map(|n| n.id)
            .collect();
        Ok(ShortcutChain {
            output: out,
            sg_node,
            nodes: created,
        })
    }
}

pub struct ShortcutChain {
    /// Batch-norm output: the term's contribution to the weighted sum.
    pub output: NodeId,
    pub sg_node: Option<NodeId>,
    pub nodes: Vec<NodeId>,
}

/// Batch-norm parameter keys for a term prefix, in slot order.
pub fn bn_keys(prefix: &str) -> Vec<String> {
    ["gamma", "beta", "rm", "rv"]
        .iter()
        .map(|s| format!("{prefix}/bn/{s}"))
        .collect()
}
