//! Forward and backward rules for every operation kind.
//!
//! Two custom operations carry the gradient-routing trick the whole crate
//! is built around: `stop_gradient` is the identity forward and a zero
//! Jacobian backward, `stop_forward` is zero forward and the identity
//! Jacobian backward. Their sum reconstructs the identity on both passes.
//!
//! Tensors are tiny by design (desk-scale), so convolutions are plain
//! nested loops over [N, C, H, W].

use crate::error::{CoreError, Result};
use crate::graph::{GraphNode, OpKind};
use crate::params::ParameterStore;
use crate::tensor::{Batch, TensorValue};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-node state saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum NodeAux {
    None,
    BatchNorm { mean: Vec<f64>, var: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    SoftmaxXent { probs: TensorValue },
    SepConv { mids: Vec<TensorValue> },
    DilConv { mid: TensorValue },
}

/// Evaluation mode. Batch-norm uses per-batch statistics in `Train` and
/// running averages in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn shape_err(node: &GraphNode, expected: impl Into<String>, actual: &[usize]) -> CoreError {
    CoreError::ShapeMismatch {
        node: node.id,
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

/// Forward-evaluate a single node. Train mode updates batch-norm running
/// statistics in place; everything else leaves `params` untouched.
pub fn eval_node(
    node: &GraphNode,
    inputs: &[&TensorValue],
    params: &mut ParameterStore,
    mode: Mode,
) -> Result<TensorValue> {
    eval_node_full(node, inputs, params, mode, None).map(|(v, _)| v)
}

/// Forward evaluation that also returns backward-pass state. `batch` is
/// required only for `input`/`target` leaves.
pub fn eval_node_full(
    node: &GraphNode,
    inputs: &[&TensorValue],
    params: &mut ParameterStore,
    mode: Mode,
    batch: Option<&Batch>,
) -> Result<(TensorValue, NodeAux)> {
    match node.op_kind {
        OpKind::Input => {
            let b = batch.ok_or_else(|| {
                CoreError::InvalidArgument("input node evaluated without a batch".into())
            })?;
            Ok((b.inputs.clone(), NodeAux::None))
        }
        OpKind::Target => {
            let b = batch.ok_or_else(|| {
                CoreError::InvalidArgument("target node evaluated without a batch".into())
            })?;
            Ok((b.targets.clone(), NodeAux::None))
        }
        OpKind::Identity => Ok((inputs[0].clone(), NodeAux::None)),
        OpKind::StopGradient => Ok((inputs[0].clone(), NodeAux::None)),
        OpKind::StopForward => Ok((inputs[0].zeros_like(), NodeAux::None)),
        OpKind::Relu => Ok((inputs[0].map(|v| v.max(0.0)), NodeAux::None)),
        OpKind::Tanh => Ok((inputs[0].map(f64::tanh), NodeAux::None)),
        OpKind::Add => {
            let first = inputs[0];
            let mut out = first.clone();
            for x in &inputs[1..] {
                if x.shape != first.shape {
                    return Err(shape_err(node, format!("{:?}", first.shape), &x.shape));
                }
                out.add_assign(x);
            }
            Ok((out, NodeAux::None))
        }
        OpKind::ScalarGate => {
            let eta = params.get(&node.param_keys[0])?.scalar_value();
            Ok((inputs[0].scale(eta), NodeAux::None))
        }
        OpKind::WeightedSum => {
            let first = inputs[0];
            let mut out = first.zeros_like();
            for (x, key) in inputs.iter().zip(&node.param_keys) {
                if x.shape != first.shape {
                    return Err(shape_err(node, format!("{:?}", first.shape), &x.shape));
                }
                let alpha = params.get(key)?.scalar_value();
                for (o, v) in out.data.iter_mut().zip(&x.data) {
                    *o += alpha * v;
                }
            }
            Ok((out, NodeAux::None))
        }
        OpKind::Concat => {
            let out = concat_forward(node, inputs)?;
            Ok((out, NodeAux::None))
        }
        OpKind::Dense => {
            let x = inputs[0];
            let w = params.get(&node.param_keys[0])?;
            let b = params.get(&node.param_keys[1])?;
            let n = x.batch();
            let k = x.per_example();
            if w.shape.len() != 2 || w.shape[0] != k {
                return Err(shape_err(node, format!("[{k}, out]"), &w.shape));
            }
            let m = w.shape[1];
            let mut out = TensorValue::zeros(&[n, m]);
            for i in 0..n {
                for j in 0..m {
                    let mut acc = b.data[j];
                    for kk in 0..k {
                        acc += x.data[i * k + kk] * w.data[kk * m + j];
                    }
                    out.data[i * m + j] = acc;
                }
            }
            Ok((out, NodeAux::None))
        }
        OpKind::Proj1x1 => {
            let x = inputs[0];
            let w = params.get(&node.param_keys[0])?;
            let b = params.get(&node.param_keys[1])?;
            let out = pointwise_forward(x, w, Some(b))
                .ok_or_else(|| shape_err(node, "pointwise-compatible", &x.shape))?;
            Ok((out, NodeAux::None))
        }
        OpKind::Conv => {
            let x = inputs[0];
            let w = params.get(&node.param_keys[0])?;
            let b = params.get(&node.param_keys[1])?;
            if x.shape.len() != 4 {
                return Err(shape_err(node, "[n, c, h, w]", &x.shape));
            }
            let stride = node.attr_or("stride", 1) as usize;
            let dilation = node.attr_or("dilation", 1) as usize;
            let out = conv2d_forward(x, w, Some(b), stride, dilation);
            Ok((out, NodeAux::None))
        }
        OpKind::SepConv => {
            // depthwise -> pointwise, applied twice
            let x = inputs[0];
            if x.shape.len() != 4 {
                return Err(shape_err(node, "[n, c, h, w]", &x.shape));
            }
            let dw1 = params.get(&node.param_keys[0])?.clone();
            let pw1 = params.get(&node.param_keys[1])?.clone();
            let dw2 = params.get(&node.param_keys[2])?.clone();
            let pw2 = params.get(&node.param_keys[3])?.clone();
            let m1 = depthwise_forward(x, &dw1, 1, 1);
            let m2 = pointwise_forward(&m1, &pw1, None)
                .ok_or_else(|| shape_err(node, "pointwise-compatible", &m1.shape))?;
            let m3 = depthwise_forward(&m2, &dw2, 1, 1);
            let out = pointwise_forward(&m3, &pw2, None)
                .ok_or_else(|| shape_err(node, "pointwise-compatible", &m3.shape))?;
            Ok((out, NodeAux::SepConv { mids: vec![m1, m2, m3] }))
        }
        OpKind::DilatedConv => {
            let x = inputs[0];
            if x.shape.len() != 4 {
                return Err(shape_err(node, "[n, c, h, w]", &x.shape));
            }
            let dilation = node.attr_or("dilation", 2) as usize;
            let dw = params.get(&node.param_keys[0])?.clone();
            let pw = params.get(&node.param_keys[1])?.clone();
            let mid = depthwise_forward(x, &dw, 1, dilation);
            let out = pointwise_forward(&mid, &pw, None)
                .ok_or_else(|| shape_err(node, "pointwise-compatible", &mid.shape))?;
            Ok((out, NodeAux::DilConv { mid }))
        }
        OpKind::MaxPool => {
            let (out, argmax) = max_pool_forward(node, inputs[0])?;
            Ok((out, NodeAux::MaxPool { argmax }))
        }
        OpKind::AvgPool => {
            let out = avg_pool_forward(node, inputs[0])?;
            Ok((out, NodeAux::None))
        }
        OpKind::BatchNorm => batch_norm_forward(node, inputs[0], params, mode),
        OpKind::SoftmaxXent => {
            let logits = inputs[0];
            let targets = inputs[1];
            if logits.shape.len() != 2 || targets.batch() != logits.batch() {
                return Err(shape_err(node, "[n, classes] with [n] targets", &logits.shape));
            }
            let n = logits.shape[0];
            let k = logits.shape[1];
            let mut probs = TensorValue::zeros(&[n, k]);
            let mut loss = 0.0;
            for i in 0..n {
                let row = &logits.data[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..k {
                    denom += (row[j] - max).exp();
                }
                let log_denom = denom.ln() + max;
                for j in 0..k {
                    probs.data[i * k + j] = (row[j] - log_denom).exp();
                }
                let label = targets.data[i] as usize;
                if label >= k {
                    return Err(shape_err(node, format!("label < {k}"), &[label]));
                }
                loss -= row[label] - log_denom;
            }
            loss /= n as f64;
            Ok((TensorValue::scalar(loss), NodeAux::SoftmaxXent { probs }))
        }
        OpKind::Mse => {
            let pred = inputs[0];
            let target = inputs[1];
            if pred.shape != target.shape {
                return Err(shape_err(node, format!("{:?}", pred.shape), &target.shape));
            }
            let len = pred.len() as f64;
            let loss = pred
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / len;
            Ok((TensorValue::scalar(loss), NodeAux::None))
        }
    }
}

/// Backward rule for a single node: distributes `grad_out` to each input
/// slot and each parameter key.
#[allow(clippy::too_many_arguments)]
pub fn backward_node(
    node: &GraphNode,
    inputs: &[&TensorValue],
    params: &ParameterStore,
    output: &TensorValue,
    aux: &NodeAux,
    grad_out: &TensorValue,
    mode: Mode,
) -> Result<(Vec<TensorValue>, Vec<(String, TensorValue)>)> {
    let mut param_grads: Vec<(String, TensorValue)> = Vec::new();
    let input_grads: Vec<TensorValue> = match node.op_kind {
        OpKind::Input | OpKind::Target => vec![],
        OpKind::Identity => vec![grad_out.clone()],
        // identity forward, zero Jacobian
        OpKind::StopGradient => vec![inputs[0].zeros_like()],
        // zero forward, identity Jacobian
        OpKind::StopForward => vec![grad_out.clone()],
        OpKind::Relu => {
            let x = inputs[0];
            let mut g = grad_out.clone();
            for (gv, xv) in g.data.iter_mut().zip(&x.data) {
                if *xv <= 0.0 {
                    *gv = 0.0;
                }
            }
            vec![g]
        }
        OpKind::Tanh => {
            let mut g = grad_out.clone();
            for (gv, yv) in g.data.iter_mut().zip(&output.data) {
                *gv *= 1.0 - yv * yv;
            }
            vec![g]
        }
        OpKind::Add => inputs.iter().map(|_| grad_out.clone()).collect(),
        OpKind::ScalarGate => {
            let eta = params.get(&node.param_keys[0])?.scalar_value();
            let g_eta = grad_out.dot(inputs[0]);
            param_grads.push((node.param_keys[0].clone(), TensorValue::scalar(g_eta)));
            vec![grad_out.scale(eta)]
        }
        OpKind::WeightedSum => {
            let mut grads = Vec::with_capacity(inputs.len());
            for (x, key) in inputs.iter().zip(&node.param_keys) {
                let alpha = params.get(key)?.scalar_value();
                param_grads.push((key.clone(), TensorValue::scalar(grad_out.dot(x))));
                grads.push(grad_out.scale(alpha));
            }
            grads
        }
        OpKind::Concat => concat_backward(node, inputs, grad_out)?,
        OpKind::Dense => {
            let x = inputs[0];
            let w = params.get(&node.param_keys[0])?;
            let n = x.batch();
            let k = x.per_example();
            let m = w.shape[1];
            let mut gx = x.zeros_like();
            let mut gw = w.zeros_like();
            let mut gb = TensorValue::zeros(&[m]);
            for i in 0..n {
                for j in 0..m {
                    let go = grad_out.data[i * m + j];
                    gb.data[j] += go;
                    for kk in 0..k {
                        gx.data[i * k + kk] += go * w.data[kk * m + j];
                        gw.data[kk * m + j] += go * x.data[i * k + kk];
                    }
                }
            }
            param_grads.push((node.param_keys[0].clone(), gw));
            param_grads.push((node.param_keys[1].clone(), gb));
            vec![gx]
        }
        OpKind::Proj1x1 => {
            let x = inputs[0];
            let w = params.get(&node.param_keys[0])?;
            let (gx, gw, gb) = pointwise_backward(x, w, grad_out);
            param_grads.push((node.param_keys[0].clone(), gw));
            param_grads.push((node.param_keys[1].clone(), gb));
            vec![gx]
        }
        OpKind::Conv => {
            let x = inputs[0];
            let w = params.get(&node.param_keys[0])?;
            let stride = node.attr_or("stride", 1) as usize;
            let dilation = node.attr_or("dilation", 1) as usize;
            let (gx, gw, gb) = conv2d_backward(x, w, grad_out, stride, dilation);
            param_grads.push((node.param_keys[0].clone(), gw));
            param_grads.push((node.param_keys[1].clone(), gb));
            vec![gx]
        }
        OpKind::SepConv => {
            let mids = match aux {
                NodeAux::SepConv { mids } => mids,
                _ => return Err(CoreError::MissingActivation(node.id)),
            };
            let x = inputs[0];
            let dw1 = params.get(&node.param_keys[0])?;
            let pw1 = params.get(&node.param_keys[1])?;
            let dw2 = params.get(&node.param_keys[2])?;
            let pw2 = params.get(&node.param_keys[3])?;
            let (g_m3, g_pw2, _) = pointwise_backward(&mids[2], pw2, grad_out);
            let (g_m2, g_dw2) = depthwise_backward(&mids[1], dw2, &g_m3, 1, 1);
            let (g_m1, g_pw1, _) = pointwise_backward(&mids[0], pw1, &g_m2);
            let (gx, g_dw1) = depthwise_backward(x, dw1, &g_m1, 1, 1);
            param_grads.push((node.param_keys[0].clone(), g_dw1));
            param_grads.push((node.param_keys[1].clone(), g_pw1));
            param_grads.push((node.param_keys[2].clone(), g_dw2));
            param_grads.push((node.param_keys[3].clone(), g_pw2));
            vec![gx]
        }
        OpKind::DilatedConv => {
            let mid = match aux {
                NodeAux::DilConv { mid } => mid,
                _ => return Err(CoreError::MissingActivation(node.id)),
            };
            let x = inputs[0];
            let dilation = node.attr_or("dilation", 2) as usize;
            let dw = params.get(&node.param_keys[0])?;
            let pw = params.get(&node.param_keys[1])?;
            let (g_mid, g_pw, _) = pointwise_backward(mid, pw, grad_out);
            let (gx, g_dw) = depthwise_backward(x, dw, &g_mid, 1, dilation);
            param_grads.push((node.param_keys[0].clone(), g_dw));
            param_grads.push((node.param_keys[1].clone(), g_pw));
            vec![gx]
        }
        OpKind::MaxPool => {
            let argmax = match aux {
                NodeAux::MaxPool { argmax } => argmax,
                _ => return Err(CoreError::MissingActivation(node.id)),
            };
            let mut gx = inputs[0].zeros_like();
            for (out_ix, in_ix) in argmax.iter().enumerate() {
                gx.data[*in_ix] += grad_out.data[out_ix];
            }
            vec![gx]
        }
        OpKind::AvgPool => vec![avg_pool_backward(node, inputs[0], grad_out)?],
        OpKind::BatchNorm => {
            let (gx, gg, gb) = batch_norm_backward(node, inputs[0], params, aux, grad_out, mode)?;
            param_grads.push((node.param_keys[0].clone(), gg));
            param_grads.push((node.param_keys[1].clone(), gb));
            vec![gx]
        }
        OpKind::SoftmaxXent => {
            let probs = match aux {
                NodeAux::SoftmaxXent { probs } => probs,
                _ => return Err(CoreError::MissingActivation(node.id)),
            };
            let targets = inputs[1];
            let n = probs.shape[0];
            let k = probs.shape[1];
            let scale = grad_out.scalar_value() / n as f64;
            let mut g = probs.clone();
            for i in 0..n {
                let label = targets.data[i] as usize;
                g.data[i * k + label] -= 1.0;
            }
            for v in g.data.iter_mut() {
                *v *= scale;
            }
            vec![g, targets.zeros_like()]
        }
        OpKind::Mse => {
            let pred = inputs[0];
            let target = inputs[1];
            let scale = 2.0 * grad_out.scalar_value() / pred.len() as f64;
            let mut g = pred.clone();
            for (gv, tv) in g.data.iter_mut().zip(&target.data) {
                *gv = (*gv - tv) * scale;
            }
            let g_t = g.scale(-1.0);
            vec![g, g_t]
        }
    };
    Ok((input_grads, param_grads))
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

fn conv2d_forward(
    x: &TensorValue,
    w: &TensorValue,
    b: Option<&TensorValue>,
    stride: usize,
    dilation: usize,
) -> TensorValue {
    let (n, cin, h, wid) = dims4(x);
    let cout = w.shape[0];
    let k = w.shape[2];
    let pad = (k - 1) * dilation / 2;
    let h_out = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let w_out = (wid + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let mut out = TensorValue::zeros(&[n, cout, h_out, w_out]);
    for ni in 0..n {
        for co in 0..cout {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let mut acc = b.map(|b| b.data[co]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for kh in 0..k {
                            for kw in 0..k {
                                let hi = (ho * stride + kh * dilation) as isize - pad as isize;
                                let wi = (wo * stride + kw * dilation) as isize - pad as isize;
                                if hi < 0 || wi < 0 || hi >= h as isize || wi >= wid as isize {
                                    continue;
                                }
                                let xv = x.data
                                    [((ni * cin + ci) * h + hi as usize) * wid + wi as usize];
                                let wv = w.data[((co * cin + ci) * k + kh) * k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data[((ni * cout + co) * h_out + ho) * w_out + wo] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &TensorValue,
    w: &TensorValue,
    g: &TensorValue,
    stride: usize,
    dilation: usize,
) -> (TensorValue, TensorValue, TensorValue) {
    let (n, cin, h, wid) = dims4(x);
    let cout = w.shape[0];
    let k = w.shape[2];
    let pad = (k - 1) * dilation / 2;
    let (_, _, h_out, w_out) = dims4(g);
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = TensorValue::zeros(&[cout]);
    for ni in 0..n {
        for co in 0..cout {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let go = g.data[((ni * cout + co) * h_out + ho) * w_out + wo];
                    gb.data[co] += go;
                    for ci in 0..cin {
                        for kh in 0..k {
                            for kw in 0..k {
                                let hi = (ho * stride + kh * dilation) as isize - pad as isize;
                                let wi = (wo * stride + kw * dilation) as isize - pad as isize;
                                if hi < 0 || wi < 0 || hi >= h as isize || wi >= wid as isize {
                                    continue;
                                }
                                let x_ix =
                                    ((ni * cin + ci) * h + hi as usize) * wid + wi as usize;
                                let w_ix = ((co * cin + ci) * k + kh) * k + kw;
                                gx.data[x_ix] += go * w.data[w_ix];
                                gw.data[w_ix] += go * x.data[x_ix];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn depthwise_forward(x: &TensorValue, w: &TensorValue, stride: usize, dilation: usize) -> TensorValue {
    let (n, c, h, wid) = dims4(x);
    let k = w.shape[1];
    let pad = (k - 1) * dilation / 2;
    let h_out = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let w_out = (wid + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let mut out = TensorValue::zeros(&[n, c, h_out, w_out]);
    for ni in 0..n {
        for ci in 0..c {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let mut acc = 0.0;
                    for kh in 0..k {
                        for kw in 0..k {
                            let hi = (ho * stride + kh * dilation) as isize - pad as isize;
                            let wi = (wo * stride + kw * dilation) as isize - pad as isize;
                            if hi < 0 || wi < 0 || hi >= h as isize || wi >= wid as isize {
                                continue;
                            }
                            acc += x.data[((ni * c + ci) * h + hi as usize) * wid + wi as usize]
                                * w.data[(ci * k + kh) * k + kw];
                        }
                    }
                    out.data[((ni * c + ci) * h_out + ho) * w_out + wo] = acc;
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &TensorValue,
    w: &TensorValue,
    g: &TensorValue,
    stride: usize,
    dilation: usize,
) -> (TensorValue, TensorValue) {
    let (n, c, h, wid) = dims4(x);
    let k = w.shape[1];
    let pad = (k - 1) * dilation / 2;
    let (_, _, h_out, w_out) = dims4(g);
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    for ni in 0..n {
        for ci in 0..c {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let go = g.data[((ni * c + ci) * h_out + ho) * w_out + wo];
                    for kh in 0..k {
                        for kw in 0..k {
                            let hi = (ho * stride + kh * dilation) as isize - pad as isize;
                            let wi = (wo * stride + kw * dilation) as isize - pad as isize;
                            if hi < 0 || wi < 0 || hi >= h as isize || wi >= wid as isize {
                                continue;
                            }
                            let x_ix = ((ni * c + ci) * h + hi as usize) * wid + wi as usize;
                            let w_ix = (ci * k + kh) * k + kw;
                            gx.data[x_ix] += go * w.data[w_ix];
                            gw.data[w_ix] += go * x.data[x_ix];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 1x1 channel mixing. Works on [N, C, H, W] (per-pixel) and [N, C]
/// (per-row); weight layout is [C_out, C_in].
fn pointwise_forward(x: &TensorValue, w: &TensorValue, b: Option<&TensorValue>) -> Option<TensorValue> {
    let cout = w.shape[0];
    let cin = w.shape[1];
    match x.shape.len() {
        2 => {
            let n = x.shape[0];
            if x.shape[1] != cin {
                return None;
            }
            let mut out = TensorValue::zeros(&[n, cout]);
            for ni in 0..n {
                for co in 0..cout {
                    let mut acc = b.map(|b| b.data[co]).unwrap_or(0.0);
                    for ci in 0..cin {
                        acc += w.data[co * cin + ci] * x.data[ni * cin + ci];
                    }
                    out.data[ni * cout + co] = acc;
                }
            }
            Some(out)
        }
        4 => {
            let (n, c, h, wid) = dims4(x);
            if c != cin {
                return None;
            }
            let mut out = TensorValue::zeros(&[n, cout, h, wid]);
            for ni in 0..n {
                for co in 0..cout {
                    for hi in 0..h {
                        for wi in 0..wid {
                            let mut acc = b.map(|b| b.data[co]).unwrap_or(0.0);
                            for ci in 0..cin {
                                acc += w.data[co * cin + ci]
                                    * x.data[((ni * c + ci) * h + hi) * wid + wi];
                            }
                            out.data[((ni * cout + co) * h + hi) * wid + wi] = acc;
                        }
                    }
                }
            }
            Some(out)
        }
        _ => None,
    }
}

fn pointwise_backward(
    x: &TensorValue,
    w: &TensorValue,
    g: &TensorValue,
) -> (TensorValue, TensorValue, TensorValue) {
    let cout = w.shape[0];
    let cin = w.shape[1];
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = TensorValue::zeros(&[cout]);
    match x.shape.len() {
        2 => {
            let n = x.shape[0];
            for ni in 0..n {
                for co in 0..cout {
                    let go = g.data[ni * cout + co];
                    gb.data[co] += go;
                    for ci in 0..cin {
                        gx.data[ni * cin + ci] += go * w.data[co * cin + ci];
                        gw.data[co * cin + ci] += go * x.data[ni * cin + ci];
                    }
                }
            }
        }
        4 => {
            let (n, c, h, wid) = dims4(x);
            for ni in 0..n {
                for co in 0..cout {
                    for hi in 0..h {
                        for wi in 0..wid {
                            let go = g.data[((ni * cout + co) * h + hi) * wid + wi];
                            gb.data[co] += go;
                            for ci in 0..c {
                                let x_ix = ((ni * c + ci) * h + hi) * wid + wi;
                                gx.data[x_ix] += go * w.data[co * cin + ci];
                                gw.data[co * cin + ci] += go * x.data[x_ix];
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("pointwise_backward on validated shapes"),
    }
    (gx, gw, gb)
}

/// Pooling windows for both layouts: 1-D over the feature axis of [N, D],
/// 2-D over H, W of [N, C, H, W]. Returns (flat output index, flat input
/// window indices) tuples.
fn pool_windows(node: &GraphNode, x: &TensorValue) -> Result<(Vec<usize>, Vec<Vec<usize>>, Vec<usize>)> {
    let k = node.attr_or("kernel", 3) as usize;
    let stride = node.attr_or("stride", 1) as usize;
    let pad = (k - 1) / 2;
    match x.shape.len() {
        2 => {
            let n = x.shape[0];
            let d = x.shape[1];
            let d_out = (d + 2 * pad - k) / stride + 1;
            let mut windows = Vec::with_capacity(n * d_out);
            for ni in 0..n {
                for o in 0..d_out {
                    let mut win = Vec::with_capacity(k);
                    for kk in 0..k {
                        let i = (o * stride + kk) as isize - pad as isize;
                        if i >= 0 && (i as usize) < d {
                            win.push(ni * d + i as usize);
                        }
                    }
                    windows.push(win);
                }
            }
            Ok((vec![n, d_out], windows, vec![n, d]))
        }
        4 => {
            let (n, c, h, wid) = dims4(x);
            let h_out = (h + 2 * pad - k) / stride + 1;
            let w_out = (wid + 2 * pad - k) / stride + 1;
            let mut windows = Vec::with_capacity(n * c * h_out * w_out);
            for ni in 0..n {
                for ci in 0..c {
                    for ho in 0..h_out {
                        for wo in 0..w_out {
                            let mut win = Vec::with_capacity(k * k);
                            for kh in 0..k {
                                for kw in 0..k {
                                    let hi = (ho * stride + kh) as isize - pad as isize;
                                    let wi = (wo * stride + kw) as isize - pad as isize;
                                    if hi >= 0
                                        && wi >= 0
                                        && (hi as usize) < h
                                        && (wi as usize) < wid
                                    {
                                        win.push(
                                            ((ni * c + ci) * h + hi as usize) * wid + wi as usize,
                                        );
                                    }
                                }
                            }
                            win.shrink_to_fit();
                            windows.push(win);
                        }
                    }
                }
            }
            Ok((vec![n, c, h_out, w_out], windows, vec![n, c, h, wid]))
        }
        _ => Err(shape_err(node, "[n, d] or [n, c, h, w]", &x.shape)),
    }
}

fn max_pool_forward(node: &GraphNode, x: &TensorValue) -> Result<(TensorValue, Vec<usize>)> {
    let (out_shape, windows, _) = pool_windows(node, x)?;
    let mut out = TensorValue::zeros(&out_shape);
    let mut argmax = Vec::with_capacity(windows.len());
    for (o, win) in windows.iter().enumerate() {
        // padding never wins: windows contain only in-bounds indices
        let mut best_ix = win[0];
        let mut best = x.data[best_ix];
        for &ix in &win[1..] {
            if x.data[ix] > best {
                best = x.data[ix];
                best_ix = ix;
            }
        }
        out.data[o] = best;
        argmax.push(best_ix);
    }
    Ok((out, argmax))
}

fn avg_pool_forward(node: &GraphNode, x: &TensorValue) -> Result<TensorValue> {
    let (out_shape, windows, _) = pool_windows(node, x)?;
    let mut out = TensorValue::zeros(&out_shape);
    for (o, win) in windows.iter().enumerate() {
        out.data[o] = win.iter().map(|&ix| x.data[ix]).sum::<f64>() / win.len() as f64;
    }
    Ok(out)
}

fn avg_pool_backward(node: &GraphNode, x: &TensorValue, g: &TensorValue) -> Result<TensorValue> {
    let (_, windows, in_shape) = pool_windows(node, x)?;
    let mut gx = TensorValue::zeros(&in_shape);
    for (o, win) in windows.iter().enumerate() {
        let share = g.data[o] / win.len() as f64;
        for &ix in win {
            gx.data[ix] += share;
        }
    }
    Ok(gx)
}

/// Channel axis used for normalization: axis 1 in both layouts.
fn bn_geometry(x: &TensorValue) -> Option<(usize, usize, usize)> {
    match x.shape.len() {
        // (channels, per-channel count, spatial)
        2 => Some((x.shape[1], x.shape[0], 1)),
        4 => Some((x.shape[1], x.shape[0] * x.shape[2] * x.shape[3], x.shape[2] * x.shape[3])),
        _ => None,
    }
}

fn bn_channel_of(ix: usize, shape: &[usize]) -> usize {
    match shape.len() {
        2 => ix % shape[1],
        4 => (ix / (shape[2] * shape[3])) % shape[1],
        _ => unreachable!(),
    }
}

fn batch_norm_forward(
    node: &GraphNode,
    x: &TensorValue,
    params: &mut ParameterStore,
    mode: Mode,
) -> Result<(TensorValue, NodeAux)> {
    let (c, count, _) = bn_geometry(x).ok_or_else(|| shape_err(node, "[n, d] or [n, c, h, w]", &x.shape))?;
    let gamma = params.get(&node.param_keys[0])?.clone();
    let beta = params.get(&node.param_keys[1])?.clone();
    if gamma.len() != c {
        return Err(shape_err(node, format!("[{c}] affine"), &gamma.shape));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (ix, v) in x.data.iter().enumerate() {
                mean[bn_channel_of(ix, &x.shape)] += v;
            }
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
            for (ix, v) in x.data.iter().enumerate() {
                let ch = bn_channel_of(ix, &x.shape);
                let d = v - mean[ch];
                var[ch] += d * d;
            }
            for v in var.iter_mut() {
                *v /= count as f64;
            }
            // update running statistics in place
            {
                let rm = params.get_mut(&node.param_keys[2])?;
                for (r, m) in rm.data.iter_mut().zip(&mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
            }
            {
                let rv = params.get_mut(&node.param_keys[3])?;
                for (r, v) in rv.data.iter_mut().zip(&var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
            (mean, var)
        }
        Mode::Eval => {
            let rm = params.get(&node.param_keys[2])?.data.clone();
            let rv = params.get(&node.param_keys[3])?.data.clone();
            (rm, rv)
        }
    };
    let mut out = x.clone();
    for (ix, v) in out.data.iter_mut().enumerate() {
        let ch = bn_channel_of(ix, &x.shape);
        let xhat = (*v - mean[ch]) / (var[ch] + BN_EPSILON).sqrt();
        *v = gamma.data[ch] * xhat + beta.data[ch];
    }
    Ok((out, NodeAux::BatchNorm { mean, var }))
}

fn batch_norm_backward(
    node: &GraphNode,
    x: &TensorValue,
    params: &ParameterStore,
    aux: &NodeAux,
    g: &TensorValue,
    mode: Mode,
) -> Result<(TensorValue, TensorValue, TensorValue)> {
    let (c, count, _) = bn_geometry(x).ok_or_else(|| shape_err(node, "[n, d] or [n, c, h, w]", &x.shape))?;
    let (mean, var) = match aux {
        NodeAux::BatchNorm { mean, var } => (mean, var),
        _ => return Err(CoreError::MissingActivation(node.id)),
    };
    let gamma = params.get(&node.param_keys[0])?;
    let mut g_gamma = TensorValue::zeros(&[c]);
    let mut g_beta = TensorValue::zeros(&[c]);
    let mut sum_g = vec![0.0; c];
    let mut sum_g_xhat = vec![0.0; c];
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    for (ix, gv) in g.data.iter().enumerate() {
        let ch = bn_channel_of(ix, &x.shape);
        let xhat = (x.data[ix] - mean[ch]) * invstd[ch];
        g_gamma.data[ch] += gv * xhat;
        g_beta.data[ch] += gv;
        sum_g[ch] += gv;
        sum_g_xhat[ch] += gv * xhat;
    }
    let mut gx = x.zeros_like();
    match mode {
        Mode::Train => {
            let m = count as f64;
            for (ix, gv) in g.data.iter().enumerate() {
                let ch = bn_channel_of(ix, &x.shape);
                let xhat = (x.data[ix] - mean[ch]) * invstd[ch];
                gx.data[ix] = gamma.data[ch] * invstd[ch] / m
                    * (m * gv - sum_g[ch] - xhat * sum_g_xhat[ch]);
            }
        }
        Mode::Eval => {
            // running statistics are constants in eval mode
            for (ix, gv) in g.data.iter().enumerate() {
                let ch = bn_channel_of(ix, &x.shape);
                gx.data[ix] = gv * gamma.data[ch] * invstd[ch];
            }
        }
    }
    Ok((gx, g_gamma, g_beta))
}

fn concat_forward(node: &GraphNode, inputs: &[&TensorValue]) -> Result<TensorValue> {
    let rank = inputs[0].shape.len();
    if rank != 2 && rank != 4 {
        return Err(shape_err(node, "[n, d] or [n, c, h, w]", &inputs[0].shape));
    }
    let n = inputs[0].shape[0];
    let total_c: usize = inputs.iter().map(|x| x.shape[1]).sum();
    for x in inputs {
        if x.shape.len() != rank
            || x.shape[0] != n
            || (rank == 4 && x.shape[2..] != inputs[0].shape[2..])
        {
            return Err(shape_err(node, format!("{:?}-compatible", inputs[0].shape), &x.shape));
        }
    }
    let spatial: usize = if rank == 4 {
        inputs[0].shape[2] * inputs[0].shape[3]
    } else {
        1
    };
    let mut shape = inputs[0].shape.clone();
    shape[1] = total_c;
    let mut out = TensorValue::zeros(&shape);
    for ni in 0..n {
        let mut c_off = 0;
        for x in inputs {
            let c = x.shape[1];
            for ci in 0..c {
                for s in 0..spatial {
                    out.data[(ni * total_c + c_off + ci) * spatial + s] =
                        x.data[(ni * c + ci) * spatial + s];
                }
            }
            c_off += c;
        }
    }
    Ok(out)
}

fn concat_backward(
    node: &GraphNode,
    inputs: &[&TensorValue],
    g: &TensorValue,
) -> Result<Vec<TensorValue>> {
    let rank = inputs[0].shape.len();
    if rank != 2 && rank != 4 {
        return Err(shape_err(node, "[n, d] or [n, c, h, w]", &inputs[0].shape));
    }
    let n = inputs[0].shape[0];
    let total_c = g.shape[1];
    let spatial: usize = if rank == 4 {
        inputs[0].shape[2] * inputs[0].shape[3]
    } else {
        1
    };
    let mut grads: Vec<TensorValue> = inputs.iter().map(|x| x.zeros_like()).collect();
    for ni in 0..n {
        let mut c_off = 0;
        for (gi, x) in grads.iter_mut().zip(inputs) {
            let c = x.shape[1];
            for ci in 0..c {
                for s in 0..spatial {
                    gi.data[(ni * c + ci) * spatial + s] =
                        g.data[(ni * total_c + c_off + ci) * spatial + s];
                }
            }
            c_off += c;
        }
    }
    Ok(grads)
}

fn dims4(x: &TensorValue) -> (usize, usize, usize, usize) {
    (x.shape[0], x.shape[1], x.shape[2], x.shape[3])
}

/// Output shape from input shapes, without evaluating. Used by the cost
/// model and by shortcut construction.
pub fn infer_shape(node: &GraphNode, input_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
    let first = input_shapes.first();
    Ok(match node.op_kind {
        OpKind::Input | OpKind::Target => {
            return Err(CoreError::InvalidArgument(
                "leaf shapes must be seeded by the caller".into(),
            ))
        }
        OpKind::Identity
        | OpKind::Relu
        | OpKind::Tanh
        | OpKind::StopGradient
        | OpKind::StopForward
        | OpKind::ScalarGate
        | OpKind::BatchNorm
        | OpKind::Add
        | OpKind::WeightedSum => first.unwrap().clone(),
        OpKind::SepConv | OpKind::DilatedConv => first.unwrap().clone(),
        OpKind::MaxPool | OpKind::AvgPool => {
            let k = node.attr_or("kernel", 3) as usize;
            let stride = node.attr_or("stride", 1) as usize;
            let pad = (k - 1) / 2;
            let mut s = first.unwrap().clone();
            let axes: &[usize] = if s.len() == 2 { &[1] } else { &[2, 3] };
            for &ax in axes {
                s[ax] = (s[ax] + 2 * pad - k) / stride + 1;
            }
            s
        }
        OpKind::Dense => {
            let n = first.unwrap()[0];
            vec![n, node.attr_or("out", 0) as usize]
        }
        OpKind::Proj1x1 => {
            let mut s = first.unwrap().clone();
            s[1] = node.attr_or("out_ch", 0) as usize;
            s
        }
        OpKind::Conv => {
            let s = first.unwrap().clone();
            let k = node.attr_or("kernel", 3) as usize;
            let stride = node.attr_or("stride", 1) as usize;
            let dilation = node.attr_or("dilation", 1) as usize;
            let pad = (k - 1) * dilation / 2;
            let h = (s[2] + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
            let w = (s[3] + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
            vec![s[0], node.attr_or("out_ch", 0) as usize, h, w]
        }
        OpKind::Concat => {
            let mut s = first.unwrap().clone();
            s[1] = input_shapes.iter().map(|x| x[1]).sum();
            s
        }
        OpKind::SoftmaxXent | OpKind::Mse => vec![1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::attrs;

    fn leaf_node(op_kind: OpKind, n_inputs: usize) -> GraphNode {
        GraphNode {
            id: crate::graph::NodeId(0),
            op_kind,
            input_ids: vec![crate::graph::NodeId(0); n_inputs],
            param_keys: vec![],
            attrs: attrs(&[]),
            is_out: false,
        }
    }

    #[test]
    fn stop_gradient_is_identity_forward() {
        let x = TensorValue::new(vec![2], vec![1.5, -2.0]);
        let mut p = ParameterStore::new();
        let out = eval_node(&leaf_node(OpKind::StopGradient, 1), &[&x], &mut p, Mode::Train).unwrap();
        assert_eq!(out.data, vec![1.5, -2.0]);
    }

    #[test]
    fn stop_forward_is_zero_forward() {
        let x = TensorValue::new(vec![2], vec![1.5, -2.0]);
        let mut p = ParameterStore::new();
        let out = eval_node(&leaf_node(OpKind::StopForward, 1), &[&x], &mut p, Mode::Train).unwrap();
        assert_eq!(out.data, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_passes_through() {
        let x = TensorValue::new(vec![1], vec![3.0]);
        let mut p = ParameterStore::new();
        let out = eval_node(&leaf_node(OpKind::Identity, 1), &[&x], &mut p, Mode::Eval).unwrap();
        assert_eq!(out.data, vec![3.0]);
    }

    #[test]
    fn stop_gradient_backward_is_zero() {
        let x = TensorValue::new(vec![2], vec![1.5, -2.0]);
        let node = leaf_node(OpKind::StopGradient, 1);
        let p = ParameterStore::new();
        let g = TensorValue::new(vec![2], vec![10.0, -7.0]);
        let (gs, _) =
            backward_node(&node, &[&x], &p, &x, &NodeAux::None, &g, Mode::Train).unwrap();
        assert_eq!(gs[0].data, vec![0.0, 0.0]);
    }

    #[test]
    fn stop_forward_backward_is_identity() {
        let x = TensorValue::new(vec![2], vec![1.5, -2.0]);
        let node = leaf_node(OpKind::StopForward, 1);
        let p = ParameterStore::new();
        let zeros = x.zeros_like();
        let g = TensorValue::new(vec![2], vec![10.0, -7.0]);
        let (gs, _) =
            backward_node(&node, &[&x], &p, &zeros, &NodeAux::None, &g, Mode::Train).unwrap();
        assert_eq!(gs[0].data, vec![10.0, -7.0]);
    }

    #[test]
    fn mse_matches_convention() {
        let pred = TensorValue::new(vec![2], vec![2.0, 0.0]);
        let target = TensorValue::new(vec![2], vec![0.0, 0.0]);
        let mut p = ParameterStore::new();
        let out = eval_node(&leaf_node(OpKind::Mse, 2), &[&pred, &target], &mut p, Mode::Train)
            .unwrap();
        assert_eq!(out.scalar_value(), 2.0);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let logits = TensorValue::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]);
        let targets = TensorValue::new(vec![2], vec![0.0, 1.0]);
        let mut p = ParameterStore::new();
        let out = eval_node(
            &leaf_node(OpKind::SoftmaxXent, 2),
            &[&logits, &targets],
            &mut p,
            Mode::Train,
        )
        .unwrap();
        assert!((out.scalar_value() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn max_pool_1d_same_padding() {
        let x = TensorValue::new(vec![1, 4], vec![1.0, 5.0, 2.0, 0.0]);
        let mut node = leaf_node(OpKind::MaxPool, 1);
        node.attrs = attrs(&[("kernel", 3), ("stride", 1)]);
        let mut p = ParameterStore::new();
        let out = eval_node(&node, &[&x], &mut p, Mode::Eval).unwrap();
        assert_eq!(out.data, vec![5.0, 5.0, 5.0, 2.0]);
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = TensorValue::new(vec![1, 3], vec![3.0, 6.0, 9.0]);
        let mut node = leaf_node(OpKind::AvgPool, 1);
        node.attrs = attrs(&[("kernel", 3), ("stride", 1)]);
        let mut p = ParameterStore::new();
        let out = eval_node(&node, &[&x], &mut p, Mode::Eval).unwrap();
        // edges average the two in-bounds values
        assert_eq!(out.data, vec![4.5, 6.0, 7.5]);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let x = TensorValue::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let mut node = leaf_node(OpKind::BatchNorm, 1);
        node.param_keys = vec!["g".into(), "b".into(), "rm".into(), "rv".into()];
        let mut p = ParameterStore::new();
        p.insert("g", TensorValue::new(vec![1], vec![1.0]), true);
        p.insert("b", TensorValue::new(vec![1], vec![0.0]), true);
        p.insert("rm", TensorValue::new(vec![1], vec![0.0]), false);
        p.insert("rv", TensorValue::new(vec![1], vec![1.0]), false);
        let out = eval_node(&node, &[&x], &mut p, Mode::Train).unwrap();
        let mean: f64 = out.data.iter().sum::<f64>() / 4.0;
        let var: f64 = out.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // running stats moved toward the batch stats
        assert!((p.get("rm").unwrap().data[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn conv_shape_and_value() {
        // 1x1 input channel, 2x2 image, 3x3 kernel of ones, same padding
        let x = TensorValue::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = TensorValue::new(vec![1, 1, 3, 3], vec![1.0; 9]);
        let mut node = leaf_node(OpKind::Conv, 1);
        node.param_keys = vec!["w".into(), "b".into()];
        node.attrs = attrs(&[("kernel", 3), ("stride", 1), ("in_ch", 1), ("out_ch", 1)]);
        let mut p = ParameterStore::new();
        p.insert("w", w, true);
        p.insert("b", TensorValue::new(vec![1], vec![0.0]), true);
        let out = eval_node(&node, &[&x], &mut p, Mode::Eval).unwrap();
        assert_eq!(out.shape, vec![1, 1, 2, 2]);
        // every output sums the whole image (kernel covers everything)
        assert_eq!(out.data, vec![10.0; 4]);
    }

    #[test]
    fn weighted_sum_applies_alphas() {
        let x1 = TensorValue::new(vec![2], vec![1.0, 2.0]);
        let x2 = TensorValue::new(vec![2], vec![10.0, 20.0]);
        let mut node = leaf_node(OpKind::WeightedSum, 2);
        node.param_keys = vec!["a1".into(), "a2".into()];
        let mut p = ParameterStore::new();
        p.insert("a1", TensorValue::scalar(2.0), true);
        p.insert("a2", TensorValue::scalar(0.5), true);
        let out = eval_node(&node, &[&x1, &x2], &mut p, Mode::Eval).unwrap();
        assert_eq!(out.data, vec![7.0, 14.0]);
    }
}
