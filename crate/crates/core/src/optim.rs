//! SGD with cosine learning-rate decay, plus the shared training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, forward};
use crate::error::{CoreError, Result};
use crate::graph::ComputationGraph;
use crate::ops::Mode;
use crate::params::ParameterStore;
use crate::tensor::{Batch, TensorValue};

/// w <- w - lr * (g + weight_decay * w) for every covered trainable key.
pub fn sgd_step(
    params: &mut ParameterStore,
    gradients: &BTreeMap<String, TensorValue>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(CoreError::NegativeLearningRate(lr));
    }
    for (key, grad) in gradients {
        if !params.is_trainable(key) {
            continue;
        }
        let w = params.get_mut(key)?;
        for (wv, gv) in w.data.iter_mut().zip(&grad.data) {
            *wv -= lr * (gv + weight_decay * *wv);
        }
    }
    Ok(())
}

/// Cosine decay from `lr0` at t=0 to 0 at t=T.
pub fn cosine_lr(t: usize, horizon: usize, lr0: f64) -> f64 {
    assert!(horizon > 0, "cosine horizon must be positive");
    if t > horizon {
        log::warn!("cosine_lr past horizon (t={t} > T={horizon}); clamping to 0");
        return 0.0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * t as f64 / horizon as f64).cos()) / 2.0
}

/// L1 penalty groups added to the data loss: each group contributes
/// lambda * sum(|alpha|) over its keys.
#[derive(Debug, Clone, Default)]
pub struct ExtraLoss {
    pub groups: Vec<(f64, Vec<String>)>,
}

impl ExtraLoss {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn value(&self, params: &ParameterStore) -> Result<f64> {
        let mut total = 0.0;
        for (lambda, keys) in &self.groups {
            for key in keys {
                total += lambda * params.get(key)?.data.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        Ok(total)
    }

    /// Add the L1 subgradient (sign rule, 0 at 0) to `grads` in place.
    pub fn add_subgradient(
        &self,
        params: &ParameterStore,
        grads: &mut BTreeMap<String, TensorValue>,
    ) -> Result<()> {
        for (lambda, keys) in &self.groups {
            for key in keys {
                let value = params.get(key)?;
                let sub = value.map(|v| lambda * v.signum() * (v != 0.0) as u8 as f64);
                match grads.get_mut(key) {
                    Some(g) => g.add_assign(&sub),
                    None => {
                        grads.insert(key.clone(), sub);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Epoch/step record emitted by the training loop.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Keys exempt from weight decay (gate scalars, selection weights).
    pub no_decay_keys: Vec<String>,
    pub shuffle: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch_size: 32,
            lr0: 0.025,
            weight_decay: 0.0,
            no_decay_keys: Vec::new(),
            shuffle: true,
        }
    }
}

/// Minibatch SGD over a fixed dataset with a cosine schedule. Returns the
/// per-epoch mean training loss (data loss + extra loss). Deterministic
/// given the RNG state.
pub fn train(
    graph: &ComputationGraph,
    params: &mut ParameterStore,
    inputs: &TensorValue,
    targets: &TensorValue,
    extra: &ExtraLoss,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochStats>> {
    let n = inputs.batch();
    if n == 0 {
        return Err(CoreError::EmptyInput("training set is empty".into()));
    }
    let batch_size = opts.batch_size.max(1).min(n);
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = (opts.epochs * steps_per_epoch).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        if opts.shuffle {
            order.shuffle(rng);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_lr = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = gather_batch(inputs, targets, chunk);
            let lr = cosine_lr(step, total_steps, opts.lr0);
            let trace = forward(graph, params, &batch, Mode::Train)?;
            let extra_value = extra.value(params)?;
            let total_loss = trace.loss + extra_value;
            if !total_loss.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let grads = backward(graph, params, &trace)?;
            let mut by_key = grads.by_key;
            extra.add_subgradient(params, &mut by_key)?;
            if opts.weight_decay != 0.0 && !opts.no_decay_keys.is_empty() {
                // decayed and non-decayed keys step separately
                let mut no_decay: BTreeMap<String, TensorValue> = BTreeMap::new();
                for key in &opts.no_decay_keys {
                    if let Some(g) = by_key.remove(key) {
                        no_decay.insert(key.clone(), g);
                    }
                }
                sgd_step(params, &by_key, lr, opts.weight_decay)?;
                sgd_step(params, &no_decay, lr, 0.0)?;
            } else {
                sgd_step(params, &by_key, lr, opts.weight_decay)?;
            }
            epoch_loss += total_loss * chunk.len() as f64;
            epoch_lr = lr;
            step += 1;
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / n as f64,
            lr: epoch_lr,
        });
    }
    Ok(stats)
}

/// Assemble a batch from row indices.
pub fn gather_batch(inputs: &TensorValue, targets: &TensorValue, rows: &[usize]) -> Batch {
    let in_stride = inputs.per_example();
    let t_stride = targets.per_example();
    let mut in_shape = inputs.shape.clone();
    in_shape[0] = rows.len();
    let mut t_shape = targets.shape.clone();
    t_shape[0] = rows.len();
    let mut in_data = Vec::with_capacity(rows.len() * in_stride);
    let mut t_data = Vec::with_capacity(rows.len() * t_stride);
    for &r in rows {
        in_data.extend_from_slice(&inputs.data[r * in_stride..(r + 1) * in_stride]);
        t_data.extend_from_slice(&targets.data[r * t_stride..(r + 1) * t_stride]);
    }
    Batch::new(
        TensorValue::new(in_shape, in_data),
        TensorValue::new(t_shape, t_data),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_arithmetic() {
        let mut p = ParameterStore::new();
        p.insert("w", TensorValue::new(vec![1], vec![1.0]), true);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), TensorValue::new(vec![1], vec![0.5]));
        sgd_step(&mut p, &g, 0.1, 0.0).unwrap();
        assert!((p.get("w").unwrap().data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = ParameterStore::new();
        p.insert("w", TensorValue::new(vec![1], vec![1.0]), true);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), TensorValue::new(vec![1], vec![123.0]));
        sgd_step(&mut p, &g, 0.0, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn sgd_weight_decay() {
        let mut p = ParameterStore::new();
        p.insert("w", TensorValue::new(vec![1], vec![1.0]), true);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), TensorValue::new(vec![1], vec![0.0]));
        sgd_step(&mut p, &g, 0.1, 0.1).unwrap();
        assert!((p.get("w").unwrap().data[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_negative_lr() {
        let mut p = ParameterStore::new();
        let g = BTreeMap::new();
        assert!(sgd_step(&mut p, &g, -0.1, 0.0).is_err());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 0.4), 0.4);
        assert!((cosine_lr(10, 10, 0.4)).abs() < 1e-16);
        assert!((cosine_lr(5, 10, 0.4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cosine_clamps_past_horizon() {
        assert_eq!(cosine_lr(11, 10, 0.4), 0.0);
    }

    #[test]
    fn l1_subgradient_sign_rule() {
        let mut p = ParameterStore::new();
        p.insert("a", TensorValue::new(vec![3], vec![0.2, -0.4, 0.0]), true);
        let extra = ExtraLoss {
            groups: vec![(0.001, vec!["a".to_string()])],
        };
        let mut grads = BTreeMap::new();
        extra.add_subgradient(&p, &mut grads).unwrap();
        let g = &grads["a"];
        assert_eq!(g.data, vec![0.001, -0.001, 0.0]);
        let v = extra.value(&p).unwrap();
        assert!((v - 0.001 * 0.6).abs() < 1e-15);
    }
}
