//! Supervised training on silver sequences: minimize mean negative log-prob.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::sequence_log_prob_grad;
use super::{Instance, PolicyError, PolicyParams};
use crate::rng::SplitMix64;

/// Linear warmup to `base_lr`, then inverse-square-root decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            warmup_steps: 1000,
        }
    }
}

impl Schedule {
    /// Learning rate for 1-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup_steps as f64;
        if self.warmup_steps == 0 {
            self.base_lr
        } else if t <= w {
            self.base_lr * t / w
        } else {
            self.base_lr * (w / t).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Adam state. Uses the scheduled learning rate as its step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descend along `grad` (gradient of a loss to minimize).
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) {
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let it = params.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in it {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Optimizer dispatch shared by the supervised and RL trainers.
#[derive(Debug, Clone)]
pub(crate) enum Optimizer {
    Sgd,
    Adam(Box<Adam>),
}

impl Optimizer {
    pub(crate) fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Box::new(Adam::new(n))),
        }
    }

    pub(crate) fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) {
        match self {
            Optimizer::Sgd => params.add_scaled(grad, -lr),
            Optimizer::Adam(a) => a.step(params, grad, lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub instance: Instance,
    /// Target slots (STOP implied).
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlConfig {
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    /// Optimizer steps between validation checks; 0 means once per epoch.
    pub eval_every: u64,
    /// L2 penalty coefficient added to the gradient.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            max_epochs: 200,
            patience: 5,
            eval_every: 0,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlReport {
    pub steps: u64,
    pub epochs: usize,
    pub best_step: u64,
    pub best_val_loss: f64,
    /// `(step, train loss, validation loss)` at each check.
    pub curve: Vec<(u64, f64, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss {loss}, parameter norm {param_norm}, lr {lr}")]
    Diverged {
        step: u64,
        loss: f64,
        param_norm: f64,
        lr: f64,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Examples per parallel work unit. Fixed so that the reduction order, and
/// therefore the result, does not depend on the thread count.
pub(crate) const CHUNK: usize = 8;

/// Mean NLL and its gradient over `batch`.
pub(crate) fn nll_grad(params: &PolicyParams, batch: &[&TrainExample]) -> Result<(f64, PolicyParams), PolicyError> {
    let n = batch.len() as f64;
    let parts: Vec<Result<(f64, PolicyParams), PolicyError>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = PolicyParams::zeros(params.shape());
            let mut loss = 0.0;
            for ex in chunk {
                loss -= sequence_log_prob_grad(params, &ex.instance, &ex.target, -1.0 / n, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = PolicyParams::zeros(params.shape());
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    Ok((loss / n, total))
}

pub(crate) fn mean_nll(params: &PolicyParams, data: &[TrainExample]) -> Result<f64, PolicyError> {
    let parts: Vec<Result<f64, PolicyError>> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|ex| super::sequence_log_prob(params, &ex.instance, &ex.target))
                .try_fold(0.0, |acc, lp| Ok(acc - lp?))
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Train from `init`; returns the parameters with the best validation loss.
///
/// With an empty `val`, the training loss is used for early stopping.
pub fn train_supervised(
    init: PolicyParams,
    train: &[TrainExample],
    val: &[TrainExample],
    cfg: &SlConfig,
) -> Result<(PolicyParams, SlReport), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, params.as_slice().len());
    let batch_size = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch_size) as u64;
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };
    let val_set = if val.is_empty() { train } else { val };

    let mut best = (params.clone(), mean_nll(&params, val_set)?, 0u64);
    let mut report = SlReport {
        steps: 0,
        epochs: 0,
        best_step: 0,
        best_val_loss: best.1,
        curve: Vec::new(),
    };
    let mut stale = 0usize;
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = SplitMix64::new(cfg.seed);

    'outer: for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        report.epochs = epoch + 1;
        for idx in order.chunks(batch_size) {
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = nll_grad(&params, &batch)?;
            if cfg.weight_decay > 0.0 {
                grad.add_scaled(&params, cfg.weight_decay);
            }
            report.steps += 1;
            let lr = cfg.schedule.lr(report.steps);
            if !loss.is_finite() || !grad.is_finite() {
                return Err(TrainError::Diverged {
                    step: report.steps,
                    loss,
                    param_norm: params.norm(),
                    lr,
                });
            }
            opt.step(&mut params, &grad, lr);
            if !params.is_finite() {
                return Err(TrainError::Diverged {
                    step: report.steps,
                    loss,
                    param_norm: params.norm(),
                    lr,
                });
            }
            running += loss;
            running_n += 1;
            if report.steps.is_multiple_of(eval_every) {
                let v = mean_nll(&params, val_set)?;
                let tr = running / running_n as f64;
                running = 0.0;
                running_n = 0;
                report.curve.push((report.steps, tr, v));
                debug!("sl step {} train {tr:.4} val {v:.4}", report.steps);
                if v < best.1 {
                    best = (params.clone(), v, report.steps);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break 'outer;
                    }
                }
            }
        }
    }
    report.best_step = best.2;
    report.best_val_loss = best.1;
    info!(
        "sl done: {} steps, {} epochs, best val {:.4} at step {}",
        report.steps, report.epochs, report.best_val_loss, report.best_step
    );
    Ok((best.0, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::tests::random_instance;
    use crate::policy::{sequence_log_prob, PolicyShape};

    #[test]
    fn schedule_values() {
        let s = Schedule::default();
        assert_eq!(s.lr(1000), 0.001);
        assert!((s.lr(4000) - 0.0005).abs() < 1e-15);
        assert!((s.lr(500) - 0.0005).abs() < 1e-15);
        assert!(s.lr(1) > 0.0);
    }

    #[test]
    fn memorizes_a_single_record() {
        let shape = PolicyShape::new(16, 8, 4);
        let ex = TrainExample {
            instance: random_instance(1, 16, 3),
            target: vec![2, 0],
        };
        let cfg = SlConfig {
            schedule: Schedule {
                base_lr: 0.05,
                warmup_steps: 10,
            },
            batch_size: 1,
            max_epochs: 600,
            patience: 1000,
            ..Default::default()
        };
        let (p, _) = train_supervised(PolicyParams::init(shape, 2), std::slice::from_ref(&ex), &[], &cfg).unwrap();
        let lp = sequence_log_prob(&p, &ex.instance, &ex.target).unwrap();
        assert!(lp > -1e-2, "{lp}");
    }

    #[test]
    fn divergence_is_reported() {
        let shape = PolicyShape::new(16, 8, 4);
        let ex = TrainExample {
            instance: random_instance(1, 16, 3),
            target: vec![1],
        };
        let cfg = SlConfig {
            schedule: Schedule {
                base_lr: 1e200,
                warmup_steps: 0,
            },
            optimizer: OptimizerKind::Sgd,
            batch_size: 1,
            max_epochs: 50,
            ..Default::default()
        };
        let err = train_supervised(PolicyParams::init(shape, 2), &[ex], &[], &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn batch_gradient_is_thread_count_independent() {
        let shape = PolicyShape::new(16, 8, 4);
        let data: Vec<TrainExample> = (0..29)
            .map(|i| TrainExample {
                instance: random_instance(i, 16, 3),
                target: vec![(i % 3) as usize],
            })
            .collect();
        let refs: Vec<&TrainExample> = data.iter().collect();
        let p = PolicyParams::init(shape, 1);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| nll_grad(&p, &refs).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn empty_training_set_rejected() {
        let shape = PolicyShape::new(16, 8, 4);
        assert!(matches!(
            train_supervised(PolicyParams::init(shape, 2), &[], &[], &SlConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }
}
