//! Policy-gradient fine-tuning of the bridge with downstream reward.
//!
//! Trajectories are sampled from the current policy; the terminal reward is
//! broadcast to every step (no discounting). The loss minimized is
//!
//! ```text
//! L = -mean_i sum_t surrogate_it + beta * mean_i sum_t KL_t(pi || pi_sl) - c_H * mean_i sum_t H_t(pi)
//! ```
//!
//! where the surrogate is `A_i log pi(a_t)` for REINFORCE and
//! `min(r A_i, clip(r, 1-eps, 1+eps) A_i)` with `r = pi(a_t) / pi_old(a_t)`
//! for PPO. `A_i = reward_i - baseline` and the baseline is an EMA of batch
//! mean rewards, seeded from the first batch. KL and entropy are taken over
//! the states each trajectory visits.
//!
//! Training starts from the initial policy at temperature `explore_temperature`:
//! the `m` and `u` blocks are divided by it, which divides every step logit by
//! the same factor. Greedy choices are unchanged; sampling becomes flatter, so
//! sequences the supervised policy almost never emits get tried. The KL anchor
//! is tempered the same way.

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluator::{EvalError, Evaluate, TaskExample};
use crate::policy::{
    backward, decode_beam, encode_inputs, forward_trace, log_prob_dscores, sample_encoded, DecodeOptions,
    Instance, Optimizer, OptimizerKind, PolicyError, PolicyParams, Trace, CHUNK,
};
use crate::rng::SplitMix64;

/// An example paired with its encoded candidate set.
#[derive(Debug, Clone)]
pub struct RlExample {
    pub example: TaskExample,
    pub instance: Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Index into the example slice the batch was collected from.
    pub index: usize,
    pub example_id: String,
    /// Chosen slots; STOP is implied after the last one.
    pub slots: Vec<usize>,
    /// Log-prob of each action (slots then STOP) under the collecting policy.
    pub step_log_probs: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    pub fn has_duplicates(&self) -> bool {
        let mut s = self.slots.clone();
        s.sort_unstable();
        s.windows(2).any(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    ReinforceBaseline,
    PpoClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub algorithm: Algorithm,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_episodes: usize,
    pub baseline_ema_decay: f64,
    pub kl_coef: f64,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub entropy_coef: f64,
    /// Logit divisor applied to the initial policy and the KL anchor.
    pub explore_temperature: f64,
    /// L2 penalty coefficient added to the gradient.
    pub weight_decay: f64,
    pub max_steps: u64,
    /// Updates between validation decodes.
    pub eval_every: u64,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub eval_beam: usize,
    pub skip_on_error: bool,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::ReinforceBaseline,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_episodes: 128,
            baseline_ema_decay: 0.99,
            kl_coef: 0.0,
            ppo_clip: 0.2,
            ppo_epochs: 4,
            entropy_coef: 0.0,
            explore_temperature: 10.0,
            weight_decay: 1e-3,
            max_steps: 2000,
            eval_every: 10,
            patience: 200,
            eval_beam: 4,
            skip_on_error: false,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.kl_coef >= 0.0 && self.entropy_coef >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr, kl_coef, entropy_coef and weight_decay must be >= 0");
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) && self.algorithm == Algorithm::PpoClip {
            return bad("ppo_clip must lie in (0, 1)");
        }
        if !(self.explore_temperature.is_finite() && self.explore_temperature > 0.0) {
            return bad("explore_temperature must be finite and > 0");
        }
        if !(0.0..=1.0).contains(&self.baseline_ema_decay) {
            return bad("baseline_ema_decay must lie in [0, 1]");
        }
        if self.batch_episodes == 0 || self.eval_beam == 0 {
            return bad("batch_episodes and eval_beam must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("invalid RL config: {0}")]
    InvalidConfig(String),
    #[error("no examples to train on")]
    EmptyDataset,
    #[error("example {example_id}: {source}")]
    Evaluator {
        example_id: String,
        #[source]
        source: EvalError,
    },
    #[error("update diverged: {stats:?}")]
    Diverged { stats: UpdateStats },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("log: {0}")]
    Log(#[from] std::io::Error),
}

/// Sample one trajectory per example. Each uses its own stream seeded from
/// `(batch_seed, example_id)`, so the batch does not depend on scheduling.
pub fn collect_batch<E: Evaluate + ?Sized>(
    params: &PolicyParams,
    examples: &[RlExample],
    indices: &[usize],
    evaluate: &E,
    batch_seed: u64,
    skip_on_error: bool,
) -> Result<Vec<Trajectory>, RlError> {
    let results: Vec<Result<Option<Trajectory>, RlError>> = indices
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let enc = encode_inputs(params, &ex.instance)?;
            let mut rng = SplitMix64::for_key(batch_seed, &ex.example.example_id);
            let (slots, _) = sample_encoded(params, &enc, &mut rng);
            let trace = forward_trace(params, &enc, &slots)?;
            let seq = ex.instance.ids_of(&slots);
            match evaluate.evaluate(&ex.example, &seq) {
                Ok(r) => Ok(Some(Trajectory {
                    index: i,
                    example_id: ex.example.example_id.clone(),
                    step_log_probs: step_log_probs(&trace),
                    slots,
                    reward: r.reward,
                })),
                Err(source) if skip_on_error => {
                    warn!("skipping example {}: {source}", ex.example.example_id);
                    Ok(None)
                }
                Err(source) => Err(RlError::Evaluator {
                    example_id: ex.example.example_id.clone(),
                    source,
                }),
            }
        })
        .collect();
    let mut out = Vec::with_capacity(indices.len());
    for r in results {
        if let Some(t) = r? {
            out.push(t);
        }
    }
    Ok(out)
}

fn step_log_probs(trace: &Trace) -> Vec<f64> {
    trace
        .steps
        .iter()
        .zip(&trace.actions)
        .map(|(s, &a)| s.dist.log_probs[a])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub baseline: f64,
    pub grad_norm: f64,
    /// Mean over trajectories of summed per-step KL to the reference policy.
    pub kl: f64,
}

/// Coefficients of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub kl_coef: f64,
    pub entropy_coef: f64,
    /// `Some(eps)` selects the clipped surrogate against the trajectory's stored log-probs.
    pub ppo_clip: Option<f64>,
}

/// Surrogate loss, its gradient, and the mean summed KL over `batch`.
pub fn rl_loss_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    examples: &[RlExample],
    batch: &[Trajectory],
    advantages: &[f64],
    terms: LossTerms,
) -> Result<(f64, PolicyParams, f64), PolicyError> {
    let n = batch.len() as f64;
    let parts: Vec<Result<(f64, f64, PolicyParams), PolicyError>> = batch
        .par_chunks(CHUNK)
        .zip(advantages.par_chunks(CHUNK))
        .map(|(trajs, advs)| {
            let mut g = PolicyParams::zeros(params.shape());
            let (mut loss, mut kl_total) = (0.0, 0.0);
            for (tr, &adv) in trajs.iter().zip(advs) {
                let inst = &examples[tr.index].instance;
                let enc = encode_inputs(params, inst)?;
                let trace = forward_trace(params, &enc, &tr.slots)?;
                let ref_trace = if terms.kl_coef > 0.0 {
                    let enc_ref = encode_inputs(reference, inst)?;
                    Some(forward_trace(reference, &enc_ref, &tr.slots)?)
                } else {
                    None
                };
                let mut dscores = Vec::with_capacity(trace.steps.len());
                for (t, st) in trace.steps.iter().enumerate() {
                    let a = trace.actions[t];
                    let k1 = st.dist.log_probs.len();
                    if st.forced {
                        dscores.push(vec![0.0; k1]);
                        continue;
                    }
                    let lp = &st.dist.log_probs;
                    // Surrogate term; the loss is its negative.
                    let mut d = match terms.ppo_clip {
                        None => {
                            loss -= adv * lp[a] / n;
                            log_prob_dscores(&st.dist, a, -adv / n)
                        }
                        Some(eps) => {
                            let r = (lp[a] - tr.step_log_probs[t]).exp();
                            let unclipped = r * adv;
                            let clipped = r.clamp(1.0 - eps, 1.0 + eps) * adv;
                            if unclipped <= clipped {
                                loss -= unclipped / n;
                                log_prob_dscores(&st.dist, a, -adv * r / n)
                            } else {
                                loss -= clipped / n;
                                vec![0.0; k1]
                            }
                        }
                    };
                    if let Some(rt) = &ref_trace {
                        let lr = &rt.steps[t].dist.log_probs;
                        let mut kl = 0.0;
                        for j in 0..k1 {
                            let p = lp[j].exp();
                            if p > 0.0 {
                                kl += p * (lp[j] - lr[j]);
                            }
                        }
                        kl_total += kl;
                        loss += terms.kl_coef * kl / n;
                        for j in 0..k1 {
                            let p = lp[j].exp();
                            if p > 0.0 {
                                d[j] += terms.kl_coef / n * p * (lp[j] - lr[j] - kl);
                            }
                        }
                    }
                    if terms.entropy_coef > 0.0 {
                        let ent: f64 = -(0..k1).map(|j| lp[j].exp() * lp[j]).filter(|x| x.is_finite()).sum::<f64>();
                        loss -= terms.entropy_coef * ent / n;
                        for j in 0..k1 {
                            let p = lp[j].exp();
                            if p > 0.0 {
                                // d(-c H)/ds_j = c p_j (log p_j + H)
                                d[j] += terms.entropy_coef / n * p * (lp[j] + ent);
                            }
                        }
                    }
                    dscores.push(d);
                }
                backward(params, inst, &enc, &trace, &dscores, &mut g);
            }
            Ok((loss, kl_total, g))
        })
        .collect();
    let mut grad = PolicyParams::zeros(params.shape());
    let (mut loss, mut kl) = (0.0, 0.0);
    for p in parts {
        let (l, k, g) = p?;
        loss += l;
        kl += k;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad, kl / n))
}

/// Running state of the trainer between updates.
#[derive(Debug, Clone)]
pub struct RlState {
    pub params: PolicyParams,
    pub baseline: Option<f64>,
    optimizer: Optimizer,
}

impl RlState {
    pub fn new(params: PolicyParams, optimizer: OptimizerKind) -> Self {
        let n = params.as_slice().len();
        Self {
            params,
            baseline: None,
            optimizer: Optimizer::new(optimizer, n),
        }
    }

    /// Advantages against the pre-update baseline; then fold the batch mean into the EMA.
    fn advantages(&mut self, batch: &[Trajectory], decay: f64) -> (Vec<f64>, f64, f64) {
        let mean = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        let b = *self.baseline.get_or_insert(mean);
        let adv = batch.iter().map(|t| t.reward - b).collect();
        self.baseline = Some(decay * b + (1.0 - decay) * mean);
        (adv, mean, b)
    }
}

fn checked(state: &RlState, stats: UpdateStats) -> Result<UpdateStats, RlError> {
    if !state.params.is_finite() || !stats.grad_norm.is_finite() || !stats.kl.is_finite() {
        return Err(RlError::Diverged { stats });
    }
    Ok(stats)
}

/// One REINFORCE step. The gradient descends the loss defined in the module docs.
pub fn reinforce_update(
    state: &mut RlState,
    reference: &PolicyParams,
    examples: &[RlExample],
    batch: &[Trajectory],
    cfg: &RlConfig,
) -> Result<UpdateStats, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    let (adv, mean, b) = state.advantages(batch, cfg.baseline_ema_decay);
    let terms = LossTerms {
        kl_coef: cfg.kl_coef,
        entropy_coef: cfg.entropy_coef,
        ppo_clip: None,
    };
    let (_, mut grad, kl) = rl_loss_grad(&state.params, reference, examples, batch, &adv, terms)?;
    if cfg.weight_decay > 0.0 {
        grad.add_scaled(&state.params, cfg.weight_decay);
    }
    let stats = UpdateStats {
        mean_reward: mean,
        baseline: b,
        grad_norm: grad.norm(),
        kl,
    };
    state.optimizer.step(&mut state.params, &grad, cfg.lr);
    checked(state, stats)
}

/// `ppo_epochs` clipped-surrogate steps on one batch collected under the current params.
pub fn ppo_update(
    state: &mut RlState,
    reference: &PolicyParams,
    examples: &[RlExample],
    batch: &[Trajectory],
    cfg: &RlConfig,
) -> Result<UpdateStats, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    let (adv, mean, b) = state.advantages(batch, cfg.baseline_ema_decay);
    let terms = LossTerms {
        kl_coef: cfg.kl_coef,
        entropy_coef: cfg.entropy_coef,
        ppo_clip: Some(cfg.ppo_clip),
    };
    let mut stats = UpdateStats {
        mean_reward: mean,
        baseline: b,
        ..Default::default()
    };
    for epoch in 0..cfg.ppo_epochs.max(1) {
        let (_, mut grad, kl) = rl_loss_grad(&state.params, reference, examples, batch, &adv, terms)?;
        if cfg.weight_decay > 0.0 {
            grad.add_scaled(&state.params, cfg.weight_decay);
        }
        if epoch == 0 {
            stats.grad_norm = grad.norm();
            stats.kl = kl;
        }
        state.optimizer.step(&mut state.params, &grad, cfg.lr);
        checked(state, stats)?;
    }
    Ok(stats)
}

/// Mean reward of beam-decoded sequences.
pub fn eval_mean_reward<E: Evaluate + ?Sized>(
    params: &PolicyParams,
    examples: &[RlExample],
    evaluate: &E,
    beam: usize,
) -> Result<f64, RlError> {
    if examples.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    let rewards: Vec<Result<f64, RlError>> = examples
        .par_iter()
        .map(|ex| {
            let (slots, _) = decode_beam(params, &ex.instance, DecodeOptions { beam, no_repeat: false })?;
            evaluate
                .evaluate(&ex.example, &ex.instance.ids_of(&slots))
                .map(|r| r.reward)
                .map_err(|source| RlError::Evaluator {
                    example_id: ex.example.example_id.clone(),
                    source,
                })
        })
        .collect();
    let mut total = 0.0;
    for r in rewards {
        total += r?;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlLogRow {
    pub step: u64,
    pub mean_reward: f64,
    pub baseline: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub eval_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlReport {
    pub initial_eval: f64,
    pub best_eval: f64,
    pub best_step: u64,
    pub steps: u64,
    pub log: Vec<RlLogRow>,
}

impl RlReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), RlError> {
        let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
        for row in &self.log {
            w.serialize(row).map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Divide every step logit of `params` by `t`.
pub fn tempered(mut params: PolicyParams, t: f64) -> PolicyParams {
    if t != 1.0 {
        params.m_mut().iter_mut().for_each(|x| *x /= t);
        params.u_mut().iter_mut().for_each(|x| *x /= t);
    }
    params
}

/// Alternate collection and updates from `init`, anchored to `reference`.
///
/// Returns the parameters with the best validation reward (the initial
/// parameters count as a candidate).
pub fn train_rl<E: Evaluate + ?Sized>(
    init: PolicyParams,
    reference: &PolicyParams,
    train: &[RlExample],
    eval: &[RlExample],
    evaluate: &E,
    cfg: &RlConfig,
) -> Result<(PolicyParams, RlReport), RlError> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    if init.shape() != reference.shape() {
        return Err(PolicyError::Shape(format!(
            "policy {:?} vs reference {:?}",
            init.shape(),
            reference.shape()
        ))
        .into());
    }
    let initial_eval = eval_mean_reward(&init, eval, evaluate, cfg.eval_beam)?;
    let mut best = (init.clone(), initial_eval, 0u64);
    let reference = &tempered(reference.clone(), cfg.explore_temperature);
    let mut state = RlState::new(tempered(init, cfg.explore_temperature), cfg.optimizer);
    let mut report = RlReport {
        initial_eval,
        best_eval: initial_eval,
        best_step: 0,
        steps: 0,
        log: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut shuffler = SplitMix64::for_key(cfg.seed, "rl-order");
    let mut stale = 0;
    info!("rl start: eval reward {initial_eval:.4}");

    for step in 1..=cfg.max_steps {
        let mut indices = Vec::with_capacity(cfg.batch_episodes);
        while indices.len() < cfg.batch_episodes.min(train.len()) {
            if cursor == order.len() {
                shuffler.shuffle(&mut order);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let batch_seed = SplitMix64::for_key(cfg.seed, &format!("batch-{step}")).next();
        let batch = collect_batch(&state.params, train, &indices, evaluate, batch_seed, cfg.skip_on_error)?;
        if batch.is_empty() {
            warn!("rl step {step}: every trajectory was skipped");
            continue;
        }
        let stats = match cfg.algorithm {
            Algorithm::ReinforceBaseline => reinforce_update(&mut state, reference, train, &batch, cfg)?,
            Algorithm::PpoClip => ppo_update(&mut state, reference, train, &batch, cfg)?,
        };
        report.steps = step;
        let mut row = RlLogRow {
            step,
            mean_reward: stats.mean_reward,
            baseline: stats.baseline,
            kl: stats.kl,
            grad_norm: stats.grad_norm,
            eval_reward: None,
        };
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let r = eval_mean_reward(&state.params, eval, evaluate, cfg.eval_beam)?;
            row.eval_reward = Some(r);
            info!(
                "rl step {step}: train reward {:.4} kl {:.4} eval {r:.4}",
                stats.mean_reward, stats.kl
            );
            if r > best.1 {
                best = (state.params.clone(), r, step);
                stale = 0;
            } else {
                stale += 1;
            }
        }
        report.log.push(row);
        if stale >= cfg.patience.max(1) {
            break;
        }
    }
    report.best_eval = best.1;
    report.best_step = best.2;
    Ok((best.0, report))
}
