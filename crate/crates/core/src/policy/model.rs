//! Forward pass, per-step distributions and reverse-mode gradients.
//!
//! Storage is row-major: `W_p[d][i]` lives at `d * h + i`, `S[t][i]` at
//! `t * h + i`, `M[i][c]` at `i * h + c`.

use super::{PolicyError, PolicyParams};
use crate::evaluator::PassageSequence;
use crate::retrieval::Embedding;

/// Query and candidate embeddings for one example; candidates are addressed by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub example_id: String,
    pub query: Embedding,
    pub candidates: Vec<Embedding>,
    pub candidate_ids: Vec<String>,
}

impl Instance {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// Map passage ids to candidate slots. The first slot wins if an id is listed twice.
    pub fn slots_of(&self, seq: &PassageSequence) -> Result<Vec<usize>, PolicyError> {
        seq.ids()
            .iter()
            .map(|id| {
                self.candidate_ids
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| PolicyError::UnknownCandidate {
                        example_id: self.example_id.clone(),
                        passage_id: id.clone(),
                    })
            })
            .collect()
    }

    pub fn ids_of(&self, slots: &[usize]) -> PassageSequence {
        slots.iter().map(|&s| self.candidate_ids[s].clone()).collect()
    }
}

/// `q = x W_q` and the candidate matrix `C` (k x h, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    pub k: usize,
    pub h: usize,
}

impl Encoded {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.c[j * self.h..(j + 1) * self.h]
    }
}

fn project(e: &Embedding, w: &[f64], h: usize, out: &mut [f64]) {
    for (d, x) in e.nonzeros() {
        let row = &w[d * h..(d + 1) * h];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += x * wv;
        }
    }
}

pub fn encode_inputs(params: &PolicyParams, inst: &Instance) -> Result<Encoded, PolicyError> {
    let shape = params.shape();
    if inst.candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates(inst.example_id.clone()));
    }
    let dims = std::iter::once(&inst.query).chain(&inst.candidates).map(|e| e.dim());
    if let Some(d) = dims.into_iter().find(|&d| d != shape.embed_dim) {
        return Err(PolicyError::Shape(format!(
            "example {}: embedding dim {d}, policy expects {}",
            inst.example_id, shape.embed_dim
        )));
    }
    let h = shape.hidden;
    let k = inst.k();
    let mut q = vec![0.0; h];
    project(&inst.query, params.w_q(), h, &mut q);
    let mut c = vec![0.0; k * h];
    for (j, e) in inst.candidates.iter().enumerate() {
        project(e, params.w_p(), h, &mut c[j * h..(j + 1) * h]);
    }
    Ok(Encoded { q, c, k, h })
}

/// Prefix of a decode: chosen slots and the running sum of their candidate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub chosen: Vec<usize>,
    pub history: Vec<f64>,
}

impl DecodeState {
    pub fn new(h: usize) -> Self {
        Self {
            chosen: Vec::new(),
            history: vec![0.0; h],
        }
    }

    pub fn step(&self) -> usize {
        self.chosen.len()
    }

    pub fn push(&mut self, enc: &Encoded, slot: usize) {
        for (a, b) in self.history.iter_mut().zip(enc.row(slot)) {
            *a += b;
        }
        self.chosen.push(slot);
    }
}

/// Normalized log-probabilities over candidate slots `0..k` followed by STOP.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub log_probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn stop(&self) -> usize {
        self.log_probs.len() - 1
    }

    pub fn stop_log_prob(&self) -> f64 {
        self.log_probs[self.stop()]
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_probs.iter().map(|l| l.exp())
    }
}

/// Intermediates of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub z: Vec<f64>,
    /// `g = z M`; candidate scores are `g . C_j`.
    pub g: Vec<f64>,
    pub history: Vec<f64>,
    pub dist: ActionDistribution,
    pub forced: bool,
}

fn log_softmax(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter_mut().for_each(|s| *s -= lse);
}

pub(crate) fn step_forward(
    params: &PolicyParams,
    enc: &Encoded,
    step: usize,
    history: &[f64],
    mask: Option<&[bool]>,
) -> StepTrace {
    let h = enc.h;
    let k = enc.k;
    if step >= params.shape().n_max {
        let mut log_probs = vec![f64::NEG_INFINITY; k + 1];
        log_probs[k] = 0.0;
        return StepTrace {
            z: vec![0.0; h],
            g: vec![0.0; h],
            history: history.to_vec(),
            dist: ActionDistribution { log_probs },
            forced: true,
        };
    }
    let s = &params.step_embed()[step * h..(step + 1) * h];
    let mut z: Vec<f64> = enc.q.iter().zip(s).map(|(a, b)| a + b).collect();
    let w_h = params.w_h();
    for (r, &hr) in history.iter().enumerate() {
        if hr != 0.0 {
            for (zi, w) in z.iter_mut().zip(&w_h[r * h..(r + 1) * h]) {
                *zi += hr * w;
            }
        }
    }
    let m = params.m();
    let mut g = vec![0.0; h];
    for (i, &zi) in z.iter().enumerate() {
        for (gc, mv) in g.iter_mut().zip(&m[i * h..(i + 1) * h]) {
            *gc += zi * mv;
        }
    }
    let mut scores = Vec::with_capacity(k + 1);
    for j in 0..k {
        let masked = mask.is_some_and(|m| m[j]);
        scores.push(if masked {
            f64::NEG_INFINITY
        } else {
            dot(&g, enc.row(j))
        });
    }
    scores.push(dot(&z, params.u()));
    log_softmax(&mut scores);
    StepTrace {
        z,
        g,
        history: history.to_vec(),
        dist: ActionDistribution { log_probs: scores },
        forced: false,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Step distribution at `state`. With `no_repeat`, already chosen slots are masked out.
pub fn step_logits(params: &PolicyParams, enc: &Encoded, state: &DecodeState, no_repeat: bool) -> ActionDistribution {
    let mask: Option<Vec<bool>> = no_repeat.then(|| (0..enc.k).map(|j| state.chosen.contains(&j)).collect());
    step_forward(params, enc, state.step(), &state.history, mask.as_deref()).dist
}

/// Forward record of one complete action sequence (slots then STOP).
#[derive(Debug, Clone)]
pub struct Trace {
    pub steps: Vec<StepTrace>,
    /// Slot per step; the last entry is STOP (`k`).
    pub actions: Vec<usize>,
}

impl Trace {
    pub fn log_prob(&self) -> f64 {
        self.steps
            .iter()
            .zip(&self.actions)
            .map(|(s, &a)| s.dist.log_probs[a])
            .sum()
    }

    pub fn slots(&self) -> &[usize] {
        &self.actions[..self.actions.len() - 1]
    }
}

pub(crate) fn check_slots(params: &PolicyParams, enc: &Encoded, slots: &[usize]) -> Result<(), PolicyError> {
    let n_max = params.shape().n_max;
    if slots.len() > n_max {
        return Err(PolicyError::TooLong { len: slots.len(), n_max });
    }
    if let Some(&s) = slots.iter().find(|&&s| s >= enc.k) {
        return Err(PolicyError::Shape(format!("slot {s} out of range for {} candidates", enc.k)));
    }
    Ok(())
}

pub fn forward_trace(params: &PolicyParams, enc: &Encoded, slots: &[usize]) -> Result<Trace, PolicyError> {
    check_slots(params, enc, slots)?;
    let mut state = DecodeState::new(enc.h);
    let mut steps = Vec::with_capacity(slots.len() + 1);
    for &s in slots {
        steps.push(step_forward(params, enc, state.step(), &state.history, None));
        state.push(enc, s);
    }
    steps.push(step_forward(params, enc, state.step(), &state.history, None));
    let mut actions = slots.to_vec();
    actions.push(enc.k);
    Ok(Trace { steps, actions })
}

/// Accumulate `sum_t dlogits[t] . d(log_probs_t)/d(theta)`-style gradients into `grad`.
///
/// `dscores[t]` is the derivative of the objective with respect to the raw
/// (pre-softmax) scores at step `t`; forced steps are skipped.
pub fn backward(
    params: &PolicyParams,
    inst: &Instance,
    enc: &Encoded,
    trace: &Trace,
    dscores: &[Vec<f64>],
    grad: &mut PolicyParams,
) {
    let h = enc.h;
    let k = enc.k;
    let mut dq = vec![0.0; h];
    let mut dc = vec![0.0; k * h];
    let mut running = vec![0.0; h];
    let (w_h, m, u) = (params.w_h(), params.m(), params.u());

    for t in (0..trace.steps.len()).rev() {
        let st = &trace.steps[t];
        if !st.forced {
            let ds = &dscores[t];
            let mut dg = vec![0.0; h];
            for j in 0..k {
                let dj = ds[j];
                if dj == 0.0 {
                    continue;
                }
                for (x, c) in dg.iter_mut().zip(enc.row(j)) {
                    *x += dj * c;
                }
                for (x, gv) in dc[j * h..(j + 1) * h].iter_mut().zip(&st.g) {
                    *x += dj * gv;
                }
            }
            let d_stop = ds[k];
            // dz = M dg + d_stop * u
            let mut dz = vec![0.0; h];
            for i in 0..h {
                dz[i] = dot(&m[i * h..(i + 1) * h], &dg) + d_stop * u[i];
            }
            {
                let gm = grad.m_mut();
                for i in 0..h {
                    let zi = st.z[i];
                    for (x, d) in gm[i * h..(i + 1) * h].iter_mut().zip(&dg) {
                        *x += zi * d;
                    }
                }
            }
            for (x, zi) in grad.u_mut().iter_mut().zip(&st.z) {
                *x += d_stop * zi;
            }
            for (x, d) in dq.iter_mut().zip(&dz) {
                *x += d;
            }
            for (x, d) in grad.step_embed_mut()[t * h..(t + 1) * h].iter_mut().zip(&dz) {
                *x += d;
            }
            {
                let gw = grad.w_h_mut();
                for (r, &hr) in st.history.iter().enumerate() {
                    if hr != 0.0 {
                        for (x, d) in gw[r * h..(r + 1) * h].iter_mut().zip(&dz) {
                            *x += hr * d;
                        }
                    }
                }
            }
            for (r, x) in running.iter_mut().enumerate() {
                *x += dot(&w_h[r * h..(r + 1) * h], &dz);
            }
        }
        if t > 0 {
            let a = trace.actions[t - 1];
            for (x, d) in dc[a * h..(a + 1) * h].iter_mut().zip(&running) {
                *x += d;
            }
        }
    }

    let gq = grad.w_q_mut();
    for (d, x) in inst.query.nonzeros() {
        for (g, v) in gq[d * h..(d + 1) * h].iter_mut().zip(&dq) {
            *g += x * v;
        }
    }
    let gp = grad.w_p_mut();
    for (j, e) in inst.candidates.iter().enumerate() {
        let row = &dc[j * h..(j + 1) * h];
        for (d, x) in e.nonzeros() {
            for (g, v) in gp[d * h..(d + 1) * h].iter_mut().zip(row) {
                *g += x * v;
            }
        }
    }
}

/// `d(log pi(a))/d(scores)` at a step: onehot(a) - pi.
pub(crate) fn log_prob_dscores(dist: &ActionDistribution, action: usize, weight: f64) -> Vec<f64> {
    let mut d: Vec<f64> = dist.probs().map(|p| -weight * p).collect();
    d[action] += weight;
    d
}

pub fn sequence_log_prob(params: &PolicyParams, inst: &Instance, slots: &[usize]) -> Result<f64, PolicyError> {
    let enc = encode_inputs(params, inst)?;
    Ok(forward_trace(params, &enc, slots)?.log_prob())
}

/// Add `weight * grad log p(slots)` into `grad`; returns `log p(slots)`.
pub fn sequence_log_prob_grad(
    params: &PolicyParams,
    inst: &Instance,
    slots: &[usize],
    weight: f64,
    grad: &mut PolicyParams,
) -> Result<f64, PolicyError> {
    let enc = encode_inputs(params, inst)?;
    let trace = forward_trace(params, &enc, slots)?;
    let dscores: Vec<Vec<f64>> = trace
        .steps
        .iter()
        .zip(&trace.actions)
        .map(|(s, &a)| log_prob_dscores(&s.dist, a, weight))
        .collect();
    backward(params, inst, &enc, &trace, &dscores, grad);
    Ok(trace.log_prob())
}
