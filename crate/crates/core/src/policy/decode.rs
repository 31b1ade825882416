use std::cmp::Ordering;

use super::model::{encode_inputs, step_forward, DecodeState, Encoded};
use super::{PolicyError, PolicyParams};
use super::Instance;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Mask candidates that are already in the prefix.
    pub no_repeat: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 4,
            no_repeat: false,
        }
    }
}

fn mask_for(enc: &Encoded, state: &DecodeState, no_repeat: bool) -> Option<Vec<bool>> {
    no_repeat.then(|| (0..enc.k).map(|j| state.chosen.contains(&j)).collect())
}

struct Hyp {
    state: DecodeState,
    score: f64,
    finished: bool,
}

/// Higher score first; ties prefer finished hypotheses, then the smaller slot list.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.finished.cmp(&a.finished))
        .then_with(|| a.state.chosen.cmp(&b.state.chosen))
}

fn beam_search(params: &PolicyParams, enc: &Encoded, opts: DecodeOptions) -> (Vec<usize>, f64) {
    let width = opts.beam.max(1);
    let mut live = vec![Hyp {
        state: DecodeState::new(enc.h),
        score: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    while !live.is_empty() {
        let mut expansions = Vec::new();
        for hyp in &live {
            let mask = mask_for(enc, &hyp.state, opts.no_repeat);
            let st = step_forward(params, enc, hyp.state.step(), &hyp.state.history, mask.as_deref());
            for (a, &lp) in st.dist.log_probs.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let score = hyp.score + lp;
                if a == enc.k {
                    expansions.push(Hyp {
                        state: hyp.state.clone(),
                        score,
                        finished: true,
                    });
                } else {
                    let mut state = hyp.state.clone();
                    state.push(enc, a);
                    expansions.push(Hyp {
                        state,
                        score,
                        finished: false,
                    });
                }
            }
        }
        expansions.sort_by(rank);
        expansions.truncate(width);
        live.clear();
        for h in expansions {
            if h.finished {
                done.push(h);
            } else {
                live.push(h);
            }
        }
    }
    done.sort_by(rank);
    let best = done.swap_remove(0);
    (best.state.chosen, best.score)
}

/// Beam search over complete action sequences, scored by total log-prob.
///
/// Returns candidate slots (STOP excluded) and the total log-prob. The
/// result is never worse than greedy decoding: if a narrow beam prunes the
/// greedy path and ends up lower, the greedy sequence is returned instead.
pub fn decode_beam(
    params: &PolicyParams,
    inst: &Instance,
    opts: DecodeOptions,
) -> Result<(Vec<usize>, f64), PolicyError> {
    let enc = encode_inputs(params, inst)?;
    let (slots, score) = beam_search(params, &enc, opts);
    if opts.beam > 1 {
        let (g_slots, g_score) = beam_search(params, &enc, DecodeOptions { beam: 1, ..opts });
        if g_score > score {
            return Ok((g_slots, g_score));
        }
    }
    Ok((slots, score))
}

pub fn decode_greedy(params: &PolicyParams, inst: &Instance, no_repeat: bool) -> Result<(Vec<usize>, f64), PolicyError> {
    decode_beam(params, inst, DecodeOptions { beam: 1, no_repeat })
}

/// Ancestral sample of one sequence. Returns slots and total log-prob.
pub fn sample_sequence(
    params: &PolicyParams,
    inst: &Instance,
    rng: &mut SplitMix64,
) -> Result<(Vec<usize>, f64), PolicyError> {
    let enc = encode_inputs(params, inst)?;
    Ok(sample_encoded(params, &enc, rng))
}

pub(crate) fn sample_encoded(params: &PolicyParams, enc: &Encoded, rng: &mut SplitMix64) -> (Vec<usize>, f64) {
    let mut state = DecodeState::new(enc.h);
    let mut total = 0.0;
    loop {
        let st = step_forward(params, enc, state.step(), &state.history, None);
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut action = enc.k;
        for (a, p) in st.dist.probs().enumerate() {
            acc += p;
            if u < acc {
                action = a;
                break;
            }
        }
        // Rounding can leave `acc` just below 1; fall back to the last action with mass.
        if acc <= u {
            action = st.dist.log_probs.iter().rposition(|l| *l > f64::NEG_INFINITY).unwrap();
        }
        total += st.dist.log_probs[action];
        if action == enc.k {
            return (state.chosen, total);
        }
        state.push(enc, action);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::tests::random_instance;
    use crate::policy::{sequence_log_prob, PolicyShape};

    fn all_sequences(k: usize, n_max: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..n_max {
            let mut next = Vec::new();
            for s in &frontier {
                for j in 0..k {
                    let mut t: Vec<usize> = s.clone();
                    t.push(j);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn wide_beam_is_exhaustive() {
        for seed in 0..40 {
            let p = PolicyParams::random(PolicyShape::new(10, 5, 3), seed, 1.0);
            let inst = random_instance(seed + 100, 10, 3);
            let (slots, score) = decode_beam(&p, &inst, DecodeOptions { beam: 27, no_repeat: false }).unwrap();
            let best = all_sequences(3, 3)
                .into_iter()
                .map(|s| (sequence_log_prob(&p, &inst, &s).unwrap(), s))
                .fold((f64::NEG_INFINITY, vec![]), |acc, x| if x.0 > acc.0 { x } else { acc });
            assert_eq!(slots, best.1, "seed {seed}");
            assert!((score - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_four_never_below_greedy() {
        for seed in 0..200 {
            let p = PolicyParams::random(PolicyShape::new(10, 5, 4), seed, 1.5);
            let inst = random_instance(seed, 10, 4);
            let (_, g) = decode_greedy(&p, &inst, false).unwrap();
            let (_, b) = decode_beam(&p, &inst, DecodeOptions::default()).unwrap();
            assert!(b >= g, "seed {seed}: {b} < {g}");
        }
    }

    fn stop_forcing(shape: PolicyShape) -> PolicyParams {
        let mut p = PolicyParams::zeros(shape);
        // z = S[0] at step 0 with zero W_q, so u . S[0] is the STOP score.
        p.step_embed_mut()[0] = 100.0;
        p.u_mut()[0] = 1.0;
        p
    }

    #[test]
    fn stop_forcing_params_give_empty() {
        let shape = PolicyShape::new(10, 4, 3);
        let p = stop_forcing(shape);
        let inst = random_instance(1, 10, 3);
        for beam in [1, 2, 4, 27] {
            assert!(decode_beam(&p, &inst, DecodeOptions { beam, no_repeat: false }).unwrap().0.is_empty());
        }
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            assert!(sample_sequence(&p, &inst, &mut rng).unwrap().0.is_empty());
        }
    }

    #[test]
    fn uniform_policy_samples_uniformly() {
        let shape = PolicyShape::new(10, 4, 1);
        let p = PolicyParams::zeros(shape);
        let inst = random_instance(2, 10, 3);
        let mut rng = SplitMix64::new(11);
        let n = 20_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (s, lp) = sample_sequence(&p, &inst, &mut rng).unwrap();
            assert!(s.len() <= 1);
            counts[s.first().copied().unwrap_or(3)] += 1;
            // The forced STOP after one pick adds nothing.
            assert!((lp + (4f64).ln()).abs() < 1e-12);
        }
        let mean = n as f64 / 4.0;
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn sampling_replays_per_seed() {
        let p = PolicyParams::random(PolicyShape::new(10, 4, 5), 8, 1.0);
        let inst = random_instance(9, 10, 4);
        let draw = |seed| {
            let mut rng = SplitMix64::new(seed);
            (0..20).map(|_| sample_sequence(&p, &inst, &mut rng).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert!(draw(42).iter().all(|s| s.len() <= 5));
    }

    #[test]
    fn no_repeat_decodes_distinct_slots() {
        for seed in 0..30 {
            let p = PolicyParams::random(PolicyShape::new(10, 4, 6), seed, 2.0);
            let inst = random_instance(seed, 10, 3);
            let (s, _) = decode_beam(&p, &inst, DecodeOptions { beam: 4, no_repeat: true }).unwrap();
            let mut t = s.clone();
            t.sort();
            t.dedup();
            assert_eq!(t.len(), s.len());
        }
    }
}
