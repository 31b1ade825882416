use super::model::sequence_log_prob_grad;
use super::{Instance, PolicyError, PolicyParams};
use crate::rng::SplitMix64;

const FULL_CHECK_LIMIT: usize = 10_000;

/// Max relative error between `analytic` and central differences of `f`.
///
/// Every coordinate is checked up to 10k parameters; above that a seeded 1%
/// subsample is used. Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn gradient_check_fn<F>(params: &PolicyParams, analytic: &PolicyParams, eps: f64, seed: u64, f: F) -> f64
where
    F: Fn(&PolicyParams) -> f64,
{
    let n = params.as_slice().len();
    let coords: Vec<usize> = if n <= FULL_CHECK_LIMIT {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        SplitMix64::new(seed).shuffle(&mut idx);
        idx.truncate(n.div_ceil(100));
        idx.sort_unstable();
        idx
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.as_slice()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Gradient check of `log p(slots)` for one instance.
pub fn gradient_check(params: &PolicyParams, inst: &Instance, slots: &[usize], eps: f64) -> Result<f64, PolicyError> {
    let mut grad = PolicyParams::zeros(params.shape());
    sequence_log_prob_grad(params, inst, slots, 1.0, &mut grad)?;
    let f = |p: &PolicyParams| super::sequence_log_prob(p, inst, slots).expect("validated above");
    Ok(gradient_check_fn(params, &grad, eps, 0, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::tests::random_instance;
    use crate::policy::{sequence_log_prob, PolicyShape};

    #[test]
    fn random_small_instances_pass() {
        for seed in 0..10 {
            let p = PolicyParams::random(PolicyShape::new(12, 16, 3), seed, 0.5);
            let inst = random_instance(seed, 12, 3);
            let mut rng = SplitMix64::new(seed);
            let len = rng.below(4);
            let slots: Vec<usize> = (0..len).map(|_| rng.below(3)).collect();
            let err = gradient_check(&p, &inst, &slots, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn stop_vector_is_linear_at_step_zero() {
        use crate::policy::model::{backward, encode_inputs, forward_trace};
        let p = PolicyParams::random(PolicyShape::new(12, 6, 3), 4, 0.5);
        let inst = random_instance(4, 12, 3);
        // Raw STOP score at step 0 with empty history: (q + S[0]) . u, linear in u.
        let stop_score = |q: &PolicyParams| {
            let enc = encode_inputs(q, &inst).unwrap();
            let h = enc.h;
            (0..h).map(|i| (enc.q[i] + q.step_embed()[i]) * q.u()[i]).sum::<f64>()
        };
        let enc = encode_inputs(&p, &inst).unwrap();
        let trace = forward_trace(&p, &enc, &[]).unwrap();
        let mut onehot = vec![0.0; 4];
        onehot[3] = 1.0;
        let mut grad = PolicyParams::zeros(p.shape());
        backward(&p, &inst, &enc, &trace, &[onehot], &mut grad);
        let off: usize = p.shape().sizes()[..5].iter().sum();
        let mut probe = p.clone();
        for i in off..off + 6 {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + 1e-5;
            let up = stop_score(&probe);
            probe.as_mut_slice()[i] = orig - 1e-5;
            let down = stop_score(&probe);
            probe.as_mut_slice()[i] = orig;
            let n = (up - down) / 2e-5;
            let a = grad.as_slice()[i];
            assert!((a - n).abs() / (a.abs() + n.abs()).max(1e-8) < 1e-8, "{a} vs {n}");
        }
        assert!(sequence_log_prob(&p, &inst, &[]).unwrap() < 0.0);
    }

    #[test]
    fn smaller_epsilon_does_not_blow_up() {
        let p = PolicyParams::random(PolicyShape::new(12, 8, 3), 9, 0.5);
        let inst = random_instance(9, 12, 3);
        let e4 = gradient_check(&p, &inst, &[1, 0], 1e-4).unwrap();
        let e5 = gradient_check(&p, &inst, &[1, 0], 1e-5).unwrap();
        assert!(e5 <= e4.max(1e-6), "{e5} vs {e4}");
    }

    #[test]
    fn large_models_are_subsampled() {
        let p = PolicyParams::random(PolicyShape::new(256, 32, 2), 1, 0.1);
        assert!(p.as_slice().len() > FULL_CHECK_LIMIT);
        let calls = std::cell::Cell::new(0usize);
        let g = PolicyParams::zeros(p.shape());
        gradient_check_fn(&p, &g, 1e-5, 3, |_| {
            calls.set(calls.get() + 1);
            0.0
        });
        assert_eq!(calls.get(), 2 * p.as_slice().len().div_ceil(100));
    }
}
