//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Runs without the libtest harness so the criteria execute in order and can
//! share trained checkpoints. Expect several minutes on one core.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use bgm::evaluator::oracle::{generate_dataset, OracleConfig, OracleEvaluator};
use bgm::evaluator::{Evaluate, PassageSequence, TaskExample};
use bgm::harness::baselines::Bridge;
use bgm::harness::data::{build_instances, retrieve_all};
use bgm::harness::{
    reproduction_rate, run_baseline, run_gap_experiment, Backend, Experiment, ExperimentConfig, System,
    SystemInputs, SystemRun,
};
use bgm::metrics::Metric;
use bgm::policy::{
    decode_beam, encode_inputs, forward_trace, gradient_check, gradient_check_fn, sequence_log_prob,
    DecodeOptions, Instance, PolicyParams, PolicyShape,
};
use bgm::retrieval::{Corpus, EmbedConfig, RankedList};
use bgm::rl::{rl_loss_grad, LossTerms, RlExample, Trajectory};
use bgm::rng::SplitMix64;
use bgm::sps::{brute_force_best_sequence, synthesize_all, SilverRecord};

type Res<T> = Result<T, Box<dyn Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> Res<ExperimentConfig> {
    Ok(ExperimentConfig::load(&repo_root().join("configs").join(name))?)
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn oracle_lists(cfg: &OracleConfig, n: usize, k: usize) -> Res<(Corpus, Vec<TaskExample>, Vec<RankedList>)> {
    let (corpus, examples) = generate_dataset(cfg, n, 7)?;
    let lists = retrieve_all(&corpus, &examples, k)?;
    Ok((corpus, examples, lists))
}

/// The greedy search written out step by step, kept apart from the library.
fn replay_greedy(ex: &TaskExample, list: &RankedList, ev: &dyn Evaluate) -> Res<(Vec<String>, Vec<f64>)> {
    let reward = |ids: &[String]| -> Res<f64> {
        let seq: PassageSequence = ids.iter().map(String::as_str).collect();
        Ok(ev.evaluate(ex, &seq)?.reward)
    };
    let mut seq: Vec<String> = Vec::new();
    let mut r_silv = reward(&seq)?;
    let mut trace = vec![r_silv];
    loop {
        let mut d_best: Option<String> = None;
        let mut r_best = f64::NEG_INFINITY;
        for d in list.ids() {
            if seq.iter().any(|s| s == d) {
                continue;
            }
            let mut cur = seq.clone();
            cur.push(d.to_string());
            let r_cur = reward(&cur)?;
            if r_cur > r_best {
                r_best = r_cur;
                d_best = Some(d.to_string());
            }
        }
        match d_best {
            Some(d) if r_best > r_silv => {
                seq.push(d);
                r_silv = r_best;
                trace.push(r_silv);
            }
            _ => break,
        }
    }
    Ok((seq, trace))
}

fn c1_greedy_fidelity() -> Res<Verdict> {
    let cfg = OracleConfig::default();
    let (corpus, ex, lists) = oracle_lists(&cfg, 1000, 5)?;
    let ev = OracleEvaluator::new(&corpus, cfg)?;
    let t = Instant::now();
    let records = single_threaded(|| synthesize_all(&ex, &lists, &ev))?;
    let secs = t.elapsed().as_secs_f64();
    let mut mismatches = 0;
    let mut bad_traces = 0;
    for (i, rec) in records.iter().enumerate() {
        let (seq, trace) = replay_greedy(&ex[i], &lists[i], &ev)?;
        if rec.sps.ids() != seq.as_slice() || rec.reward_trace != trace {
            mismatches += 1;
        }
        let increasing = rec.reward_trace.windows(2).all(|w| w[1] > w[0]);
        if !increasing || rec.final_reward() < rec.reward_trace[0] {
            bad_traces += 1;
        }
    }
    Ok(verdict(
        mismatches == 0 && bad_traces == 0 && secs < 60.0,
        format!("{} instances, {mismatches} replay mismatches, {bad_traces} bad traces, {secs:.1}s single-threaded", ex.len()),
    ))
}

fn c2_brute_force() -> Res<Verdict> {
    let mut lines = Vec::new();
    let mut pass = true;
    // Under EM a two-fact answer gains nothing from its first fact alone, so
    // greedy can stop short of the pair; the penalty-1 check uses single-fact answers.
    let default = OracleConfig::default();
    let single_fact = OracleConfig {
        distractor_penalty: 1.0,
        multi_hop_rate: 0.0,
        ..Default::default()
    };
    for cfg in [default, single_fact] {
        let (penalty, multi_hop) = (cfg.distractor_penalty, cfg.multi_hop_rate);
        let (corpus, ex, lists) = oracle_lists(&cfg, 200, 5)?;
        let ev = OracleEvaluator::new(&corpus, cfg)?;
        let records = synthesize_all(&ex, &lists, &ev)?;
        let (mut dominated, mut equal) = (0, 0);
        for (i, rec) in records.iter().enumerate() {
            let (_, best) = brute_force_best_sequence(&ex[i], &lists[i], &ev, lists[i].len())?;
            dominated += usize::from(best >= rec.final_reward());
            equal += usize::from(best == rec.final_reward());
        }
        pass &= dominated == ex.len();
        if penalty == 1.0 {
            pass &= equal == ex.len();
        }
        lines.push(format!(
            "penalty {penalty}, two-fact rate {multi_hop}: brute >= greedy {dominated}/{}, equal {equal}/{}",
            ex.len(),
            ex.len()
        ));
    }
    Ok(verdict(pass, lines.join("; ")))
}

/// Candidate sets of size `k` embedded at a small dimension so every coordinate is checked.
fn small_instances(n: usize, k: usize, dim: usize) -> Res<(Vec<TaskExample>, Vec<Instance>)> {
    let (corpus, ex, lists) = oracle_lists(&OracleConfig::default(), n, k)?;
    let small = Corpus::new(corpus.passages().to_vec(), EmbedConfig { dim, seed: 0 })?;
    let inst = build_instances(&small, &ex, &lists)?;
    Ok((ex, inst))
}

fn random_slots(rng: &mut SplitMix64, k: usize, n_max: usize) -> Vec<usize> {
    let len = rng.below(n_max + 1);
    (0..len).map(|_| rng.below(k)).collect()
}

/// Finite-difference step. At 1e-5, f64 roundoff in the batch loss swamps
/// coordinates whose gradient is ~1e-8.
const FD_EPS: f64 = 1e-4;

fn c3_gradients() -> Res<Verdict> {
    let t = Instant::now();
    let (k, h, dim) = (3, 16, 32);
    let shape = PolicyShape::new(dim, h, 2 * k);
    let (ex, inst) = small_instances(50, k, dim)?;
    let mut rng = SplitMix64::new(3);
    let mut worst_nll: f64 = 0.0;
    for (i, instance) in inst.iter().enumerate() {
        let params = PolicyParams::random(shape, i as u64, 0.5);
        let slots = random_slots(&mut rng, k, shape.n_max);
        worst_nll = worst_nll.max(gradient_check(&params, instance, &slots, FD_EPS)?);
    }

    let examples: Vec<RlExample> = ex
        .iter()
        .zip(&inst)
        .map(|(e, i)| RlExample {
            example: e.clone(),
            instance: i.clone(),
        })
        .collect();
    let mut worst_rl: f64 = 0.0;
    for round in 0..10u64 {
        let params = PolicyParams::random(shape, 100 + round, 0.5);
        let reference = PolicyParams::random(shape, 200 + round, 0.5);
        let old = PolicyParams::random(shape, 300 + round, 0.5);
        let mut batch = Vec::new();
        let mut adv = Vec::new();
        for index in (round as usize * 5)..(round as usize * 5 + 5) {
            let slots = random_slots(&mut rng, k, shape.n_max);
            let enc = encode_inputs(&old, &examples[index].instance)?;
            let trace = forward_trace(&old, &enc, &slots)?;
            batch.push(Trajectory {
                index,
                example_id: examples[index].example.example_id.clone(),
                step_log_probs: trace.steps.iter().zip(&trace.actions).map(|(s, &a)| s.dist.log_probs[a]).collect(),
                slots,
                reward: rng.next_f64(),
            });
            adv.push(rng.next_f64() * 2.0 - 1.0);
        }
        for clip in [None, Some(0.2)] {
            let terms = LossTerms {
                kl_coef: 0.1,
                entropy_coef: 0.01,
                ppo_clip: clip,
            };
            let (_, grad, _) = rl_loss_grad(&params, &reference, &examples, &batch, &adv, terms)?;
            let f = |p: &PolicyParams| {
                rl_loss_grad(p, &reference, &examples, &batch, &adv, terms)
                    .expect("shapes checked above")
                    .0
            };
            worst_rl = worst_rl.max(gradient_check_fn(&params, &grad, FD_EPS, 0, f));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(verdict(
        worst_nll < 1e-4 && worst_rl < 1e-4 && secs < 30.0,
        format!("max rel err at eps {FD_EPS:e}: log-prob {worst_nll:.2e} (50 instances), RL surrogate {worst_rl:.2e} (10 batches x 2 objectives); {secs:.1}s"),
    ))
}

fn c4_beam() -> Res<Verdict> {
    let (k, h, dim) = (3, 16, 32);
    let shape = PolicyShape::new(dim, h, 3);
    let (_, inst) = small_instances(100, k, dim)?;
    let all: Vec<Vec<usize>> = (0..=3u32)
        .flat_map(|len| {
            (0..k.pow(len)).map(move |code| (0..len).map(|p| code / k.pow(p) % k).collect::<Vec<usize>>())
        })
        .collect();
    let (mut exact, mut wider_ok) = (0, 0);
    for (i, instance) in inst.iter().enumerate() {
        let params = PolicyParams::random(shape, 1000 + i as u64, 1.0);
        let mut best: (Vec<usize>, f64) = (vec![], f64::NEG_INFINITY);
        for s in &all {
            let lp = sequence_log_prob(&params, instance, s)?;
            if lp > best.1 {
                best = (s.clone(), lp);
            }
        }
        let (slots, score) = decode_beam(&params, instance, DecodeOptions { beam: 27, no_repeat: false })?;
        exact += usize::from(slots == best.0 && (score - best.1).abs() < 1e-12);
        let b4 = decode_beam(&params, instance, DecodeOptions { beam: 4, no_repeat: false })?.1;
        let b1 = decode_beam(&params, instance, DecodeOptions { beam: 1, no_repeat: false })?.1;
        wider_ok += usize::from(b4 >= b1);
    }
    let default_beam = ExperimentConfig::default().policy.beam;
    Ok(verdict(
        exact == inst.len() && wider_ok == inst.len() && default_beam == 4,
        format!(
            "beam 27 = exhaustive on {exact}/{}; beam 4 >= beam 1 on {wider_ok}/{}; default beam {default_beam}",
            inst.len(),
            inst.len()
        ),
    ))
}

/// One config's data, silver sequences and per-seed checkpoints.
struct Pipeline {
    cfg: ExperimentConfig,
    records: Vec<SilverRecord>,
    sl: BTreeMap<u64, PolicyParams>,
    rl: BTreeMap<u64, PolicyParams>,
}

impl Pipeline {
    fn new(cfg: ExperimentConfig) -> Res<Self> {
        let exp = Experiment::prepare(cfg.clone())?;
        let records = exp.synthesize(&exp.backend()?)?;
        Ok(Self {
            cfg,
            records,
            sl: BTreeMap::new(),
            rl: BTreeMap::new(),
        })
    }

    fn experiment(&self, seed: u64) -> Res<Experiment> {
        Ok(Experiment::prepare(self.cfg.clone().with_seed(seed))?)
    }

    fn sl(&mut self, seed: u64) -> Res<PolicyParams> {
        if !self.sl.contains_key(&seed) {
            let (p, _) = self.experiment(seed)?.train_sl(&self.records)?;
            self.sl.insert(seed, p);
        }
        Ok(self.sl[&seed].clone())
    }

    fn rl(&mut self, seed: u64) -> Res<PolicyParams> {
        if !self.rl.contains_key(&seed) {
            let sl = self.sl(seed)?;
            let exp = self.experiment(seed)?;
            let (p, _) = exp.train_rl(&sl, &exp.backend()?)?;
            self.rl.insert(seed, p);
        }
        Ok(self.rl[&seed].clone())
    }
}

fn bridge_run(exp: &Experiment, ev: &Backend<'_>, params: &PolicyParams, split: &str) -> Res<SystemRun> {
    let r = exp.range(split)?;
    let inputs = SystemInputs {
        examples: &exp.data.examples[r.clone()],
        retrieved: &exp.retrieved[r.clone()],
        evaluate: ev,
        bridge: Some(Bridge {
            params,
            instances: &exp.instances[r],
            decode: exp.decode_options(),
        }),
        seed: exp.cfg.seed,
    };
    Ok(run_baseline(System::Bgm, &inputs)?)
}

fn c5_sl_capacity(default: &mut Pipeline) -> Res<Verdict> {
    let exp = default.experiment(0)?;
    let train = exp.sl_examples(&default.records, exp.splits.train.clone())?;
    let mut rates = Vec::new();
    for hidden in [64, 256] {
        let params = if hidden == default.cfg.policy.hidden {
            default.sl(0)?
        } else {
            let mut cfg = default.cfg.clone();
            cfg.policy.hidden = hidden;
            Experiment::prepare(cfg)?.train_sl(&default.records)?.0
        };
        rates.push(reproduction_rate(&params, &train, exp.decode_options())?);
    }
    Ok(verdict(
        rates[0] >= 0.95 && rates[1] >= rates[0],
        format!(
            "train-set reproduction on {} examples: h=64 {:.1}%, h=256 {:.1}%",
            train.len(),
            100.0 * rates[0],
            100.0 * rates[1]
        ),
    ))
}

fn c6_rl_improvement(default: &mut Pipeline) -> Res<Verdict> {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let sl = default.sl(seed)?;
        let rl = default.rl(seed)?;
        let exp = default.experiment(seed)?;
        let ev = exp.backend()?;
        let s = 100.0 * bridge_run(&exp, &ev, &sl, "test")?.mean();
        let r = 100.0 * bridge_run(&exp, &ev, &rl, "test")?.mean();
        pass &= r >= s;
        parts.push(format!("seed {seed}: SL {s:.2} -> RL {r:.2} ({:+.2})", r - s));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(verdict(pass && secs < 900.0, format!("test EM {}; {secs:.0}s", parts.join(", "))))
}

fn c7_repetition() -> Res<Verdict> {
    let mut p = Pipeline::new(config("repetition.toml")?)?;
    let sl = p.sl(0)?;
    let rl = p.rl(0)?;
    let exp = p.experiment(0)?;
    let ev = exp.backend()?;
    let dup_rate = |run: &SystemRun| {
        run.sequences.iter().filter(|s| s.has_duplicates()).count() as f64 / run.sequences.len() as f64
    };
    let (sl_run, rl_run) = (bridge_run(&exp, &ev, &sl, "test")?, bridge_run(&exp, &ev, &rl, "test")?);
    let (s, r) = (dup_rate(&sl_run), dup_rate(&rl_run));
    Ok(verdict(
        r >= 0.5 && s == 0.0,
        format!(
            "duplicate rate on {} test examples: RL {:.1}%, SL {:.1}% (test EM RL {:.2}, SL {:.2})",
            rl_run.sequences.len(),
            100.0 * r,
            100.0 * s,
            100.0 * rl_run.mean(),
            100.0 * sl_run.mean()
        ),
    ))
}

fn c8_gap(default: &Pipeline) -> Res<Verdict> {
    let exp = default.experiment(0)?;
    let ev = exp.backend()?;
    let n = default.cfg.gap.n_permutations;
    let g = run_gap_experiment(&exp.data.examples, &exp.retrieved, &ev, n, 0)?;

    let insensitive = OracleConfig {
        order_sensitive: false,
        ..default.cfg.oracle.clone()
    };
    let ev0 = OracleEvaluator::new(&exp.data.corpus, insensitive)?;
    let g0 = run_gap_experiment(&exp.data.examples, &exp.retrieved, &ev0, n, 0)?;
    Ok(verdict(
        g.full_spread_pct <= 1.0 && g.top1_spread_pct >= 5.0 && g0.full_spread_pct == 0.0,
        format!(
            "{n} permutations x {} examples: full-list spread {:.2}%, top-1 spread {:.2}%; order-insensitive full-list spread {}",
            g.n_examples, g.full_spread_pct, g.top1_spread_pct, g0.full_spread_pct
        ),
    ))
}

fn c9_ordering(default: &mut Pipeline) -> Res<Verdict> {
    let mut lines = Vec::new();
    let mut pass = true;

    let rl = default.rl(0)?;
    let exp = default.experiment(0)?;
    let ev = exp.backend()?;
    let (table, _) = exp.run_systems(&ev, Some(&rl), "test")?;
    let score = |t: &bgm::harness::ResultTable, s: &str| t.get(s, "test").map(|r| r.value).unwrap_or(f64::NAN);
    let bgm_score = score(&table, "bgm");
    let rivals = ["gtr", "random", "psr", "psr_top1", "psr_top2", "psr_top3", "psr_top4"];
    let beaten = rivals.iter().filter(|s| bgm_score > score(&table, s)).count();
    pass &= beaten == rivals.len();
    let row = |t: &bgm::harness::ResultTable| {
        t.rows
            .iter()
            .map(|r| format!("{} {:.2}", r.system, r.value))
            .collect::<Vec<_>>()
            .join(", ")
    };
    lines.push(format!("default: bgm above {beaten}/{} rivals [{}]", rivals.len(), row(&table)));

    let mut harmful = Pipeline::new(config("harmful.toml")?)?;
    let rl = harmful.rl(0)?;
    let exp = harmful.experiment(0)?;
    let ev = exp.backend()?;
    let (table, runs) = exp.run_systems(&ev, Some(&rl), "test")?;
    let (naive, gtr, bgm_h) = (score(&table, "naive"), score(&table, "gtr"), score(&table, "bgm"));
    let Backend::Oracle(oracle) = &ev else {
        return Err("harmful config must use the oracle".into());
    };
    let bgm_run = runs.iter().find(|r| r.system == System::Bgm).ok_or("no bgm run")?;
    let test = exp.range("test")?;
    let known: Vec<usize> = (0..test.len())
        .filter(|&i| oracle.is_memory_known(&exp.data.examples[test.start + i]))
        .collect();
    let empty = known.iter().filter(|&&i| bgm_run.sequences[i].is_empty()).count();
    let majority = 2 * empty > known.len();
    pass &= naive > gtr && bgm_h > naive && majority;
    let sl_run = bridge_run(&exp, &ev, &harmful.sl(0)?, "test")?;
    let sl_empty = known.iter().filter(|&&i| sl_run.sequences[i].is_empty()).count();
    lines.push(format!(
        "harmful: naive {naive:.2} vs gtr {gtr:.2}, bgm {bgm_h:.2}; bgm empty on {empty}/{n} memory-known \
         (supervised-only bridge: EM {:.2}, empty on {sl_empty}/{n})",
        100.0 * sl_run.mean(),
        n = known.len()
    ));
    Ok(verdict(pass, lines.join("; ")))
}

fn c10_metrics() -> Res<Verdict> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metric_golden.json");
    let cases: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let cases = cases.as_array().ok_or("fixture is not a list")?;
    let mut exact = 0;
    for c in cases {
        let metric: Metric = c["metric"].as_str().ok_or("metric")?.parse()?;
        let got = metric.score(c["prediction"].as_str().ok_or("prediction")?, c["target"].as_str().ok_or("target")?)?;
        let want: f64 = c["score"].as_str().ok_or("score")?.parse()?;
        exact += usize::from(got.to_bits() == want.to_bits());
    }
    Ok(verdict(
        cases.len() == 10 && exact == cases.len(),
        format!("{exact}/{} golden cases bit-exact", cases.len()),
    ))
}

fn files_under(root: &Path) -> Res<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn c11_determinism() -> Res<Verdict> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/configs/small.toml");
    let verbs = ["generate-data", "retrieve", "synth-sps", "train-sl", "train-rl", "eval", "gap-experiment", "report"];
    let mut trees = Vec::new();
    for threads in [1, 4, 1] {
        let dir = tempfile::tempdir()?;
        for verb in verbs {
            let out = Command::new(env!("CARGO_BIN_EXE_bgm"))
                .arg("--config")
                .arg(&cfg)
                .args(["--seed", "7", "--out"])
                .arg(dir.path())
                .arg(verb)
                .env("RAYON_NUM_THREADS", threads.to_string())
                .env("RUST_LOG", "warn")
                .output()?;
            if !out.status.success() {
                return Ok(verdict(false, format!("{verb} failed: {}", String::from_utf8_lossy(&out.stderr))));
            }
        }
        trees.push(files_under(dir.path())?);
    }
    let same = trees.windows(2).all(|w| w[0] == w[1]);
    Ok(verdict(
        same && !trees[0].is_empty(),
        format!("{} output files identical across 1, 4 and 1 threads: {same}", trees[0].len()),
    ))
}

fn main() -> ExitCode {
    let mut default = match config("default.toml").and_then(Pipeline::new) {
        Ok(p) => p,
        Err(e) => {
            println!("setup FAIL: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    let mut report = |n: usize, r: Res<Verdict>, t: Instant| {
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(v) => {
                failed += usize::from(!v.pass);
                println!("criterion {n:>2} {} [{secs:.0}s] {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            }
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL [{secs:.0}s] error: {e}");
            }
        }
    };
    let t = Instant::now();
    report(1, c1_greedy_fidelity(), t);
    let t = Instant::now();
    report(2, c2_brute_force(), t);
    let t = Instant::now();
    report(3, c3_gradients(), t);
    let t = Instant::now();
    report(4, c4_beam(), t);
    let t = Instant::now();
    report(5, c5_sl_capacity(&mut default), t);
    let t = Instant::now();
    report(6, c6_rl_improvement(&mut default), t);
    let t = Instant::now();
    report(7, c7_repetition(), t);
    let t = Instant::now();
    report(8, c8_gap(&default), t);
    let t = Instant::now();
    report(9, c9_ordering(&mut default), t);
    let t = Instant::now();
    report(10, c10_metrics(), t);
    let t = Instant::now();
    report(11, c11_determinism(), t);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
