//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=2,5` runs a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use dialcrit::corpus::{generate_corpus, generate_mixed, Corpus, Episode, Split};
use dialcrit::critic::{
    dialogue_batch, ActCodec, ActionEncoding, ActionInputs, Critic, CriticConfig, Dropout, TransitionBatch,
};
use dialcrit::dialenv::{goal_dim, Env, EnvConfig, Ontology};
use dialcrit::evaluator::{
    compare_policies, critic_estimate, fit_q, monte_carlo_eval, pseudo_dialogue_success, EvalConfig, FqeConfig,
};
use dialcrit::latent::{corpus_features, pretrain, FrozenNoise, LatentBatch, LatentConfig, PretrainSchedule, SlPolicy, Vae};
use dialcrit::numerics::{grad_check, PaddedBatch, ParameterSet};
use dialcrit::plas::{
    act_latent_table, actor_loss, plas_train, reinforce_loss, reinforce_train, sample_pseudo_dialogues, Actor,
    PlasConfig, PlasPolicy, ReinforceConfig,
};
use dialcrit::policy::{EagerProvider, EpsilonOracle, Policy, ScriptedOracle};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn env() -> Env {
    Env::new(Ontology::miniwoz(), EnvConfig::default()).unwrap()
}

// ---------------------------------------------------------------- 1

fn tiny_latent() -> LatentConfig {
    LatentConfig {
        latent_dim: 3,
        hidden: 4,
        embed: 3,
        ..LatentConfig::default()
    }
}

fn tiny_critic() -> CriticConfig {
    CriticConfig {
        hidden: 4,
        head: 6,
        goal_embed: 3,
        action_embed: 3,
        ..CriticConfig::default()
    }
}

struct Tiny {
    env: Env,
    corpus: Corpus,
    vae: Vae,
    critic: Critic,
    batch: TransitionBatch,
    corpus_z: Vec<Vec<f64>>,
}

fn tiny(seed: u64) -> Tiny {
    let env = env();
    let pol = EpsilonOracle::new(&env, 0.3).unwrap();
    let corpus = generate_corpus(&env, &pol, 2, seed, Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vae = Vae::new(tiny_latent(), &env, &mut rng).unwrap();
    let critic = Critic::new(tiny_critic(), ActionEncoding::Latent { dim: 3 }, env.turn_dim(), goal_dim(env.ontology()), &mut rng).unwrap();
    let table = act_latent_table(&vae, &env).unwrap();
    let feats = corpus_features(&env, &corpus);
    let eps: Vec<&Episode> = corpus.episodes.iter().collect();
    let fs: Vec<&[Vec<f64>]> = feats.iter().map(Vec::as_slice).collect();
    let batch = dialogue_batch(&env, &eps, &fs, &ActCodec::Latent(table.0.clone())).unwrap();
    let corpus_z = eps.iter().flat_map(|e| e.acts.iter().map(|&a| table.0[a].clone())).collect();
    Tiny {
        env,
        corpus,
        vae,
        critic,
        batch,
        corpus_z,
    }
}

fn gradients() -> Outcome {
    const SEEDS: u64 = 20;
    // Finite-difference steps; the check extrapolates from each and its half.
    // The latent objectives are smooth but large, so a wide step keeps
    // rounding out of their near-zero coordinates. The actor goes through a
    // clamp and a minimum over dropout passes and needs a step smaller than
    // the distance to those kinks.
    const SMOOTH: f64 = 1e-2;
    const STEP: f64 = 1e-4;
    let mut worst = [0.0f64; 5];
    for seed in 0..SEEDS {
        let t = tiny(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let eps: Vec<&Episode> = t.corpus.episodes.iter().collect();
        let feats = corpus_features(&t.env, &t.corpus);
        let fs: Vec<&[Vec<f64>]> = feats.iter().map(Vec::as_slice).collect();
        let lb = LatentBatch::from_episodes(t.env.actions(), &eps, &fs).unwrap();
        let noise = FrozenNoise::sample(lb.len(), 3, &mut rng);
        let all = t.vae.params.merged().unwrap();
        let joint = grad_check(&all, SMOOTH, Some(24), |g, p| t.vae.lava_mt_loss(g, p, &lb, &noise)).map_err(|e| e.to_string())?;
        let warm = grad_check(&all, SMOOTH, Some(24), |g, p| t.vae.vae_warmup_loss(g, p, &lb, &noise)).map_err(|e| e.to_string())?;

        let actor = Actor::from_vae(&t.vae, 10.0).unwrap();
        let masks = t.critic.draw_masks(t.batch.len(), 3, &mut rng).unwrap();
        let act = grad_check(&actor.params, STEP, Some(24), |g, p| {
            let pc = t.critic.params.bind(g);
            actor_loss(g, p, &pc, &actor, &t.critic, &t.batch, &t.corpus_z, &masks, 1.0)
        })
        .map_err(|e| e.to_string())?;

        let targets: Vec<f64> = (0..t.batch.len()).map(|_| rng.random::<f64>()).collect();
        let mask = t.critic.draw_masks(t.batch.len(), 1, &mut rng).unwrap().remove(0);
        let crit = grad_check(&t.critic.params, STEP, Some(24), |g, p| {
            t.critic.critic_loss(g, p, &t.batch, &targets, Dropout::Mask(&mask), Some(0.3))
        })
        .map_err(|e| e.to_string())?;

        let mut sampled = sample_pseudo_dialogues(&t.env, &t.vae, &eps, 0.99, &mut rng).unwrap();
        sampled.returns = (0..sampled.returns.len()).map(|_| rng.random::<f64>()).collect();
        let state = t.vae.state_encoder();
        let rf = grad_check(&t.vae.params.theta, STEP, Some(24), |g, p| reinforce_loss(g, p, state, &sampled)).map_err(|e| e.to_string())?;

        for (w, e) in worst.iter_mut().zip([joint, warm, act, crit, rf]) {
            *w = w.max(e);
        }
    }
    let detail = format!(
        "{SEEDS} seeds; worst relative error joint {:.1e}, warm-up {:.1e}, actor {:.1e}, critic {:.1e}, reinforce {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    if worst.iter().all(|&w| w < 1e-4) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 2

// Three states A, B, C and a terminal; two actions everywhere.
const END: usize = 3;
const TOY_GAMMA: f64 = 0.9;
const TOY_POLICY: [usize; 3] = [1, 0, 1];

fn toy_step(s: usize, a: usize) -> (usize, f64) {
    match (s, a) {
        (0, 0) => (1, 0.1),
        (0, 1) => (2, 0.0),
        (1, 0) => (END, 0.8),
        (1, 1) => (END, 0.3),
        (2, 0) => (END, 0.6),
        (2, 1) => (1, 0.0),
        _ => unreachable!("no such transition"),
    }
}

/// Exact action values of the fixed policy by iterating the Bellman
/// operator to convergence.
fn toy_dp() -> [[f64; 2]; 3] {
    let mut q = [[0.0; 2]; 3];
    for _ in 0..100 {
        let prev = q;
        for s in 0..3 {
            for a in 0..2 {
                let (n, r) = toy_step(s, a);
                q[s][a] = r + if n == END { 0.0 } else { TOY_GAMMA * prev[n][TOY_POLICY[n]] };
            }
        }
    }
    q
}

fn toy_paths(s: usize, prefix: Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
    for a in 0..2 {
        let mut p = prefix.clone();
        p.push((s, a));
        match toy_step(s, a) {
            (END, _) => out.push(p),
            (n, _) => toy_paths(n, p, out),
        }
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn toy_batch(paths: &[Vec<(usize, usize)>], idx: &[usize]) -> (TransitionBatch, ActionInputs) {
    let seqs: Vec<Vec<Vec<f64>>> = idx
        .iter()
        .map(|&i| {
            let mut v: Vec<Vec<f64>> = paths[i].iter().map(|&(s, _)| one_hot(s, 4)).collect();
            v.push(one_hot(END, 4));
            v
        })
        .collect();
    let refs: Vec<&[Vec<f64>]> = seqs.iter().map(Vec::as_slice).collect();
    let contexts = PaddedBatch::new(&refs).unwrap();
    let mut b = TransitionBatch {
        contexts,
        goals: vec![vec![]; idx.len()],
        seq: vec![],
        picks: vec![],
        next_picks: vec![],
        actions: ActionInputs::Latent(vec![]),
        rewards: vec![],
        terminal: vec![],
    };
    let (mut acts, mut next) = (vec![], vec![]);
    for (k, &i) in idx.iter().enumerate() {
        for (t, &(s, a)) in paths[i].iter().enumerate() {
            let (n, r) = toy_step(s, a);
            b.seq.push(k);
            b.picks.push(b.contexts.row(k, t));
            b.next_picks.push(b.contexts.row(k, t + 1));
            b.rewards.push(r);
            b.terminal.push(n == END);
            acts.push(one_hot(a, 2));
            next.push(one_hot(if n == END { 0 } else { TOY_POLICY[n] }, 2));
        }
    }
    b.actions = ActionInputs::Latent(acts);
    (b, ActionInputs::Latent(next))
}

fn toy_fqe() -> Outcome {
    let exact = toy_dp();
    let frozen = [[0.82, 0.648], [0.8, 0.3], [0.6, 0.72]];
    for s in 0..3 {
        for a in 0..2 {
            if (exact[s][a] - frozen[s][a]).abs() > 1e-12 {
                return Err(format!("dynamic programming disagrees with the frozen values at ({s}, {a})"));
            }
        }
    }
    let mut paths = Vec::new();
    for s in 0..3 {
        toy_paths(s, vec![], &mut paths);
    }
    let cfg = CriticConfig {
        gamma: TOY_GAMMA,
        dropout: 0.0,
        ..FqeConfig::default().critic
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut critic = Critic::new(cfg, ActionEncoding::Latent { dim: 2 }, 4, 0, &mut rng).unwrap();
    let n = paths.len();
    fit_q(&mut critic, 3000, &mut rng, |rng| {
        let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..n)).collect();
        Ok(toy_batch(&paths, &idx))
    })
    .map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..n).collect();
    let (b, _) = toy_batch(&paths, &all);
    let q = critic
        .q_values(&critic.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &[])
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for p in &paths {
        for &(s, a) in p {
            worst = worst.max((q[k] - exact[s][a]).abs());
            k += 1;
        }
    }
    let detail = format!("max |Q - DP| {worst:.4} over {k} (state, action) occurrences");
    if worst <= 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 3

fn fqe_consistency() -> Outcome {
    let env = env();
    let codec = ActCodec::Tokens(env.actions().clone());
    let cfg = EvalConfig::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for eps in [0.0, 0.3, 0.8] {
        let pol = EpsilonOracle::new(&env, eps).unwrap();
        let corpus = generate_corpus(&env, &pol, 2000, 21, Split::Train).unwrap();
        let truth = corpus.success_rate();
        let est = critic_estimate(&env, &pol, &corpus, &corpus, &codec, &cfg).map_err(|e| e.to_string())?;
        let dev = est.pessimistic.iter().map(|v| (v - truth).abs()).fold(0.0, f64::max);
        ok &= dev <= 0.05;
        let vals: Vec<String> = est.pessimistic.iter().map(|v| format!("{v:.3}")).collect();
        parts.push(format!("eps {eps}: corpus {truth:.3} critic [{}] max dev {dev:.3}", vals.join(", ")));
    }
    let detail = parts.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------ shared training runs

const SEEDS: [u64; 3] = [1, 2, 3];
const ROLLOUTS: usize = 1000;
const ROLLOUT_SEED: u64 = 7;
const PSEUDO_SEED: u64 = 11;

struct Data {
    env: Env,
    train: Corpus,
    valid: Corpus,
    test: Corpus,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let env = env();
        let a = EpsilonOracle::new(&env, 0.1).unwrap();
        let b = EpsilonOracle::new(&env, 0.6).unwrap();
        let mix: [(f64, &dyn Policy); 2] = [(0.5, &a), (0.5, &b)];
        let train = generate_mixed(&env, &mix, 2000, 5, Split::Train).unwrap();
        let valid = generate_mixed(&env, &mix, 500, 6, Split::Valid).unwrap();
        let test = generate_mixed(&env, &mix, 500, 7, Split::Test).unwrap();
        Data { env, train, valid, test }
    })
}

#[derive(Clone, Copy)]
struct Scores {
    oracle: f64,
    pseudo: f64,
}

impl Scores {
    fn gap(&self) -> f64 {
        self.pseudo - self.oracle
    }
}

struct SeedRun {
    seed: u64,
    recon: f64,
    sl: Scores,
    plas: Scores,
    reinforce: Scores,
    plas_policy: PlasPolicy,
    reinforce_policy: SlPolicy,
}

fn scores(policy: &dyn Policy) -> Scores {
    let d = data();
    let oracle = monte_carlo_eval(&d.env, policy, ROLLOUTS, ROLLOUT_SEED, 1).unwrap();
    let pseudo = pseudo_dialogue_success(&d.env, policy, &d.test, PSEUDO_SEED).unwrap();
    Scores {
        oracle: oracle.success.mean,
        pseudo: pseudo.success_rate,
    }
}

fn runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let d = data();
        SEEDS
            .iter()
            .map(|&seed| {
                let t0 = Instant::now();
                let (vae, _) = pretrain(&d.env, &d.train, &d.valid, &LatentConfig::default(), &PretrainSchedule::default(), seed).unwrap();
                let recon = vae.reconstruction_accuracy(d.env.actions(), &d.test).unwrap();
                let sl = SlPolicy::new(vae.clone(), &d.env);
                let plas = plas_train(&d.env, &d.train, &d.valid, &vae, &PlasConfig::default(), seed).unwrap().policy;
                let (reinforce, _) = reinforce_train(&d.env, &d.train, &d.valid, &vae, &ReinforceConfig::default(), seed).unwrap();
                let run = SeedRun {
                    seed,
                    recon,
                    sl: scores(&sl),
                    plas: scores(&plas),
                    reinforce: scores(&reinforce),
                    plas_policy: plas,
                    reinforce_policy: reinforce,
                };
                eprintln!(
                    "  seed {seed}: recon {:.3}; oracle/pseudo sl {:.3}/{:.3} plas {:.3}/{:.3} reinforce {:.3}/{:.3} ({:.0}s)",
                    run.recon,
                    run.sl.oracle,
                    run.sl.pseudo,
                    run.plas.oracle,
                    run.plas.pseudo,
                    run.reinforce.oracle,
                    run.reinforce.pseudo,
                    t0.elapsed().as_secs_f64()
                );
                run
            })
            .collect()
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 4, 5

struct Suite {
    names: Vec<String>,
    critic: Vec<f64>,
    pseudo: Vec<f64>,
    oracle: Vec<f64>,
    critic_spearman: f64,
    pseudo_spearman: f64,
}

fn suite() -> &'static Result<Suite, String> {
    static SUITE: OnceLock<Result<Suite, String>> = OnceLock::new();
    SUITE.get_or_init(|| {
        let d = data();
        let run = &runs()[0];
        let oracle = ScriptedOracle::new(&d.env);
        let eps = EpsilonOracle::new(&d.env, 0.3).unwrap();
        let random = EpsilonOracle::uniform(&d.env);
        let eager = EagerProvider::new(&d.env);
        let policies: [&dyn Policy; 6] = [&oracle, &eps, &run.plas_policy, &run.reinforce_policy, &random, &eager];
        let codec = ActCodec::Tokens(d.env.actions().clone());
        let cmp = compare_policies(&d.env, &policies, &d.train, &d.test, &codec, &EvalConfig::default()).map_err(|e| e.to_string())?;
        let spearman = |metric: &str| {
            cmp.correlations
                .iter()
                .find(|r| r.metric == metric)
                .and_then(|r| r.spearman)
                .ok_or_else(|| format!("no {metric} correlation"))
        };
        Ok(Suite {
            names: cmp.reports.iter().map(|r| r.policy.clone()).collect(),
            critic: cmp.reports.iter().map(|r| r.critic.as_ref().unwrap().estimate.mean).collect(),
            pseudo: cmp.reports.iter().map(|r| r.pseudo.unwrap().success_rate).collect(),
            oracle: cmp.reports.iter().map(|r| r.oracle.unwrap().success.mean).collect(),
            critic_spearman: spearman("critic")?,
            pseudo_spearman: spearman("pseudo_success")?,
        })
    })
}

fn ranking() -> Outcome {
    let s = suite().as_ref().map_err(Clone::clone)?;
    let rows: Vec<String> = (0..s.names.len())
        .map(|i| format!("{} {:.3}/{:.3}/{:.3}", s.names[i], s.critic[i], s.pseudo[i], s.oracle[i]))
        .collect();
    let detail = format!(
        "spearman critic {:.3} vs pseudo {:.3}; critic/pseudo/oracle: {}",
        s.critic_spearman,
        s.pseudo_spearman,
        rows.join(", ")
    );
    if s.names.len() >= 5 && s.critic_spearman >= 0.9 && s.critic_spearman > s.pseudo_spearman {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mismatch() -> Outcome {
    let s = suite().as_ref().map_err(Clone::clone)?;
    let at = |name: &str| s.names.iter().position(|n| n == name).ok_or_else(|| format!("{name} missing from the suite"));
    let (e, p) = (at("eager")?, at("plas")?);
    let detail = format!(
        "eager pseudo {:.3} oracle {:.3} critic {:.3}; plas critic {:.3}",
        s.pseudo[e], s.oracle[e], s.critic[e], s.critic[p]
    );
    if s.pseudo[e] >= 0.9 && s.oracle[e] <= 0.5 && s.critic[e] < s.critic[p] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 6, 7, 9

fn improvement() -> Outcome {
    let r = runs();
    let sl = mean(r.iter().map(|x| x.sl.oracle));
    let plas = mean(r.iter().map(|x| x.plas.oracle));
    let per: Vec<String> = r.iter().map(|x| format!("seed {} {:.3} vs {:.3}", x.seed, x.plas.oracle, x.sl.oracle)).collect();
    let detail = format!("mean oracle success plas {plas:.3} vs sl {sl:.3} (need +0.050, got {:+.3}); {}", plas - sl, per.join(", "));
    if plas - sl >= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaming() -> Outcome {
    let r = runs();
    let rf = mean(r.iter().map(|x| x.reinforce.gap()));
    let plas = mean(r.iter().map(|x| x.plas.gap()));
    let detail = format!("mean pseudo - oracle gap reinforce {rf:+.3} vs plas {plas:+.3}");
    if rf > plas {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reconstruction() -> Outcome {
    let r = runs();
    let per: Vec<String> = r.iter().map(|x| format!("seed {} {:.4}", x.seed, x.recon)).collect();
    let detail = format!("held-out reconstruction accuracy {}", per.join(", "));
    if r.iter().all(|x| x.recon >= 0.95) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 8

fn proptest_run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn clamp_property() -> Result<(), String> {
    let env = env();
    let pol = EpsilonOracle::new(&env, 0.5).unwrap();
    proptest_run(24, (0u64..1000, 0.05f64..3.0, 0.5f64..20.0), |(seed, sigma, scale)| {
        let corpus = generate_corpus(&env, &pol, 2, seed, Split::Train).unwrap();
        let mut vae = Vae::new(tiny_latent(), &env, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (_, t) in vae.params.theta.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let actor = Actor::from_vae(&vae, sigma).unwrap();
        for e in &corpus.episodes {
            for t in 0..e.len() {
                let z = actor.act_latent(&e.context(t).features(&env)).unwrap();
                prop_assert!(z.iter().all(|x| x.abs() <= sigma));
            }
        }
        Ok(())
    })
}

fn pessimism_property() -> Result<(), String> {
    let t = tiny(3);
    proptest_run(48, (0u64..10_000, 1usize..8), |(seed, passes)| {
        let b = &t.batch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = t.critic.draw_masks(b.len(), passes, &mut rng).unwrap();
        let pess = t.critic.q_values(&t.critic.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &masks).unwrap();
        let each: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| t.critic.q_values(&t.critic.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, std::slice::from_ref(m)).unwrap())
            .collect();
        for i in 0..b.len() {
            let mean = each.iter().map(|v| v[i]).sum::<f64>() / passes as f64;
            prop_assert!(pess[i] <= mean + 1e-12);
            prop_assert!(pess[i] > 0.0 && pess[i] < 1.0);
        }
        Ok(())
    })
}

fn sparse_reward_property() -> Result<(), String> {
    let env = env();
    proptest_run(64, (0u64..100_000, 0.0f64..=1.0), |(seed, eps)| {
        let pol = EpsilonOracle::new(&env, eps).unwrap();
        let corpus = generate_corpus(&env, &pol, 1, seed, Split::Train).unwrap();
        let e = &corpus.episodes[0];
        let mut st = env.reset(e.goal.clone()).unwrap();
        for (t, &a) in e.acts.iter().enumerate() {
            let (next, r, done) = env.step(&st, a).unwrap();
            if t + 1 < e.len() {
                prop_assert!(r == 0.0 && !done);
            } else {
                prop_assert!(done && (r == 0.0 || r == 1.0));
            }
            st = next;
        }
        Ok(())
    })
}

fn round_trip_property() -> Result<(), String> {
    let env = env();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    proptest_run(16, (0u64..100_000, 0.0f64..=1.0), |(seed, eps)| {
        let pol = EpsilonOracle::new(&env, eps).unwrap();
        let corpus = generate_corpus(&env, &pol, 3, seed, Split::Test).unwrap();
        let path = dir.path().join("c.jsonl");
        corpus.save(&path, env.ontology()).unwrap();
        prop_assert_eq!(&Corpus::load(&path, &env).unwrap(), &corpus);
        let params: ParameterSet = Vae::new(tiny_latent(), &env, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().params.merged().unwrap();
        let p = dir.path().join("p.params");
        params.save(&p).unwrap();
        prop_assert_eq!(&ParameterSet::load(&p).unwrap(), &params);
        Ok(())
    })
}

const SMALL_CONFIG: &str = "\
[corpus]
train = 40
valid = 12
test = 12
[latent]
latent_dim = 6
hidden = 8
embed = 6
[pretrain]
warmup_steps = 10
joint_steps = 10
[plas]
episodes = 48
eval_every = 1
valid_rollouts = 10
[reinforce]
episodes = 48
eval_every = 1
valid_rollouts = 10
[eval]
rollouts = 40
[eval.fqe]
episodes = 48
";

fn dialcrit(args: &[&str], cwd: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dialcrit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("dialcrit {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs the whole pipeline in `dir` and returns every written byte plus
/// each command's standard output.
fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::write(dir.join("run.toml"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    let c = ["--config", "run.toml"];
    let steps: [Vec<&str>; 7] = [
        [&["gen-corpus"][..], &c, &["--out", "corpus"]].concat(),
        [&["pretrain"][..], &c, &["--corpus", "corpus", "--out", "sl"]].concat(),
        [&["train-plas"][..], &c, &["--corpus", "corpus", "--pretrained", "sl", "--out", "plas"]].concat(),
        [&["train-reinforce"][..], &c, &["--corpus", "corpus", "--pretrained", "sl", "--out", "rf"]].concat(),
        [&["evaluate"][..], &c, &["--corpus", "corpus", "--policy", "plas:plas", "--out", "eval.json"]].concat(),
        [
            &["compare"][..],
            &c,
            &["--corpus", "corpus", "--policies", "oracle,eager,random,sl:sl,plas:plas,reinforce:rf", "--report", "cmp"],
        ]
        .concat(),
        vec!["report", "--report", "cmp"],
    ];
    let mut outputs = Vec::new();
    for args in &steps {
        outputs.push((format!("stdout of {}", args[0]), dialcrit(args, dir)?));
    }
    outputs.extend(files_under(dir));
    Ok(outputs)
}

fn cli_determinism() -> Result<(), String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (x, y) = (pipeline(a.path())?, pipeline(b.path())?);
    if x.len() != y.len() {
        return Err(format!("reruns wrote {} vs {} files", x.len(), y.len()));
    }
    for ((n1, b1), (n2, b2)) in x.iter().zip(&y) {
        if n1 != n2 || b1 != b2 {
            return Err(format!("rerun differs in {n1}"));
        }
    }
    Ok(())
}

fn invariants() -> Outcome {
    let checks: [(&str, fn() -> Result<(), String>); 5] = [
        ("clamp", clamp_property),
        ("pessimism", pessimism_property),
        ("sparse reward", sparse_reward_property),
        ("round trip", round_trip_property),
        ("cli reruns", cli_determinism),
    ];
    let mut failed = Vec::new();
    for (name, f) in checks {
        if let Err(e) = f() {
            failed.push(format!("{name}: {e}"));
        }
    }
    if failed.is_empty() {
        Ok("clamp, pessimism, sparse reward, round trip and byte-identical CLI reruns hold".into())
    } else {
        Err(failed.join("; "))
    }
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient checks", gradients),
        (2, "toy DP equivalence", toy_fqe),
        (3, "FQE on-policy consistency", fqe_consistency),
        (9, "VAE reconstruction", reconstruction),
        (6, "offline RL improvement", improvement),
        (7, "metric gaming", gaming),
        (4, "ranking fidelity", ranking),
        (5, "context mismatch", mismatch),
        (8, "invariants", invariants),
    ];
    let mut results = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} ({name}): {tag} [{secs:.0}s] {detail}");
        results.push((n, outcome.is_ok()));
    }
    results.sort();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
