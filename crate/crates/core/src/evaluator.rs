//! Policy evaluation without user interaction: fitted-Q evaluation from a
//! static corpus, corpus-based pseudo-dialogue metrics, Monte-Carlo rollouts
//! in the simulator, and correlation between metrics.

use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{episode_stream, rollout, Corpus, Episode};
use crate::critic::{dialogue_batch, ActCodec, ActionInputs, Critic, CriticConfig, TransitionBatch};
use crate::dialenv::{encode_goal, goal_dim, Env, Slot, SystemAct};
use crate::error::{Error, Result};
use crate::latent::corpus_features;
use crate::numerics::{OptimizerState, PaddedBatch};
use crate::policy::{DialogueContext, Policy};

/// z for a two-sided 95% normal interval.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FqeConfig {
    pub critic: CriticConfig,
    /// Sampled training episodes; no early stopping.
    pub episodes: usize,
    /// Whole episodes per gradient step.
    pub batch_episodes: usize,
}

impl Default for FqeConfig {
    fn default() -> Self {
        FqeConfig {
            critic: CriticConfig {
                gamma: 1.0,
                lambda: 0.0,
                passes: 1,
                lr: 1e-3,
                tau: 0.02,
                ..CriticConfig::default()
            },
            episodes: 20000,
            batch_episodes: 16,
        }
    }
}

impl FqeConfig {
    pub fn validate(&self) -> Result<()> {
        self.critic.validate()?;
        if self.episodes == 0 || self.batch_episodes == 0 {
            return Err(Error::Config("FQE needs a positive episode budget and batch size".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.episodes.div_ceil(self.batch_episodes)
    }
}

/// Runs `steps` critic updates on batches drawn by `sample`, which returns
/// the transitions and the evaluated policy's next actions. Returns the
/// per-step losses.
pub fn fit_q<F>(critic: &mut Critic, steps: usize, rng: &mut ChaCha8Rng, mut sample: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<(TransitionBatch, ActionInputs)>,
{
    let mut opt = OptimizerState::new(&critic.params, critic.cfg.lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (batch, next) = sample(rng)?;
        losses.push(critic.train_step(&batch, &next, None, &mut opt, rng)?);
    }
    Ok(losses)
}

/// Acts of `policy` at every non-initial corpus context, with the corpus act
/// standing in after the last turn (terminal transitions ignore it).
fn next_actions(policy: &dyn Policy, episode: &Episode, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    (0..episode.len())
        .map(|t| {
            if t + 1 < episode.len() {
                policy.act(&episode.context(t + 1), rng)
            } else {
                Ok(episode.acts[t])
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FqeRun {
    pub critic: Critic,
    pub losses: Vec<f64>,
}

/// Fitted-Q evaluation of `policy` on `corpus`. Contexts always carry the
/// corpus actions; bootstrapped values use the action `policy` chooses in
/// the next corpus context. Deterministic policies are queried once per
/// context, stochastic ones afresh for every sampled episode.
pub fn fqe_train(env: &Env, corpus: &Corpus, policy: &dyn Policy, codec: &ActCodec, cfg: &FqeConfig, seed: u64) -> Result<FqeRun> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ont = env.ontology();
    let mut critic = Critic::new(cfg.critic.clone(), codec.encoding(), env.turn_dim(), goal_dim(ont), &mut rng)?;
    let feats = corpus_features(env, corpus);
    let cached: Option<Vec<Vec<usize>>> = if policy.is_deterministic() {
        Some(
            corpus
                .episodes
                .iter()
                .map(|e| next_actions(policy, e, &mut rng))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let losses = fit_q(&mut critic, cfg.steps(), &mut rng, |rng| {
        let idx: Vec<usize> = (0..cfg.batch_episodes).map(|_| rng.random_range(0..corpus.len())).collect();
        let eps: Vec<&Episode> = idx.iter().map(|&i| &corpus.episodes[i]).collect();
        let fs: Vec<&[Vec<f64>]> = idx.iter().map(|&i| feats[i].as_slice()).collect();
        let batch = dialogue_batch(env, &eps, &fs, codec)?;
        let mut next = Vec::with_capacity(batch.len());
        for &i in &idx {
            match &cached {
                Some(c) => next.extend_from_slice(&c[i]),
                None => next.extend(next_actions(policy, &corpus.episodes[i], rng)?),
            }
        }
        Ok((batch, codec.encode(&next)?))
    })?;
    Ok(FqeRun { critic, losses })
}

/// Mean critic value over initial contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Minimum over the configured dropout passes.
    pub pessimistic: f64,
    /// Dropout off.
    pub plain: f64,
}

/// Average value of every episode's initial context (after the first user
/// turn) paired with the action `policy` takes there.
pub fn estimate_value(
    critic: &Critic,
    env: &Env,
    corpus: &Corpus,
    policy: &dyn Policy,
    codec: &ActCodec,
    rng: &mut ChaCha8Rng,
) -> Result<ValueEstimate> {
    if corpus.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let firsts: Vec<Vec<Vec<f64>>> = corpus.episodes.iter().map(|e| e.context(0).features(env)).collect();
    let refs: Vec<&[Vec<f64>]> = firsts.iter().map(Vec::as_slice).collect();
    let contexts = PaddedBatch::new(&refs)?;
    let goals: Vec<Vec<f64>> = corpus.episodes.iter().map(|e| encode_goal(env.ontology(), &e.goal)).collect();
    let mut acts = Vec::with_capacity(corpus.len());
    for e in &corpus.episodes {
        acts.push(policy.act(&e.context(0), rng)?);
    }
    let actions = codec.encode(&acts)?;
    let seq: Vec<usize> = (0..corpus.len()).collect();
    let picks: Vec<usize> = seq.iter().map(|&i| contexts.row(i, 0)).collect();
    let pess = critic.pessimistic_q(&critic.params, &contexts, &goals, &picks, &seq, &actions, critic.cfg.passes, rng)?;
    let plain = critic.q_values(&critic.params, &contexts, &goals, &picks, &seq, &actions, &[])?;
    Ok(ValueEstimate {
        pessimistic: mean(&pess),
        plain: mean(&plain),
    })
}

/// The policy's system turns against the corpus user turns of `episode`.
/// Each decision sees the corpus observations and the policy's own earlier
/// acts, never the corpus acts.
pub fn pseudo_dialogue(env: &Env, policy: &dyn Policy, episode: &Episode, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    let mut acts = Vec::with_capacity(episode.len());
    for t in 0..episode.len() {
        let ctx = DialogueContext::new(&episode.goal, &episode.observations[..=t], &acts)?;
        let a = policy.act(&ctx, rng)?;
        env.actions().act(a)?;
        acts.push(a);
    }
    Ok(acts)
}

/// `(match, success)` of a system-act sequence against `episode`'s goal. A
/// goal constraint counts as mentioned when some act names its slot or
/// presents an entity of its domain (an offer or a provide); success further
/// needs every requested slot provided.
pub fn pseudo_outcome(env: &Env, episode: &Episode, acts: &[usize]) -> Result<(bool, bool)> {
    let parsed: Vec<SystemAct> = acts.iter().map(|&a| env.actions().act(a)).collect::<Result<_>>()?;
    let mentions = |d: usize, s: usize| {
        parsed.iter().any(|a| match *a {
            SystemAct::Offer { domain } | SystemAct::Provide { domain, .. } => domain == d,
            SystemAct::Request { domain, slot } | SystemAct::Confirm { domain, slot } | SystemAct::Inform { domain, slot } => {
                domain == d && slot == s
            }
            SystemAct::Bye | SystemAct::Fallback => false,
        })
    };
    let provided = |d: usize, r: usize| {
        parsed.contains(&SystemAct::Provide {
            domain: d,
            slot: Slot::Requestable(r),
        })
    };
    let goal = &episode.goal;
    let matched = goal
        .domains
        .iter()
        .all(|g| g.constraints.iter().all(|&(s, _)| mentions(g.domain, s)));
    let served = goal.domains.iter().all(|g| g.requests.iter().all(|&r| provided(g.domain, r)));
    Ok((matched, matched && served))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoMetrics {
    pub episodes: usize,
    pub match_rate: f64,
    pub success_rate: f64,
}

/// Corpus-based match and success rates. Episode `i` draws the policy's
/// randomness from stream `i` of `seed`.
pub fn pseudo_dialogue_success(env: &Env, policy: &dyn Policy, corpus: &Corpus, seed: u64) -> Result<PseudoMetrics> {
    if corpus.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let (mut m, mut s) = (0usize, 0usize);
    for (i, e) in corpus.episodes.iter().enumerate() {
        let acts = pseudo_dialogue(env, policy, e, &mut episode_stream(seed, i as u64))?;
        let (matched, success) = pseudo_outcome(env, e, &acts)?;
        m += matched as usize;
        s += success as usize;
    }
    let n = corpus.len() as f64;
    Ok(PseudoMetrics {
        episodes: corpus.len(),
        match_rate: m as f64 / n,
        success_rate: s as f64 / n,
    })
}

/// A point estimate with the half-width of its 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        (x - self.mean).abs() <= self.half_width
    }

    /// Normal-approximation interval for a proportion.
    pub fn binomial(successes: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("binomial sample"));
        }
        let p = successes as f64 / n as f64;
        Ok(Interval {
            mean: p,
            half_width: Z95 * (p * (1.0 - p) / n as f64).sqrt(),
        })
    }

    /// Normal-approximation interval for a sample mean.
    pub fn normal(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("sample"));
        }
        let m = mean(xs);
        Ok(Interval {
            mean: m,
            half_width: Z95 * (sample_variance(xs) / xs.len() as f64).sqrt(),
        })
    }

    /// Student-t interval for the mean of a few repeated runs.
    pub fn student_t(xs: &[f64]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::invalid("a t-interval needs at least two values"));
        }
        let n = xs.len() as f64;
        let t = StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| Error::invalid(e.to_string()))?
            .inverse_cdf(0.975);
        Ok(Interval {
            mean: mean(xs),
            half_width: t * (sample_variance(xs) / n).sqrt(),
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub dialogues: usize,
    pub success: Interval,
    pub complete: Interval,
    pub turns: Interval,
}

/// Success, completion and length of `n` fresh simulated dialogues. Dialogue
/// `i` samples its goal and the policy's randomness from stream `i` of
/// `seed`, so results do not depend on `workers`.
pub fn monte_carlo_eval(env: &Env, policy: &dyn Policy, n: usize, seed: u64, workers: usize) -> Result<OracleMetrics> {
    if n == 0 {
        return Err(Error::Empty("rollouts"));
    }
    let one = |i: usize| -> Result<(bool, bool, usize)> {
        let mut rng = episode_stream(seed, i as u64);
        let goal = env.sample_goal(&mut rng)?;
        let e = rollout(env, policy, goal, &mut rng)?;
        Ok((e.success(), e.complete, e.len()))
    };
    let workers = workers.clamp(1, n);
    let outcomes: Vec<(bool, bool, usize)> = if workers == 1 {
        (0..n).map(one).collect::<Result<_>>()?
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let one = &one;
                    s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(one).collect::<Result<Vec<_>>>())
                })
                .collect();
            let mut all = Vec::with_capacity(n);
            for h in handles {
                all.extend(h.join().map_err(|_| Error::invalid("rollout worker panicked"))??);
            }
            Ok::<_, Error>(all)
        })?
    };
    let turns: Vec<f64> = outcomes.iter().map(|o| o.2 as f64).collect();
    Ok(OracleMetrics {
        dialogues: n,
        success: Interval::binomial(outcomes.iter().filter(|o| o.0).count(), n)?,
        complete: Interval::binomial(outcomes.iter().filter(|o| o.1).count(), n)?,
        turns: Interval::normal(&turns)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks from 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson and Spearman coefficients between per-policy metric values.
pub fn correlate(metric: &[f64], reference: &[f64]) -> Result<Correlation> {
    if metric.len() != reference.len() {
        return Err(Error::shape("correlate", &[metric.len()], &[reference.len()]));
    }
    if metric.len() < 3 {
        return Err(Error::UndefinedCorrelation("fewer than three values"));
    }
    if metric.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite value"));
    }
    Ok(Correlation {
        pearson: pearson(metric, reference)?,
        spearman: pearson(&ranks(metric), &ranks(reference))?,
    })
}

/// Critic estimates over several FQE seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticEstimate {
    pub seeds: Vec<u64>,
    pub pessimistic: Vec<f64>,
    pub plain: Vec<f64>,
    pub estimate: Interval,
    pub plain_estimate: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy: String,
    pub critic: Option<CriticEstimate>,
    pub pseudo: Option<PseudoMetrics>,
    pub oracle: Option<OracleMetrics>,
    pub train_hash: String,
    pub test_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fqe: FqeConfig,
    pub critic_seeds: Vec<u64>,
    pub rollouts: usize,
    pub rollout_seed: u64,
    pub pseudo_seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fqe: FqeConfig::default(),
            critic_seeds: vec![0, 1, 2],
            rollouts: 1000,
            rollout_seed: 7,
            pseudo_seed: 11,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.fqe.validate()?;
        if self.critic_seeds.len() < 3 {
            return Err(Error::Config("critic estimates need at least three seeds".into()));
        }
        if self.rollouts == 0 || self.workers == 0 {
            return Err(Error::Config("rollouts and workers must be positive".into()));
        }
        Ok(())
    }
}

/// Which metrics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modes {
    pub fqe: bool,
    pub pseudo: bool,
    pub oracle: bool,
}

impl Modes {
    pub const ALL: Modes = Modes {
        fqe: true,
        pseudo: true,
        oracle: true,
    };
}

/// Critic estimate over the configured seeds: FQE on `train`, values on
/// the initial contexts of `test`.
pub fn critic_estimate(
    env: &Env,
    policy: &dyn Policy,
    train: &Corpus,
    test: &Corpus,
    codec: &ActCodec,
    cfg: &EvalConfig,
) -> Result<CriticEstimate> {
    let mut pessimistic = Vec::new();
    let mut plain = Vec::new();
    for &seed in &cfg.critic_seeds {
        let run = fqe_train(env, train, policy, codec, &cfg.fqe, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let v = estimate_value(&run.critic, env, test, policy, codec, &mut rng)?;
        pessimistic.push(v.pessimistic);
        plain.push(v.plain);
    }
    Ok(CriticEstimate {
        seeds: cfg.critic_seeds.clone(),
        estimate: Interval::student_t(&pessimistic)?,
        plain_estimate: Interval::student_t(&plain)?,
        pessimistic,
        plain,
    })
}

pub fn evaluate_policy(
    env: &Env,
    policy: &dyn Policy,
    train: &Corpus,
    test: &Corpus,
    codec: &ActCodec,
    cfg: &EvalConfig,
    modes: Modes,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    let ont = env.ontology();
    Ok(EvaluationReport {
        policy: policy.name().to_string(),
        critic: modes.fqe.then(|| critic_estimate(env, policy, train, test, codec, cfg)).transpose()?,
        pseudo: modes.pseudo.then(|| pseudo_dialogue_success(env, policy, test, cfg.pseudo_seed)).transpose()?,
        oracle: modes
            .oracle
            .then(|| monte_carlo_eval(env, policy, cfg.rollouts, cfg.rollout_seed, cfg.workers))
            .transpose()?,
        train_hash: train.content_hash(ont)?,
        test_hash: test.content_hash(ont)?,
    })
}

/// Correlation of one metric with oracle success across policies; `None`
/// when undefined (for instance a metric constant over the suite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvaluationReport>,
    pub correlations: Vec<CorrelationRow>,
}

pub fn compare_policies(
    env: &Env,
    policies: &[&dyn Policy],
    train: &Corpus,
    test: &Corpus,
    codec: &ActCodec,
    cfg: &EvalConfig,
) -> Result<Comparison> {
    if policies.len() < 3 {
        return Err(Error::invalid(format!("comparison needs at least 3 policies, got {}", policies.len())));
    }
    let reports = policies
        .iter()
        .map(|p| evaluate_policy(env, *p, train, test, codec, cfg, Modes::ALL))
        .collect::<Result<Vec<_>>>()?;
    let correlations = correlation_table(&reports);
    Ok(Comparison { reports, correlations })
}

/// Each metric against oracle success; reports missing a metric are skipped.
pub fn correlation_table(reports: &[EvaluationReport]) -> Vec<CorrelationRow> {
    type Pick = fn(&EvaluationReport) -> Option<f64>;
    let metrics: [(&str, Pick); 4] = [
        ("critic", |r| r.critic.as_ref().map(|c| c.estimate.mean)),
        ("critic_plain", |r| r.critic.as_ref().map(|c| c.plain_estimate.mean)),
        ("pseudo_match", |r| r.pseudo.map(|p| p.match_rate)),
        ("pseudo_success", |r| r.pseudo.map(|p| p.success_rate)),
    ];
    metrics
        .iter()
        .map(|(name, pick)| {
            let pairs: Vec<(f64, f64)> = reports
                .iter()
                .filter_map(|r| Some((pick(r)?, r.oracle?.success.mean)))
                .collect();
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let c = correlate(&x, &y).ok();
            CorrelationRow {
                metric: name.to_string(),
                pearson: c.map(|c| c.pearson),
                spearman: c.map(|c| c.spearman),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl Comparison {
    /// The correlation table as comma-separated values.
    pub fn correlations_csv(&self) -> String {
        let mut out = String::from("metric,reference,pearson,spearman\n");
        for r in &self.correlations {
            let _ = writeln!(out, "{},oracle_success,{},{}", r.metric, cell(r.pearson), cell(r.spearman));
        }
        out
    }

    /// Plain-text summary of every report and the correlations.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>16} {:>8} {:>8} {:>8} {:>8} {:>7}",
            "policy", "critic", "p.match", "p.succ", "success", "complete", "turns"
        );
        for r in &self.reports {
            let critic = r.critic.as_ref().map_or_else(
                || "NA".to_string(),
                |c| format!("{:.3}+-{:.3}", c.estimate.mean, c.estimate.half_width),
            );
            let _ = writeln!(
                out,
                "{:<12} {:>16} {:>8} {:>8} {:>8} {:>8} {:>7}",
                r.policy,
                critic,
                cell(r.pseudo.map(|p| p.match_rate)),
                cell(r.pseudo.map(|p| p.success_rate)),
                cell(r.oracle.map(|o| o.success.mean)),
                cell(r.oracle.map(|o| o.complete.mean)),
                r.oracle.map_or_else(|| "NA".to_string(), |o| format!("{:.2}", o.turns.mean)),
            );
        }
        let _ = writeln!(out, "\n{:<16} {:>8} {:>8}", "vs oracle", "pearson", "spearman");
        for c in &self.correlations {
            let _ = writeln!(out, "{:<16} {:>8} {:>8}", c.metric, cell(c.pearson), cell(c.spearman));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_reversed() {
        let x = [0.1, 0.5, 0.2, 0.9];
        let c = correlate(&x, &x).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v * v).collect();
        assert!((correlate(&x, &y).unwrap().spearman + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_is_undefined() {
        let err = correlate(&[0.3, 0.3, 0.3], &[0.1, 0.2, 0.3]).unwrap_err();
        assert!(matches!(err, Error::UndefinedCorrelation(_)));
        assert!(correlate(&[0.1, 0.2], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn tied_ranks_average() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_hand_computed() {
        // ranks (1,2,3,4,5) vs (2,1,4,3,5): d^2 sum 4, rho = 1 - 6*4/(5*24) = 0.8
        let c = correlate(&[1.0, 2.0, 3.0, 4.0, 5.0], &[20.0, 10.0, 40.0, 30.0, 50.0]).unwrap();
        assert!((c.spearman - 0.8).abs() < 1e-12);
    }

    #[test]
    fn binomial_half_width_at_one_thousand() {
        let ci = Interval::binomial(500, 1000).unwrap();
        assert!(ci.half_width <= 0.031, "{}", ci.half_width);
        assert!((ci.half_width - 0.030990).abs() < 1e-5);
    }

    #[test]
    fn t_interval_three_values() {
        // mean 2, s = 1, t(0.975, 2) = 4.302653
        let ci = Interval::student_t(&[1.0, 2.0, 3.0]).unwrap();
        assert!((ci.mean - 2.0).abs() < 1e-12);
        assert!((ci.half_width - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
    }
}
