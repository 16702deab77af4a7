//! Offline policy optimization in the latent action space (a clamped
//! deterministic actor trained against the critic with a behavior MSE term),
//! and a REINFORCE baseline rewarded with corpus-based success.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Episode};
use crate::critic::{dialogue_batch, ActCodec, ActionEncoding, ActionInputs, Critic, CriticConfig, Dropout, TransitionBatch};
use crate::dialenv::{goal_dim, Env};
use crate::error::{Error, Result};
use crate::evaluator::{monte_carlo_eval, pseudo_dialogue_success, pseudo_outcome};
use crate::latent::{corpus_features, parse_or_fallback, SlPolicy, StateEncoder, Vae};
use crate::numerics::{Bound, Graph, Gru, Linear, OptimizerState, PaddedBatch, ParameterSet, Var};
use crate::policy::{ActionForm, DialogueContext, Policy};

/// Metric used to pick the returned checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Pseudo-dialogue success on the validation split.
    Pseudo,
    /// Simulated success over `valid_rollouts` dialogues.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlasConfig {
    pub actor_lr: f64,
    pub critic: CriticConfig,
    /// Weight of the squared distance to the corpus action's latent.
    pub mse_weight: f64,
    /// Sampled training episodes.
    pub episodes: usize,
    pub batch_episodes: usize,
    /// Clamp bound of every latent dimension.
    pub sigma: f64,
    pub selection: Selection,
    /// Gradient steps between validation checkpoints.
    pub eval_every: usize,
    pub valid_rollouts: usize,
}

impl Default for PlasConfig {
    fn default() -> Self {
        PlasConfig {
            actor_lr: 0.005,
            critic: CriticConfig {
                lr: 1e-3,
                tau: 0.02,
                passes: 1,
                ..CriticConfig::default()
            },
            mse_weight: 1.0,
            episodes: 10000,
            batch_episodes: 16,
            sigma: 2.0,
            selection: Selection::Pseudo,
            eval_every: 50,
            valid_rollouts: 300,
        }
    }
}

impl PlasConfig {
    pub fn validate(&self) -> Result<()> {
        self.critic.validate()?;
        if !(self.actor_lr > 0.0) || !(self.sigma > 0.0) || !(self.mse_weight >= 0.0) {
            return Err(Error::Config("actor lr and sigma must be positive, MSE weight non-negative".into()));
        }
        if self.episodes == 0 || self.batch_episodes == 0 || self.eval_every == 0 || self.valid_rollouts == 0 {
            return Err(Error::Config("episode budget, batch size, evaluation interval and rollouts must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic latent policy: a recurrent context encoder whose output is
/// clamped to `[-sigma, sigma]` in every dimension. Starts from the state
/// encoder of a pretrained latent model.
#[derive(Debug, Clone)]
pub struct Actor {
    pub sigma: f64,
    pub latent_dim: usize,
    pub params: ParameterSet,
    pub target: ParameterSet,
    gru: Gru,
    mu: Linear,
}

impl Actor {
    pub fn from_vae(vae: &Vae, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        let (h, l) = (vae.cfg.hidden, vae.cfg.latent_dim);
        let gru = Gru::new("actor.gru", vae.turn_dim, h);
        let mu = Linear::new("actor.mu", h, l);
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        gru.init(&mut params, &mut rng)?;
        mu.init(&mut params, &mut rng)?;
        let copied = params.copy_matching(&vae.params.theta, |n| n.replacen("actor.", "state.", 1));
        if copied != params.len() {
            return Err(Error::ParameterMismatch("state encoder does not match the actor layout".into()));
        }
        Ok(Actor {
            sigma,
            latent_dim: l,
            target: params.clone(),
            params,
            gru,
            mu,
        })
    }

    /// Clamped latent actions at the picked rows of `contexts`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, contexts: &PaddedBatch, picks: &[usize]) -> Result<Var> {
        let z = self.pre_clamp(g, p, contexts, picks)?;
        Ok(g.clamp(z, -self.sigma, self.sigma))
    }

    fn pre_clamp(&self, g: &mut Graph, p: &Bound, contexts: &PaddedBatch, picks: &[usize]) -> Result<Var> {
        let xs = contexts.leaf(g)?;
        let h0 = g.zeros(contexts.batch, self.gru.hidden);
        let hs = self.gru.unroll_batch(g, p, xs, contexts.batch, h0)?;
        let h = g.gather_rows(hs, picks)?;
        self.mu.forward(g, p, h)
    }

    /// Latent actions under `params` (the online or target weights).
    pub fn latents(&self, params: &ParameterSet, contexts: &PaddedBatch, picks: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let z = self.forward(&mut g, &p, contexts, picks)?;
        Ok(g.value(z).chunks(self.latent_dim).map(<[f64]>::to_vec).collect())
    }

    /// Latent action after the last turn of `features`.
    pub fn act_latent(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let seqs = PaddedBatch::new(&[features])?;
        let pick = seqs.row(0, features.len() - 1);
        Ok(self.latents(&self.params, &seqs, &[pick])?.remove(0))
    }
}

/// Posterior means and log-variances of every system act's template.
pub fn act_latent_table(vae: &Vae, env: &Env) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let space = env.actions();
    let tokens: Vec<Vec<usize>> = (0..space.len()).map(|a| space.tokens(a).to_vec()).collect();
    let mut g = Graph::new();
    let p = vae.params.phi.bind(&mut g);
    let (mu, lv) = vae.action_moments(&mut g, &p, &tokens)?;
    let l = vae.cfg.latent_dim;
    let rows = |v: Var| g.value(v).chunks(l).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok((rows(mu), rows(lv)))
}

/// `KL(N(mu, e^logvar) || N(m, I))`, summed over dimensions.
pub fn kl_to_unit_gaussian(mu: &[f64], logvar: &[f64], m: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .zip(m)
        .map(|((&u, &lv), &c)| 0.5 * (lv.exp() + (u - c).powi(2) - 1.0 - lv))
        .sum()
}

/// `-Q(s, pi(s)) + w * MSE(pi(s), z_corpus)`, averaged over the batch. The
/// critic term is the minimum over one head pass per mask (plain forward
/// when `masks` is empty); only `p_actor` is meant to receive updates.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    g: &mut Graph,
    p_actor: &Bound,
    p_critic: &Bound,
    actor: &Actor,
    critic: &Critic,
    batch: &TransitionBatch,
    corpus_z: &[Vec<f64>],
    masks: &[Vec<f64>],
    weight: f64,
) -> Result<Var> {
    batch.validate()?;
    if corpus_z.len() != batch.len() {
        return Err(Error::shape("corpus_latents", &[batch.len()], &[corpus_z.len()]));
    }
    let z = actor.forward(g, p_actor, &batch.contexts, &batch.picks)?;
    let hs = critic.encode_contexts(g, p_critic, &batch.contexts)?;
    let ge = critic.encode_goals(g, p_critic, &batch.goals)?;
    let f = critic.features_latent(g, p_critic, hs, ge, &batch.picks, &batch.seq, z)?;
    let q = if masks.is_empty() {
        critic.head(g, p_critic, f, Dropout::Off)?
    } else {
        critic.pessimistic(g, p_critic, f, masks)?
    };
    let q_mean = g.mean(q);
    let target = g.leaf_values(batch.len(), actor.latent_dim, corpus_z.concat())?;
    let d = g.sub(z, target)?;
    let sq = g.square(d);
    let mse = g.mean(sq);
    let w = g.scale(mse, weight);
    let nq = g.neg(q_mean);
    g.add(nq, w)
}

/// One deterministic-policy-gradient step on the actor (critic frozen),
/// then a soft update of the actor's target copy. Returns the loss before
/// the step.
#[allow(clippy::too_many_arguments)]
pub fn dpg_update(
    actor: &mut Actor,
    critic: &Critic,
    batch: &TransitionBatch,
    corpus_z: &[Vec<f64>],
    weight: f64,
    opt: &mut OptimizerState,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let masks = critic.draw_masks(batch.len(), critic.cfg.passes, rng)?;
    let mut g = Graph::new();
    let pa = actor.params.bind(&mut g);
    let pc = critic.params.bind(&mut g);
    let loss = actor_loss(&mut g, &pa, &pc, actor, critic, batch, corpus_z, &masks, weight)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    actor.params.accumulate(&pa, &grads)?;
    opt.step(&mut actor.params)?;
    actor.target.soft_update(&actor.params, critic.cfg.tau)?;
    Ok(value)
}

/// Decodes the actor's latent action into a system act.
#[derive(Debug, Clone)]
pub struct PlasPolicy {
    pub actor: Actor,
    vae: Vae,
    env: Env,
    name: String,
}

impl PlasPolicy {
    pub fn new(actor: Actor, vae: Vae, env: &Env) -> Self {
        PlasPolicy {
            actor,
            vae,
            env: env.clone(),
            name: "plas".into(),
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.actor.params.save(&dir.join("actor.params"))
    }

    /// Loads actor weights saved by [`PlasPolicy::save`] on top of `vae`.
    pub fn load(dir: &Path, vae: Vae, sigma: f64, env: &Env) -> Result<Self> {
        let mut actor = Actor::from_vae(&vae, sigma)?;
        let params = ParameterSet::load(&dir.join("actor.params"))?;
        actor.params.max_abs_diff(&params)?;
        actor.target = params.clone();
        actor.params = params;
        Ok(PlasPolicy::new(actor, vae, env))
    }
}

impl Policy for PlasPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn act(&self, ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Result<usize> {
        let z = self.actor.act_latent(&ctx.features(&self.env))?;
        let tokens = self.vae.decode(&z)?;
        Ok(parse_or_fallback(self.env.actions(), &tokens))
    }

    fn latent(&self, ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Option<Result<Vec<f64>>> {
        Some(self.actor.act_latent(&ctx.features(&self.env)))
    }

    fn action_form(&self) -> ActionForm {
        ActionForm::Latent
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub episodes: usize,
    /// Mean critic loss since the previous record (zero for REINFORCE).
    pub critic_loss: f64,
    /// Mean actor (or surrogate) loss since the previous record.
    pub actor_loss: f64,
    pub valid_metric: f64,
}

/// Writes records as line-delimited JSON.
pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn selection_metric(env: &Env, policy: &dyn Policy, valid: &Corpus, selection: Selection, rollouts: usize, seed: u64) -> Result<f64> {
    match selection {
        Selection::Pseudo => Ok(pseudo_dialogue_success(env, policy, valid, seed)?.success_rate),
        Selection::Oracle => Ok(monte_carlo_eval(env, policy, rollouts, seed, 1)?.success.mean),
    }
}

fn sample_batch<'a>(
    corpus: &'a Corpus,
    feats: &'a [Vec<Vec<f64>>],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<&'a Episode>, Vec<&'a [Vec<f64>]>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..corpus.len())).collect();
    (
        idx.iter().map(|&i| &corpus.episodes[i]).collect(),
        idx.iter().map(|&i| feats[i].as_slice()).collect(),
    )
}

/// Mean KL between the next corpus action's posterior and a unit Gaussian
/// around the target actor's next latent, over non-terminal transitions.
fn next_action_kl(
    episodes: &[&Episode],
    batch: &TransitionBatch,
    next_z: &[Vec<f64>],
    table: &(Vec<Vec<f64>>, Vec<Vec<f64>>),
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut i = 0;
    for e in episodes {
        for t in 0..e.len() {
            if !batch.terminal[i] {
                let a = e.acts[t + 1];
                total += kl_to_unit_gaussian(&table.0[a], &table.1[a], &next_z[i]);
                n += 1;
            }
            i += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct PlasRun {
    /// Best checkpoint by the selection metric.
    pub policy: PlasPolicy,
    /// Critic at the end of training.
    pub critic: Critic,
    pub log: Vec<LogRecord>,
}

/// Alternating critic and actor updates over sampled corpus episodes, with
/// periodic validation.
pub fn plas_train(env: &Env, train: &Corpus, valid: &Corpus, vae: &Vae, cfg: &PlasConfig, seed: u64) -> Result<PlasRun> {
    plas_train_with(env, train, valid, vae, cfg, seed, &mut |_| Ok(()))
}

/// [`plas_train`] calling `on_best` with every new best checkpoint.
pub fn plas_train_with(
    env: &Env,
    train: &Corpus,
    valid: &Corpus,
    vae: &Vae,
    cfg: &PlasConfig,
    seed: u64,
    on_best: &mut dyn FnMut(&PlasPolicy) -> Result<()>,
) -> Result<PlasRun> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = act_latent_table(vae, env)?;
    let codec = ActCodec::Latent(table.0.clone());
    let encoding = ActionEncoding::Latent { dim: vae.cfg.latent_dim };
    let mut critic = Critic::new(cfg.critic.clone(), encoding, env.turn_dim(), goal_dim(env.ontology()), &mut rng)?;
    let mut actor = Actor::from_vae(vae, cfg.sigma)?;
    let mut opt_c = OptimizerState::new(&critic.params, cfg.critic.lr);
    let mut opt_a = OptimizerState::new(&actor.params, cfg.actor_lr);
    let feats = corpus_features(env, train);
    let steps = cfg.episodes.div_ceil(cfg.batch_episodes);
    let mut log = Vec::new();
    let mut best: Option<(f64, ParameterSet)> = None;
    let (mut c_acc, mut a_acc, mut since) = (0.0, 0.0, 0usize);
    for step in 1..=steps {
        let (eps, fs) = sample_batch(train, &feats, cfg.batch_episodes, &mut rng);
        let batch = dialogue_batch(env, &eps, &fs, &codec)?;
        let ActionInputs::Latent(corpus_z) = &batch.actions else {
            unreachable!("latent codec yields latent actions")
        };
        let next_z = actor.latents(&actor.target, &batch.contexts, &batch.next_picks)?;
        let kl = next_action_kl(&eps, &batch, &next_z, &table);
        c_acc += critic.train_step(&batch, &ActionInputs::Latent(next_z), Some(kl), &mut opt_c, &mut rng)?;
        a_acc += dpg_update(&mut actor, &critic, &batch, corpus_z, cfg.mse_weight, &mut opt_a, &mut rng)?;
        since += 1;
        if step % cfg.eval_every == 0 || step == steps {
            let snapshot = PlasPolicy::new(actor.clone(), vae.clone(), env);
            let metric = selection_metric(env, &snapshot, valid, cfg.selection, cfg.valid_rollouts, seed)?;
            log.push(LogRecord {
                step,
                episodes: step * cfg.batch_episodes,
                critic_loss: c_acc / since as f64,
                actor_loss: a_acc / since as f64,
                valid_metric: metric,
            });
            (c_acc, a_acc, since) = (0.0, 0.0, 0);
            if best.as_ref().is_none_or(|(m, _)| metric > *m) {
                on_best(&snapshot)?;
                best = Some((metric, actor.params.clone()));
            }
        }
    }
    let (_, params) = best.expect("at least one validation pass");
    actor.target = params.clone();
    actor.params = params;
    Ok(PlasRun {
        policy: PlasPolicy::new(actor, vae.clone(), env),
        critic,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinforceConfig {
    pub lr: f64,
    /// Discount applied backwards from the final turn.
    pub gamma: f64,
    pub episodes: usize,
    pub batch_episodes: usize,
    pub selection: Selection,
    pub eval_every: usize,
    pub valid_rollouts: usize,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            lr: 1e-3,
            gamma: 0.99,
            episodes: 10000,
            batch_episodes: 16,
            selection: Selection::Pseudo,
            eval_every: 50,
            valid_rollouts: 300,
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("lr must be positive and gamma in [0, 1]".into()));
        }
        if self.episodes == 0 || self.batch_episodes == 0 || self.eval_every == 0 || self.valid_rollouts == 0 {
            return Err(Error::Config("episode budget, batch size, evaluation interval and rollouts must be positive".into()));
        }
        Ok(())
    }
}

/// Pseudo-dialogues sampled from the stochastic state-latent policy.
#[derive(Debug, Clone)]
pub struct SampledDialogues {
    /// Turn features of each pseudo-dialogue (corpus observations, sampled acts).
    pub contexts: PaddedBatch,
    pub picks: Vec<usize>,
    /// Sampled latent per decision, row-aligned with `picks`.
    pub latents: Vec<Vec<f64>>,
    /// Discounted return per decision.
    pub returns: Vec<f64>,
    pub acts: Vec<Vec<usize>>,
    pub success: Vec<bool>,
}

/// Plays every episode's user turns against latents sampled from
/// `N(mu, e^logvar)` of the state encoder, decoding each into an act. The
/// reward is the pseudo-dialogue success of the whole act sequence,
/// discounted by `gamma` per turn before the end.
pub fn sample_pseudo_dialogues<R: Rng + ?Sized>(env: &Env, vae: &Vae, episodes: &[&Episode], gamma: f64, rng: &mut R) -> Result<SampledDialogues> {
    if episodes.is_empty() {
        return Err(Error::Empty("episodes"));
    }
    let l = vae.cfg.latent_dim;
    let mut acts: Vec<Vec<usize>> = vec![Vec::new(); episodes.len()];
    let mut latents: Vec<Vec<Vec<f64>>> = vec![Vec::new(); episodes.len()];
    let longest = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
    for t in 0..longest {
        let live: Vec<usize> = (0..episodes.len()).filter(|&i| t < episodes[i].len()).collect();
        let feats: Vec<Vec<Vec<f64>>> = live
            .iter()
            .map(|&i| DialogueContext::new(&episodes[i].goal, &episodes[i].observations[..=t], &acts[i]).map(|c| c.features(env)))
            .collect::<Result<_>>()?;
        let refs: Vec<&[Vec<f64>]> = feats.iter().map(Vec::as_slice).collect();
        let seqs = PaddedBatch::new(&refs)?;
        let picks: Vec<usize> = (0..live.len()).map(|k| seqs.row(k, t)).collect();
        let mut g = Graph::new();
        let p = vae.params.theta.bind(&mut g);
        let (mu, lv) = vae.state_moments(&mut g, &p, &seqs, &picks)?;
        let (mu, lv) = (g.value(mu), g.value(lv));
        let zs: Vec<Vec<f64>> = (0..live.len())
            .map(|k| {
                (0..l)
                    .map(|j| mu[k * l + j] + (0.5 * lv[k * l + j]).exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let decoded = vae.decode_batch(&zs)?;
        for ((&i, z), tokens) in live.iter().zip(zs).zip(decoded) {
            acts[i].push(parse_or_fallback(env.actions(), &tokens));
            latents[i].push(z);
        }
    }
    let mut success = Vec::with_capacity(episodes.len());
    let mut all_feats = Vec::with_capacity(episodes.len());
    for (e, a) in episodes.iter().zip(&acts) {
        success.push(pseudo_outcome(env, e, a)?.1);
        all_feats.push(DialogueContext::new(&e.goal, &e.observations[..e.len()], &a[..e.len() - 1])?.features(env));
    }
    let refs: Vec<&[Vec<f64>]> = all_feats.iter().map(Vec::as_slice).collect();
    let contexts = PaddedBatch::new(&refs)?;
    let mut out = SampledDialogues {
        picks: Vec::new(),
        latents: Vec::new(),
        returns: Vec::new(),
        contexts,
        acts,
        success,
    };
    for (i, e) in episodes.iter().enumerate() {
        let r = if out.success[i] { 1.0 } else { 0.0 };
        for t in 0..e.len() {
            out.picks.push(out.contexts.row(i, t));
            out.returns.push(r * gamma.powi((e.len() - 1 - t) as i32));
        }
        out.latents.append(&mut latents[i]);
    }
    Ok(out)
}

/// `-sum_t R_t log N(z_t; mu(c_t), e^logvar(c_t)) / episodes`, the surrogate
/// whose gradient is the REINFORCE estimate for the frozen samples.
pub fn reinforce_loss(g: &mut Graph, p: &Bound, state: &StateEncoder, batch: &SampledDialogues) -> Result<Var> {
    let n = batch.picks.len();
    if n == 0 || batch.latents.len() != n || batch.returns.len() != n {
        return Err(Error::shape("reinforce_batch", &[n], &[batch.latents.len(), batch.returns.len()]));
    }
    let l = batch.latents[0].len();
    let h = state.hidden(g, p, &batch.contexts, &batch.picks)?;
    let mu = state.mu.forward(g, p, h)?;
    let lv = state.logvar.forward(g, p, h)?;
    let z = g.leaf_values(n, l, batch.latents.concat())?;
    let d = g.sub(z, mu)?;
    let sq = g.square(d);
    let nlv = g.neg(lv);
    let prec = g.exp(nlv);
    let quad = g.mul(sq, prec)?;
    let inner = g.add(quad, lv)?;
    let per_dim = g.add_scalar(inner, (2.0 * std::f64::consts::PI).ln());
    // -log p = 0.5 * per_dim summed over dimensions
    let nll = g.sum_cols(per_dim);
    let r = g.leaf_values(n, 1, batch.returns.clone())?;
    let weighted = g.mul(nll, r)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 0.5 / batch.contexts.batch as f64))
}

/// Policy-gradient fine-tuning of the state encoder on pseudo-dialogue
/// success. The returned policy acts with the latent mean.
pub fn reinforce_train(
    env: &Env,
    train: &Corpus,
    valid: &Corpus,
    vae: &Vae,
    cfg: &ReinforceConfig,
    seed: u64,
) -> Result<(SlPolicy, Vec<LogRecord>)> {
    reinforce_train_with(env, train, valid, vae, cfg, seed, &mut |_| Ok(()))
}

/// [`reinforce_train`] calling `on_best` with every new best checkpoint.
pub fn reinforce_train_with(
    env: &Env,
    train: &Corpus,
    valid: &Corpus,
    vae: &Vae,
    cfg: &ReinforceConfig,
    seed: u64,
    on_best: &mut dyn FnMut(&SlPolicy) -> Result<()>,
) -> Result<(SlPolicy, Vec<LogRecord>)> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = vae.clone();
    let mut opt = OptimizerState::new(&model.params.theta, cfg.lr);
    let steps = cfg.episodes.div_ceil(cfg.batch_episodes);
    let mut log = Vec::new();
    let mut best: Option<(f64, ParameterSet)> = None;
    let (mut acc, mut since) = (0.0, 0usize);
    for step in 1..=steps {
        let eps: Vec<&Episode> = (0..cfg.batch_episodes)
            .map(|_| &train.episodes[rng.random_range(0..train.len())])
            .collect();
        let batch = sample_pseudo_dialogues(env, &model, &eps, cfg.gamma, &mut rng)?;
        let mut g = Graph::new();
        let p = model.params.theta.bind(&mut g);
        let loss = reinforce_loss(&mut g, &p, model.state_encoder(), &batch)?;
        acc += g.scalar(loss);
        since += 1;
        let grads = g.backward(loss)?;
        model.params.theta.accumulate(&p, &grads)?;
        opt.step(&mut model.params.theta)?;
        if step % cfg.eval_every == 0 || step == steps {
            let snapshot = SlPolicy::new(model.clone(), env).named("reinforce");
            let metric = selection_metric(env, &snapshot, valid, cfg.selection, cfg.valid_rollouts, seed)?;
            log.push(LogRecord {
                step,
                episodes: step * cfg.batch_episodes,
                critic_loss: 0.0,
                actor_loss: acc / since as f64,
                valid_metric: metric,
            });
            (acc, since) = (0.0, 0);
            if best.as_ref().is_none_or(|(m, _)| metric > *m) {
                on_best(&snapshot)?;
                best = Some((metric, model.params.theta.clone()));
            }
        }
    }
    model.params.theta = best.expect("at least one validation pass").1;
    Ok((SlPolicy::new(model, env).named("reinforce"), log))
}
