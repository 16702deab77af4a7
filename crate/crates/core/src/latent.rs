//! Latent action space: a state encoder, an action encoder and a token
//! decoder trained jointly on response generation and action reconstruction.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Episode};
use crate::dialenv::{ActionSpace, Env, SystemAct};
use crate::error::{Error, Result};
use crate::numerics::{
    gaussian_sample, kl_to_standard_normal, padded_ids, Bound, Graph, Gru, Linear, OptimizerState, PaddedBatch,
    ParameterSet, Var,
};
use crate::policy::{ActionForm, DialogueContext, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    /// KL weight of the state-conditioned branch.
    pub alpha: f64,
    /// KL weight of the action-reconstruction branch.
    pub beta: f64,
    pub max_decode_len: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            latent_dim: 200,
            hidden: 64,
            embed: 32,
            alpha: 0.1,
            beta: 0.1,
            max_decode_len: 16,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.embed == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("latent sizes must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSchedule {
    /// Steps on the action-reconstruction objective alone.
    pub warmup_steps: usize,
    /// Steps on the joint objective.
    pub joint_steps: usize,
    /// Minimum number of transitions per batch; whole episodes are drawn.
    pub batch_transitions: usize,
    pub lr: f64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            warmup_steps: 600,
            joint_steps: 1000,
            batch_transitions: 32,
            lr: 3e-3,
        }
    }
}

/// The three parameter groups: state encoder, action encoder, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub theta: ParameterSet,
    pub phi: ParameterSet,
    pub omega: ParameterSet,
}

impl VaeParams {
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut b = self.theta.bind(g);
        b.extend(self.phi.bind(g));
        b.extend(self.omega.bind(g));
        b
    }

    pub fn merged(&self) -> Result<ParameterSet> {
        ParameterSet::merged(&[&self.theta, &self.phi, &self.omega])
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(self.merged()?.content_hash())
    }
}

/// Layer layout of the state encoder; shared with the actor, which starts
/// from a copy of these weights.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    pub gru: Gru,
    pub mu: Linear,
    pub logvar: Linear,
}

impl StateEncoder {
    pub fn new(prefix: &str, turn_dim: usize, hidden: usize, latent: usize) -> Self {
        StateEncoder {
            gru: Gru::new(&format!("{prefix}.gru"), turn_dim, hidden),
            mu: Linear::new(&format!("{prefix}.mu"), hidden, latent),
            logvar: Linear::new(&format!("{prefix}.logvar"), hidden, latent),
        }
    }

    /// Hidden state after each picked `(row)` of the padded context batch.
    pub fn hidden(&self, g: &mut Graph, p: &Bound, seqs: &PaddedBatch, picks: &[usize]) -> Result<Var> {
        let xs = seqs.leaf(g)?;
        let h0 = g.zeros(seqs.batch, self.gru.hidden);
        let hs = self.gru.unroll_batch(g, p, xs, seqs.batch, h0)?;
        g.gather_rows(hs, picks)
    }
}

/// Context/action pairs for the latent objectives.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub contexts: PaddedBatch,
    /// Row of `contexts` holding each pair's decision turn.
    pub picks: Vec<usize>,
    /// Token ids of each pair's corpus action.
    pub tokens: Vec<Vec<usize>>,
}

impl LatentBatch {
    /// Every decision turn of every episode; `features[i]` are the turn
    /// features of `episodes[i]`.
    pub fn from_episodes(space: &ActionSpace, episodes: &[&Episode], features: &[&[Vec<f64>]]) -> Result<Self> {
        let seqs: Vec<&[Vec<f64>]> = features
            .iter()
            .zip(episodes)
            .map(|(f, e)| &f[..e.len()])
            .collect();
        let contexts = PaddedBatch::new(&seqs)?;
        let mut picks = Vec::new();
        let mut tokens = Vec::new();
        for (b, e) in episodes.iter().enumerate() {
            for (t, &a) in e.acts.iter().enumerate() {
                picks.push(contexts.row(b, t));
                tokens.push(space.tokens(a).to_vec());
            }
        }
        if picks.is_empty() {
            return Err(Error::Empty("latent batch"));
        }
        Ok(LatentBatch {
            contexts,
            picks,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }
}

/// Standard-normal draws for the two reparameterized samples, fixed ahead of
/// the forward pass so losses are deterministic functions of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoise {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl FrozenNoise {
    pub fn sample<R: Rng + ?Sized>(n: usize, latent: usize, rng: &mut R) -> Self {
        let mut draw = |k: usize| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        FrozenNoise {
            state: draw(n * latent),
            action: draw(n * latent),
        }
    }
}

/// The latent action model.
#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: LatentConfig,
    pub turn_dim: usize,
    pub vocab_size: usize,
    pub params: VaeParams,
    bos: usize,
    eos: usize,
    state: StateEncoder,
    act_embed: String,
    act_gru: Gru,
    act_mu: Linear,
    act_logvar: Linear,
    dec_init: Linear,
    dec_embed: String,
    dec_gru: Gru,
    dec_out: Linear,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(cfg: LatentConfig, env: &Env, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, l, e) = (cfg.hidden, cfg.latent_dim, cfg.embed);
        let vocab = env.actions().vocab();
        let turn_dim = env.turn_dim();
        let v = vocab.len();
        let mut vae = Vae {
            state: StateEncoder::new("state", turn_dim, h, l),
            act_embed: "act.embed".into(),
            act_gru: Gru::new("act.gru", e, h),
            act_mu: Linear::new("act.mu", h, l),
            act_logvar: Linear::new("act.logvar", h, l),
            dec_init: Linear::new("dec.init", l, h),
            dec_embed: "dec.embed".into(),
            dec_gru: Gru::new("dec.gru", e + l, h),
            dec_out: Linear::new("dec.out", h, v),
            params: VaeParams {
                theta: ParameterSet::new(),
                phi: ParameterSet::new(),
                omega: ParameterSet::new(),
            },
            bos: vocab.bos(),
            eos: vocab.eos(),
            turn_dim,
            vocab_size: v,
            cfg,
        };
        let mut theta = ParameterSet::new();
        vae.state.gru.init(&mut theta, rng)?;
        vae.state.mu.init(&mut theta, rng)?;
        vae.state.logvar.init(&mut theta, rng)?;
        let mut phi = ParameterSet::new();
        phi.insert_scaled_uniform(&vae.act_embed, v, e, rng)?;
        vae.act_gru.init(&mut phi, rng)?;
        vae.act_mu.init(&mut phi, rng)?;
        vae.act_logvar.init(&mut phi, rng)?;
        let mut omega = ParameterSet::new();
        vae.dec_init.init(&mut omega, rng)?;
        omega.insert_scaled_uniform(&vae.dec_embed, v, e, rng)?;
        vae.dec_gru.init(&mut omega, rng)?;
        vae.dec_out.init(&mut omega, rng)?;
        vae.params = VaeParams { theta, phi, omega };
        Ok(vae)
    }

    pub fn state_encoder(&self) -> &StateEncoder {
        &self.state
    }

    /// Moments of the state-conditioned latent at each picked context row.
    pub fn state_moments(&self, g: &mut Graph, p: &Bound, seqs: &PaddedBatch, picks: &[usize]) -> Result<(Var, Var)> {
        let h = self.state.hidden(g, p, seqs, picks)?;
        let mu = self.state.mu.forward(g, p, h)?;
        let lv = self.state.logvar.forward(g, p, h)?;
        Ok((mu, lv))
    }

    /// Moments of the action posterior for each token sequence.
    pub fn action_moments(&self, g: &mut Graph, p: &Bound, tokens: &[Vec<usize>]) -> Result<(Var, Var)> {
        let n = tokens.len();
        if n == 0 || tokens.iter().any(Vec::is_empty) {
            return Err(Error::Empty("action tokens"));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(Error::OutOfVocabulary(format!("#{bad}")));
        }
        let steps = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let seqs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        let ids = padded_ids(&seqs, steps, self.bos);
        let xs = g.gather_rows(p.get(&self.act_embed), &ids)?;
        let h0 = g.zeros(n, self.cfg.hidden);
        let hs = self.act_gru.unroll_batch(g, p, xs, n, h0)?;
        let last: Vec<usize> = tokens.iter().enumerate().map(|(b, s)| (s.len() - 1) * n + b).collect();
        let h = g.gather_rows(hs, &last)?;
        let mu = self.act_mu.forward(g, p, h)?;
        let lv = self.act_logvar.forward(g, p, h)?;
        Ok((mu, lv))
    }

    /// Summed token negative log-likelihood of `tokens` (plus end markers)
    /// given latent rows `z`, with teacher forcing.
    pub fn decoder_nll(&self, g: &mut Graph, p: &Bound, z: Var, tokens: &[Vec<usize>]) -> Result<Var> {
        let n = tokens.len();
        let steps = tokens.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut inputs = vec![self.bos; steps * n];
        let mut targets = vec![None; steps * n];
        for (b, s) in tokens.iter().enumerate() {
            for t in 0..=s.len() {
                if t > 0 {
                    inputs[t * n + b] = s[t - 1];
                }
                targets[t * n + b] = Some(if t < s.len() { s[t] } else { self.eos });
            }
        }
        let init = self.dec_init.forward(g, p, z)?;
        let h0 = g.tanh(init);
        let emb = g.gather_rows(p.get(&self.dec_embed), &inputs)?;
        // the latent is fed at every step as well as through the initial state
        let zs = g.gather_rows(z, &(0..steps * n).map(|i| i % n).collect::<Vec<_>>())?;
        let xs = g.concat_cols(&[emb, zs])?;
        let hs = self.dec_gru.unroll_batch(g, p, xs, n, h0)?;
        let logits = self.dec_out.forward(g, p, hs)?;
        g.cross_entropy(logits, &targets)
    }

    fn branch(&self, g: &mut Graph, p: &Bound, mu: Var, lv: Var, noise: &[f64], tokens: &[Vec<usize>], w: f64) -> Result<Var> {
        let (r, c) = g.dims(mu);
        let eps = g.leaf_values(r, c, noise.to_vec())?;
        let z = gaussian_sample(g, mu, lv, eps)?;
        let nll = self.decoder_nll(g, p, z, tokens)?;
        if w == 0.0 {
            return Ok(nll);
        }
        let kl = kl_to_standard_normal(g, mu, lv)?;
        let kl = g.scale(kl, w);
        g.add(nll, kl)
    }

    fn check_noise(&self, batch: &LatentBatch, noise: &FrozenNoise) -> Result<()> {
        let want = batch.len() * self.cfg.latent_dim;
        if noise.state.len() != want || noise.action.len() != want {
            return Err(Error::shape("frozen_noise", &[want], &[noise.state.len(), noise.action.len()]));
        }
        Ok(())
    }

    /// Joint objective, averaged over pairs: response generation from the
    /// state latent plus action reconstruction, each with a weighted KL to
    /// the standard normal prior.
    pub fn lava_mt_loss(&self, g: &mut Graph, p: &Bound, batch: &LatentBatch, noise: &FrozenNoise) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("latent batch"));
        }
        self.check_noise(batch, noise)?;
        let (mu_s, lv_s) = self.state_moments(g, p, &batch.contexts, &batch.picks)?;
        let rg = self.branch(g, p, mu_s, lv_s, &noise.state, &batch.tokens, self.cfg.alpha)?;
        let vae = self.vae_branch(g, p, batch, noise)?;
        let total = g.add(rg, vae)?;
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Action-reconstruction objective alone, averaged over pairs.
    pub fn vae_warmup_loss(&self, g: &mut Graph, p: &Bound, batch: &LatentBatch, noise: &FrozenNoise) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("latent batch"));
        }
        self.check_noise(batch, noise)?;
        let vae = self.vae_branch(g, p, batch, noise)?;
        Ok(g.scale(vae, 1.0 / batch.len() as f64))
    }

    fn vae_branch(&self, g: &mut Graph, p: &Bound, batch: &LatentBatch, noise: &FrozenNoise) -> Result<Var> {
        let (mu_a, lv_a) = self.action_moments(g, p, &batch.tokens)?;
        self.branch(g, p, mu_a, lv_a, &noise.action, &batch.tokens, self.cfg.beta)
    }

    /// `(mu, logvar)` of the action posterior.
    pub fn encode_action(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.params.phi.bind(&mut g);
        let (mu, lv) = self.action_moments(&mut g, &p, &[tokens.to_vec()])?;
        Ok((g.value(mu).to_vec(), g.value(lv).to_vec()))
    }

    /// Posterior means for many token sequences at once, one row each.
    pub fn encode_action_means(&self, tokens: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.params.phi.bind(&mut g);
        let (mu, _) = self.action_moments(&mut g, &p, tokens)?;
        Ok(g.value(mu).chunks(self.cfg.latent_dim).map(<[f64]>::to_vec).collect())
    }

    /// `(mu, logvar)` of the state latent after the last turn of `features`.
    pub fn encode_state(&self, features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        if features.is_empty() {
            return Err(Error::Empty("context"));
        }
        let mut g = Graph::new();
        let p = self.params.theta.bind(&mut g);
        let seqs = PaddedBatch::new(&[features])?;
        let pick = seqs.row(0, features.len() - 1);
        let (mu, lv) = self.state_moments(&mut g, &p, &seqs, &[pick])?;
        Ok((g.value(mu).to_vec(), g.value(lv).to_vec()))
    }

    /// Greedy token rendering of each latent row, without end markers.
    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
        let n = zs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let l = self.cfg.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != l) {
            return Err(Error::shape("decode", &[z.len()], &[l]));
        }
        let mut g = Graph::new();
        let p = self.params.omega.bind(&mut g);
        let z = g.leaf_values(n, l, zs.concat())?;
        let init = self.dec_init.forward(&mut g, &p, z)?;
        let mut h = g.tanh(init);
        let mut prev = vec![self.bos; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut finished = vec![false; n];
        let embed = p.get(&self.dec_embed);
        for _ in 0..self.cfg.max_decode_len {
            let emb = g.gather_rows(embed, &prev)?;
            let x = g.concat_cols(&[emb, z])?;
            h = self.dec_gru.step(&mut g, &p, h, x)?;
            let logits = self.dec_out.forward(&mut g, &p, h)?;
            let lv = g.value(logits);
            for b in 0..n {
                let row = &lv[b * self.vocab_size..(b + 1) * self.vocab_size];
                let best = argmax(row);
                prev[b] = best;
                if !finished[b] {
                    if best == self.eos {
                        finished[b] = true;
                    } else {
                        out[b].push(best);
                    }
                }
            }
            if finished.iter().all(|&f| f) {
                break;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<usize>> {
        Ok(self.decode_batch(&[z.to_vec()])?.remove(0))
    }

    /// Decodes to a system act id; renderings that match no act become the
    /// fallback act.
    pub fn decode_act(&self, space: &ActionSpace, z: &[f64]) -> Result<usize> {
        let tokens = self.decode(z)?;
        Ok(parse_or_fallback(space, &tokens))
    }

    /// Fraction of the corpus's actions whose posterior mean decodes back to
    /// the same tokens.
    pub fn reconstruction_accuracy(&self, space: &ActionSpace, corpus: &Corpus) -> Result<f64> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for e in &corpus.episodes {
            for &a in &e.acts {
                *counts.entry(a).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus actions"));
        }
        let mut acts: Vec<usize> = counts.keys().copied().collect();
        acts.sort_unstable();
        let tokens: Vec<Vec<usize>> = acts.iter().map(|&a| space.tokens(a).to_vec()).collect();
        let means = self.encode_action_means(&tokens)?;
        let decoded = self.decode_batch(&means)?;
        let total: usize = counts.values().sum();
        let hits: usize = acts
            .iter()
            .zip(&tokens)
            .zip(&decoded)
            .filter(|((_, t), d)| t == d)
            .map(|((a, _), _)| counts[a])
            .sum();
        Ok(hits as f64 / total as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.theta.save(&dir.join("theta.params"))?;
        self.params.phi.save(&dir.join("phi.params"))?;
        self.params.omega.save(&dir.join("omega.params"))?;
        Ok(())
    }

    /// Rebuilds the model for `cfg` and loads its weights from `dir`.
    pub fn load(dir: &Path, cfg: LatentConfig, env: &Env) -> Result<Self> {
        let mut vae = Vae::new(cfg, env, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = VaeParams {
            theta: ParameterSet::load(&dir.join("theta.params"))?,
            phi: ParameterSet::load(&dir.join("phi.params"))?,
            omega: ParameterSet::load(&dir.join("omega.params"))?,
        };
        for (fresh, loaded) in [
            (&vae.params.theta, &params.theta),
            (&vae.params.phi, &params.phi),
            (&vae.params.omega, &params.omega),
        ] {
            fresh.max_abs_diff(loaded)?;
        }
        vae.params = params;
        Ok(vae)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn parse_or_fallback(space: &ActionSpace, tokens: &[usize]) -> usize {
    space
        .parse(tokens)
        .unwrap_or_else(|| space.id(&SystemAct::Fallback).expect("fallback is always available"))
}

/// Diagnostics of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub warmup_losses: Vec<f64>,
    pub joint_losses: Vec<f64>,
    pub valid_accuracy: f64,
    /// Mean KL of the action posterior to the prior on validation actions.
    pub action_kl: f64,
}

/// Per-episode turn features for a whole corpus.
pub fn corpus_features(env: &Env, corpus: &Corpus) -> Vec<Vec<Vec<f64>>> {
    corpus
        .episodes
        .iter()
        .map(|e| e.context(e.len()).features(env))
        .collect()
}

/// Draws whole episodes until at least `min_transitions` decision turns are collected.
pub fn sample_episode_batch<R: Rng + ?Sized>(corpus: &Corpus, min_transitions: usize, rng: &mut R) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut picked = Vec::new();
    let mut n = 0;
    while n < min_transitions.max(1) {
        let i = rng.random_range(0..corpus.len());
        n += corpus.episodes[i].len();
        picked.push(i);
    }
    Ok(picked)
}

fn batch_of(space: &ActionSpace, corpus: &Corpus, feats: &[Vec<Vec<f64>>], idx: &[usize]) -> Result<LatentBatch> {
    let eps: Vec<&Episode> = idx.iter().map(|&i| &corpus.episodes[i]).collect();
    let fs: Vec<&[Vec<f64>]> = idx.iter().map(|&i| feats[i].as_slice()).collect();
    LatentBatch::from_episodes(space, &eps, &fs)
}

/// Warm-up on action reconstruction, then joint training. Returns the model
/// and its validation diagnostics.
pub fn pretrain(
    env: &Env,
    train: &Corpus,
    valid: &Corpus,
    cfg: &LatentConfig,
    schedule: &PretrainSchedule,
    seed: u64,
) -> Result<(Vae, PretrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vae = Vae::new(cfg.clone(), env, &mut rng)?;
    let space = env.actions();
    let feats = corpus_features(env, train);
    let mut opt_theta = OptimizerState::new(&vae.params.theta, schedule.lr);
    let mut opt_phi = OptimizerState::new(&vae.params.phi, schedule.lr);
    let mut opt_omega = OptimizerState::new(&vae.params.omega, schedule.lr);
    let mut warmup_losses = Vec::with_capacity(schedule.warmup_steps);
    let mut joint_losses = Vec::with_capacity(schedule.joint_steps);
    for step in 0..schedule.warmup_steps + schedule.joint_steps {
        let joint = step >= schedule.warmup_steps;
        let idx = sample_episode_batch(train, schedule.batch_transitions, &mut rng)?;
        let batch = batch_of(space, train, &feats, &idx)?;
        let noise = FrozenNoise::sample(batch.len(), cfg.latent_dim, &mut rng);
        let mut g = Graph::new();
        let p = vae.params.bind(&mut g);
        let loss = if joint {
            vae.lava_mt_loss(&mut g, &p, &batch, &noise)?
        } else {
            vae.vae_warmup_loss(&mut g, &p, &batch, &noise)?
        };
        let value = g.scalar(loss);
        let grads = g.backward(loss)?;
        vae.params.phi.accumulate(&p, &grads)?;
        vae.params.omega.accumulate(&p, &grads)?;
        opt_phi.step(&mut vae.params.phi)?;
        opt_omega.step(&mut vae.params.omega)?;
        if joint {
            vae.params.theta.accumulate(&p, &grads)?;
            opt_theta.step(&mut vae.params.theta)?;
            joint_losses.push(value);
        } else {
            warmup_losses.push(value);
        }
    }
    let valid_accuracy = vae.reconstruction_accuracy(space, valid)?;
    let action_kl = mean_action_kl(&vae, space, valid)?;
    Ok((
        vae,
        PretrainReport {
            warmup_losses,
            joint_losses,
            valid_accuracy,
            action_kl,
        },
    ))
}

fn mean_action_kl(vae: &Vae, space: &ActionSpace, corpus: &Corpus) -> Result<f64> {
    let tokens: Vec<Vec<usize>> = corpus
        .episodes
        .iter()
        .flat_map(|e| e.acts.iter().map(|&a| space.tokens(a).to_vec()))
        .collect();
    if tokens.is_empty() {
        return Err(Error::Empty("corpus actions"));
    }
    let mut g = Graph::new();
    let p = vae.params.phi.bind(&mut g);
    let (mu, lv) = vae.action_moments(&mut g, &p, &tokens)?;
    let kl = kl_to_standard_normal(&mut g, mu, lv)?;
    Ok(g.scalar(kl) / tokens.len() as f64)
}

/// Supervised baseline: decodes the state encoder's mean latent.
#[derive(Debug, Clone)]
pub struct SlPolicy {
    vae: Vae,
    env: Env,
    name: String,
}

impl SlPolicy {
    pub fn new(vae: Vae, env: &Env) -> Self {
        SlPolicy {
            vae,
            env: env.clone(),
            name: "sl".into(),
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    fn mean(&self, ctx: &DialogueContext<'_>) -> Result<Vec<f64>> {
        Ok(self.vae.encode_state(&ctx.features(&self.env))?.0)
    }
}

impl Policy for SlPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn act(&self, ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Result<usize> {
        let z = self.mean(ctx)?;
        self.vae.decode_act(self.env.actions(), &z)
    }

    fn latent(&self, ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Option<Result<Vec<f64>>> {
        Some(self.mean(ctx))
    }

    fn action_form(&self) -> ActionForm {
        ActionForm::Latent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, make_behavior_policy, Split};
    use crate::dialenv::{EnvConfig, Ontology};
    use crate::numerics::grad_check;

    fn tiny() -> (Env, Corpus, LatentConfig) {
        let env = Env::new(Ontology::miniwoz(), EnvConfig::default()).unwrap();
        let pol = make_behavior_policy(&env, 0.3).unwrap();
        let corpus = generate_corpus(&env, &pol, 2, 4, Split::Train).unwrap();
        let cfg = LatentConfig {
            latent_dim: 3,
            hidden: 4,
            embed: 3,
            ..LatentConfig::default()
        };
        (env, corpus, cfg)
    }

    fn batch(env: &Env, corpus: &Corpus) -> LatentBatch {
        let feats = corpus_features(env, corpus);
        batch_of(env.actions(), corpus, &feats, &[0, 1]).unwrap()
    }

    #[test]
    fn objectives_pass_gradient_check() {
        let (env, corpus, cfg) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vae = Vae::new(cfg.clone(), &env, &mut rng).unwrap();
        let b = batch(&env, &corpus);
        let noise = FrozenNoise::sample(b.len(), cfg.latent_dim, &mut rng);
        let all = vae.params.merged().unwrap();
        let joint = grad_check(&all, 1e-2, Some(12), |g, p| vae.lava_mt_loss(g, p, &b, &noise)).unwrap();
        let warm = grad_check(&all, 1e-2, Some(12), |g, p| vae.vae_warmup_loss(g, p, &b, &noise)).unwrap();
        assert!(joint < 1e-4 && warm < 1e-4, "{joint} {warm}");
    }

    #[test]
    fn frozen_noise_makes_loss_deterministic() {
        let (env, corpus, cfg) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vae = Vae::new(cfg.clone(), &env, &mut rng).unwrap();
        let b = batch(&env, &corpus);
        let noise = FrozenNoise::sample(b.len(), cfg.latent_dim, &mut rng);
        let eval = || {
            let mut g = Graph::new();
            let p = vae.params.bind(&mut g);
            let l = vae.lava_mt_loss(&mut g, &p, &b, &noise).unwrap();
            g.scalar(l)
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
        let short = FrozenNoise::sample(1, cfg.latent_dim, &mut rng);
        let mut g = Graph::new();
        let p = vae.params.bind(&mut g);
        assert!(vae.lava_mt_loss(&mut g, &p, &b, &short).is_err());
    }

    #[test]
    fn unparseable_tokens_fall_back() {
        let (env, _, _) = tiny();
        let space = env.actions();
        let fallback = space.id(&SystemAct::Fallback).unwrap();
        assert_eq!(parse_or_fallback(space, &[space.vocab().eos()]), fallback);
        assert_eq!(parse_or_fallback(space, space.tokens(3)), 3);
    }

    #[test]
    fn save_load_round_trip() {
        let (env, corpus, cfg) = tiny();
        let vae = Vae::new(cfg.clone(), &env, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        vae.save(dir.path()).unwrap();
        let back = Vae::load(dir.path(), cfg.clone(), &env).unwrap();
        assert_eq!(back.params, vae.params);
        let acc = back.reconstruction_accuracy(env.actions(), &corpus).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let wrong = LatentConfig { latent_dim: 4, ..cfg };
        assert!(Vae::load(dir.path(), wrong, &env).is_err());
    }

    #[test]
    fn decoder_output_is_bounded() {
        let (env, _, cfg) = tiny();
        let vae = Vae::new(cfg.clone(), &env, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let out = vae.decode_batch(&[vec![0.3, -1.0, 2.0], vec![0.0; 3]]).unwrap();
        assert!(out.iter().all(|t| t.len() <= cfg.max_decode_len));
        assert!(vae.decode(&[1.0]).is_err());
    }
}
