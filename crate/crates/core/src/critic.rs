//! Goal-conditioned recurrent Q-network with dropout pessimism and a slowly
//! tracking target copy.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::Episode;
use crate::dialenv::{encode_goal, ActionSpace, Env};
use crate::error::{Error, Result};
use crate::numerics::{dropout_mask, Bound, Graph, Gru, Linear, OptimizerState, PaddedBatch, ParameterSet, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub gamma: f64,
    pub dropout: f64,
    /// Dropout passes whose minimum is the pessimistic estimate.
    pub passes: usize,
    /// Weight of the latent-action KL penalty.
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    /// Turn-encoder hidden size.
    pub hidden: usize,
    /// Width of the output layer.
    pub head: usize,
    pub goal_embed: usize,
    pub action_embed: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            gamma: 0.99,
            dropout: 0.3,
            passes: 5,
            lambda: 0.1,
            tau: 0.005,
            lr: 0.01,
            hidden: 64,
            head: 500,
            goal_embed: 32,
            action_embed: 32,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.passes == 0 {
            return Err(Error::Config("need at least one dropout pass".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(self.lr > 0.0) {
            return Err(Error::Config("tau must lie in [0, 1] and lr be positive".into()));
        }
        if self.hidden == 0 || self.head == 0 || self.goal_embed == 0 || self.action_embed == 0 {
            return Err(Error::Config("critic layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// How candidate actions enter the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionEncoding {
    /// Latent vectors, concatenated as they are.
    Latent { dim: usize },
    /// Token sequences, summarized by a bag-of-tokens layer.
    Tokens { vocab: usize },
}

/// A batch of candidate actions in one of the two encodings.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionInputs {
    Latent(Vec<Vec<f64>>),
    Tokens(Vec<Vec<usize>>),
}

impl ActionInputs {
    pub fn len(&self) -> usize {
        match self {
            ActionInputs::Latent(v) => v.len(),
            ActionInputs::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> ActionInputs {
        match self {
            ActionInputs::Latent(v) => ActionInputs::Latent(idx.iter().map(|&i| v[i].clone()).collect()),
            ActionInputs::Tokens(v) => ActionInputs::Tokens(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// `r` at the end of an episode, `r + gamma * q_next` otherwise.
pub fn bellman_target(r: f64, done: bool, gamma: f64, q_next: f64) -> f64 {
    if done {
        r
    } else {
        r + gamma * q_next
    }
}

/// Transitions drawn from whole episodes. Each episode is one sequence of
/// `contexts`; row `picks[i]` is the last turn of transition `i`'s context and
/// `next_picks[i]` that of its successor. Every turn before the decision turn
/// carries the corpus action, so contexts never contain candidate actions.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub contexts: PaddedBatch,
    /// One goal encoding per sequence; empty vectors when the critic has no goal input.
    pub goals: Vec<Vec<f64>>,
    /// Sequence of each transition.
    pub seq: Vec<usize>,
    pub picks: Vec<usize>,
    pub next_picks: Vec<usize>,
    pub actions: ActionInputs,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.picks.len();
        if n == 0 {
            return Err(Error::Empty("transition batch"));
        }
        let lens = [self.seq.len(), self.next_picks.len(), self.actions.len(), self.rewards.len(), self.terminal.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::shape("transition_batch", &[n], &lens));
        }
        if self.goals.len() != self.contexts.batch {
            return Err(Error::shape("transition_goals", &[self.contexts.batch], &[self.goals.len()]));
        }
        Ok(())
    }
}

/// Maps system act ids to critic action inputs.
#[derive(Debug, Clone)]
pub enum ActCodec {
    Tokens(ActionSpace),
    /// One latent vector per act id.
    Latent(Vec<Vec<f64>>),
}

impl ActCodec {
    pub fn encoding(&self) -> ActionEncoding {
        match self {
            ActCodec::Tokens(space) => ActionEncoding::Tokens { vocab: space.vocab().len() },
            ActCodec::Latent(table) => ActionEncoding::Latent {
                dim: table.first().map_or(0, Vec::len),
            },
        }
    }

    pub fn encode(&self, acts: &[usize]) -> Result<ActionInputs> {
        match self {
            ActCodec::Tokens(space) => {
                let mut out = Vec::with_capacity(acts.len());
                for &a in acts {
                    space.act(a)?;
                    out.push(space.tokens(a).to_vec());
                }
                Ok(ActionInputs::Tokens(out))
            }
            ActCodec::Latent(table) => acts
                .iter()
                .map(|&a| table.get(a).cloned().ok_or(Error::UnknownAction(a)))
                .collect::<Result<_>>()
                .map(ActionInputs::Latent),
        }
    }
}

/// Every transition of `episodes` as a critic batch. `features[i]` holds
/// the turn features of `episodes[i]`, one row per observation. The builder
/// checks that each row's previous-act block names the corpus act, so
/// contexts carry corpus actions for all turns before the decision turn.
pub fn dialogue_batch(env: &Env, episodes: &[&Episode], features: &[&[Vec<f64>]], codec: &ActCodec) -> Result<TransitionBatch> {
    if episodes.len() != features.len() {
        return Err(Error::shape("dialogue_batch", &[episodes.len()], &[features.len()]));
    }
    let prev_at = env.observation_dim();
    let n_acts = env.actions().len();
    for (e, f) in episodes.iter().zip(features) {
        if f.len() != e.observations.len() {
            return Err(Error::shape("dialogue_features", &[e.observations.len()], &[f.len()]));
        }
        for (t, row) in f.iter().enumerate() {
            let block = &row[prev_at..prev_at + n_acts];
            let ok = match t.checked_sub(1) {
                None => block.iter().all(|&x| x == 0.0),
                Some(p) => block[e.acts[p]] == 1.0 && block.iter().sum::<f64>() == 1.0,
            };
            if !ok {
                return Err(Error::invalid(format!("context row {t} does not carry the corpus action")));
            }
        }
    }
    let contexts = PaddedBatch::new(features)?;
    let ont = env.ontology();
    let mut b = TransitionBatch {
        goals: episodes.iter().map(|e| encode_goal(ont, &e.goal)).collect(),
        seq: Vec::new(),
        picks: Vec::new(),
        next_picks: Vec::new(),
        actions: ActionInputs::Latent(Vec::new()),
        rewards: Vec::new(),
        terminal: Vec::new(),
        contexts,
    };
    let mut acts = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        for tr in 0..e.len() {
            let t = e.transition(tr);
            b.seq.push(i);
            b.picks.push(b.contexts.row(i, tr));
            b.next_picks.push(b.contexts.row(i, tr + 1));
            b.rewards.push(t.reward);
            b.terminal.push(t.terminal);
            acts.push(t.action);
        }
    }
    b.actions = codec.encode(&acts)?;
    b.validate()?;
    Ok(b)
}

/// Dropout handling for one forward pass of the output layer.
#[derive(Debug, Clone, Copy)]
pub enum Dropout<'a> {
    Off,
    Mask(&'a [f64]),
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub cfg: CriticConfig,
    pub encoding: ActionEncoding,
    pub turn_dim: usize,
    pub goal_dim: usize,
    pub params: ParameterSet,
    pub target: ParameterSet,
    gru: Gru,
    goal: Linear,
    action: Linear,
    hidden_layer: Linear,
    out: Linear,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        cfg: CriticConfig,
        encoding: ActionEncoding,
        turn_dim: usize,
        goal_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let action_in = match encoding {
            ActionEncoding::Latent { dim } => dim,
            ActionEncoding::Tokens { vocab } => vocab,
        };
        if turn_dim == 0 || action_in == 0 {
            return Err(Error::Config("critic inputs must be non-empty".into()));
        }
        let action_out = match encoding {
            ActionEncoding::Latent { dim } => dim,
            ActionEncoding::Tokens { .. } => cfg.action_embed,
        };
        let goal_out = if goal_dim > 0 { cfg.goal_embed } else { 0 };
        let mut c = Critic {
            gru: Gru::new("critic.gru", turn_dim, cfg.hidden),
            goal: Linear::new("critic.goal", goal_dim.max(1), cfg.goal_embed),
            action: Linear::new("critic.action", action_in, cfg.action_embed),
            hidden_layer: Linear::new("critic.hidden", cfg.hidden + goal_out + action_out, cfg.head),
            out: Linear::new("critic.out", cfg.head, 1),
            params: ParameterSet::new(),
            target: ParameterSet::new(),
            cfg,
            encoding,
            turn_dim,
            goal_dim,
        };
        let mut ps = ParameterSet::new();
        c.gru.init(&mut ps, rng)?;
        if goal_dim > 0 {
            c.goal.init(&mut ps, rng)?;
        }
        if let ActionEncoding::Tokens { .. } = encoding {
            c.action.init(&mut ps, rng)?;
        }
        c.hidden_layer.init(&mut ps, rng)?;
        c.out.init(&mut ps, rng)?;
        c.target = ps.clone();
        c.params = ps;
        Ok(c)
    }

    fn action_features(&self, g: &mut Graph, p: &Bound, actions: &ActionInputs) -> Result<Var> {
        match (self.encoding, actions) {
            (ActionEncoding::Latent { dim }, ActionInputs::Latent(zs)) => {
                if let Some(z) = zs.iter().find(|z| z.len() != dim) {
                    return Err(Error::shape("critic_action", &[dim], &[z.len()]));
                }
                g.leaf_values(zs.len(), dim, zs.concat())
            }
            (ActionEncoding::Tokens { vocab }, ActionInputs::Tokens(ts)) => {
                let mut bag = vec![0.0; ts.len() * vocab];
                for (i, t) in ts.iter().enumerate() {
                    if t.is_empty() {
                        return Err(Error::Empty("action tokens"));
                    }
                    for &tok in t {
                        if tok >= vocab {
                            return Err(Error::OutOfVocabulary(format!("#{tok}")));
                        }
                        bag[i * vocab + tok] += 1.0 / t.len() as f64;
                    }
                }
                let x = g.leaf_values(ts.len(), vocab, bag)?;
                let a = self.action.forward(g, p, x)?;
                Ok(g.tanh(a))
            }
            (enc, _) => Err(Error::IncompatibleAction(format!("critic expects {enc:?} actions"))),
        }
    }

    /// Turn-encoder states for every row of `contexts`.
    pub fn encode_contexts(&self, g: &mut Graph, p: &Bound, contexts: &PaddedBatch) -> Result<Var> {
        if contexts.dim != self.turn_dim {
            return Err(Error::shape("critic_context", &[self.turn_dim], &[contexts.dim]));
        }
        let xs = contexts.leaf(g)?;
        let h0 = g.zeros(contexts.batch, self.cfg.hidden);
        self.gru.unroll_batch(g, p, xs, contexts.batch, h0)
    }

    /// Goal embeddings, one row per sequence; `None` without a goal input.
    pub fn encode_goals(&self, g: &mut Graph, p: &Bound, goals: &[Vec<f64>]) -> Result<Option<Var>> {
        if self.goal_dim == 0 {
            return Ok(None);
        }
        if let Some(bad) = goals.iter().find(|x| x.len() != self.goal_dim) {
            return Err(Error::shape("critic_goal", &[self.goal_dim], &[bad.len()]));
        }
        let x = g.leaf_values(goals.len(), self.goal_dim, goals.concat())?;
        let e = self.goal.forward(g, p, x)?;
        Ok(Some(g.tanh(e)))
    }

    /// Output-layer activations before dropout for `(row, action)` pairs.
    /// `hs` and `goals` come from [`Critic::encode_contexts`] and
    /// [`Critic::encode_goals`]; `seq[i]` is the sequence of pair `i`.
    pub fn features(
        &self,
        g: &mut Graph,
        p: &Bound,
        hs: Var,
        goals: Option<Var>,
        picks: &[usize],
        seq: &[usize],
        actions: &ActionInputs,
    ) -> Result<Var> {
        if picks.len() != actions.len() {
            return Err(Error::shape("critic_pairs", &[picks.len()], &[actions.len()]));
        }
        let a = self.action_features(g, p, actions)?;
        self.features_with(g, p, hs, goals, picks, seq, a)
    }

    /// [`Critic::features`] for latent actions held in a graph node, so
    /// gradients can flow into whatever produced them.
    #[allow(clippy::too_many_arguments)]
    pub fn features_latent(
        &self,
        g: &mut Graph,
        p: &Bound,
        hs: Var,
        goals: Option<Var>,
        picks: &[usize],
        seq: &[usize],
        z: Var,
    ) -> Result<Var> {
        let ActionEncoding::Latent { dim } = self.encoding else {
            return Err(Error::IncompatibleAction("token critic cannot score latent actions".into()));
        };
        if g.dims(z) != (picks.len(), dim) {
            let (r, c) = g.dims(z);
            return Err(Error::shape("critic_latent", &[picks.len(), dim], &[r, c]));
        }
        self.features_with(g, p, hs, goals, picks, seq, z)
    }

    #[allow(clippy::too_many_arguments)]
    fn features_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        hs: Var,
        goals: Option<Var>,
        picks: &[usize],
        seq: &[usize],
        a: Var,
    ) -> Result<Var> {
        if picks.len() != seq.len() {
            return Err(Error::shape("critic_pairs", &[picks.len()], &[seq.len()]));
        }
        let h = g.gather_rows(hs, picks)?;
        let mut parts = vec![h];
        if let Some(ge) = goals {
            parts.push(g.gather_rows(ge, seq)?);
        }
        parts.push(a);
        let x = g.concat_cols(&parts)?;
        let z = self.hidden_layer.forward(g, p, x)?;
        Ok(g.tanh(z))
    }

    /// One output pass over `features` (`n x head`).
    pub fn head(&self, g: &mut Graph, p: &Bound, features: Var, dropout: Dropout<'_>) -> Result<Var> {
        let x = match dropout {
            Dropout::Off => features,
            Dropout::Mask(m) => g.mask(features, m.to_vec())?,
        };
        let o = self.out.forward(g, p, x)?;
        Ok(g.sigmoid(o))
    }

    /// Fresh dropout masks, one per pass, for `n` pairs.
    pub fn draw_masks<R: Rng + ?Sized>(&self, n: usize, passes: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        (0..passes)
            .map(|_| Ok(dropout_mask(n * self.cfg.head, self.cfg.dropout, rng)?.unwrap_or_else(|| vec![1.0; n * self.cfg.head])))
            .collect()
    }

    /// Elementwise minimum over one head pass per mask.
    pub fn pessimistic(&self, g: &mut Graph, p: &Bound, features: Var, masks: &[Vec<f64>]) -> Result<Var> {
        let passes: Vec<Var> = masks
            .iter()
            .map(|m| self.head(g, p, features, Dropout::Mask(m)))
            .collect::<Result<_>>()?;
        if passes.len() == 1 {
            return Ok(passes[0]);
        }
        g.min_of(&passes)
    }

    /// Q-values of `(picks, actions)` under `params`, evaluated outside any
    /// training graph. With `masks` empty the dropout layer is off; otherwise
    /// the result is the minimum over the given masks.
    #[allow(clippy::too_many_arguments)]
    pub fn q_values(
        &self,
        params: &ParameterSet,
        contexts: &PaddedBatch,
        goals: &[Vec<f64>],
        picks: &[usize],
        seq: &[usize],
        actions: &ActionInputs,
        masks: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let hs = self.encode_contexts(&mut g, &p, contexts)?;
        let ge = self.encode_goals(&mut g, &p, goals)?;
        let f = self.features(&mut g, &p, hs, ge, picks, seq, actions)?;
        let q = if masks.is_empty() {
            self.head(&mut g, &p, f, Dropout::Off)?
        } else {
            self.pessimistic(&mut g, &p, f, masks)?
        };
        Ok(g.value(q).to_vec())
    }

    /// Minimum over `passes` freshly masked evaluations.
    #[allow(clippy::too_many_arguments)]
    pub fn pessimistic_q<R: Rng + ?Sized>(
        &self,
        params: &ParameterSet,
        contexts: &PaddedBatch,
        goals: &[Vec<f64>],
        picks: &[usize],
        seq: &[usize],
        actions: &ActionInputs,
        passes: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if passes == 0 {
            return Err(Error::invalid("pessimistic estimate needs at least one pass"));
        }
        let masks = self.draw_masks(picks.len(), passes, rng)?;
        self.q_values(params, contexts, goals, picks, seq, actions, &masks)
    }

    /// Bellman targets from the target network. `next_actions[i]` is the
    /// action the evaluated or target policy takes after transition `i`;
    /// entries of terminal transitions are ignored.
    pub fn td_targets<R: Rng + ?Sized>(&self, batch: &TransitionBatch, next_actions: &ActionInputs, rng: &mut R) -> Result<Vec<f64>> {
        batch.validate()?;
        if next_actions.len() != batch.len() {
            return Err(Error::shape("next_actions", &[batch.len()], &[next_actions.len()]));
        }
        let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch.terminal[i]).collect();
        let mut q_next = vec![0.0; batch.len()];
        if !live.is_empty() {
            let picks: Vec<usize> = live.iter().map(|&i| batch.next_picks[i]).collect();
            let seq: Vec<usize> = live.iter().map(|&i| batch.seq[i]).collect();
            let acts = next_actions.select(&live);
            let q = self.pessimistic_q(&self.target, &batch.contexts, &batch.goals, &picks, &seq, &acts, self.cfg.passes, rng)?;
            for (&i, v) in live.iter().zip(q) {
                q_next[i] = v;
            }
        }
        Ok((0..batch.len())
            .map(|i| bellman_target(batch.rewards[i], batch.terminal[i], self.cfg.gamma, q_next[i]))
            .collect())
    }

    /// Mean squared Bellman error against fixed `targets`, plus the latent KL
    /// penalty. `kl` is the mean KL between the action posterior of the next
    /// corpus action and a unit Gaussian around the target actor's output; it
    /// does not depend on the critic, so it shifts the loss without adding
    /// gradient. Token-encoded critics always use a zero weight.
    pub fn critic_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &TransitionBatch,
        targets: &[f64],
        mask: Dropout<'_>,
        kl: Option<f64>,
    ) -> Result<Var> {
        batch.validate()?;
        if targets.len() != batch.len() {
            return Err(Error::shape("critic_targets", &[batch.len()], &[targets.len()]));
        }
        let lambda = match self.encoding {
            ActionEncoding::Tokens { .. } => 0.0,
            ActionEncoding::Latent { .. } => self.cfg.lambda,
        };
        let penalty = match (lambda, kl) {
            (l, _) if l == 0.0 => 0.0,
            (l, Some(k)) => l * k,
            (_, None) => {
                return Err(Error::IncompatibleAction(
                    "a positive KL weight needs the next action's latent posterior".into(),
                ))
            }
        };
        let hs = self.encode_contexts(g, p, &batch.contexts)?;
        let ge = self.encode_goals(g, p, &batch.goals)?;
        let f = self.features(g, p, hs, ge, &batch.picks, &batch.seq, &batch.actions)?;
        let q = self.head(g, p, f, mask)?;
        let y = g.leaf_values(batch.len(), 1, targets.to_vec())?;
        let d = g.sub(q, y)?;
        let sq = g.square(d);
        let mse = g.mean(sq);
        Ok(if penalty == 0.0 { mse } else { g.add_scalar(mse, penalty) })
    }

    /// One optimizer step on the critic loss followed by a soft update of the
    /// target copy. Returns the loss before the step.
    pub fn train_step(
        &mut self,
        batch: &TransitionBatch,
        next_actions: &ActionInputs,
        kl: Option<f64>,
        opt: &mut OptimizerState,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let targets = self.td_targets(batch, next_actions, rng)?;
        let mask = self.draw_masks(batch.len(), 1, rng)?.remove(0);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let loss = self.critic_loss(&mut g, &p, batch, &targets, Dropout::Mask(&mask), kl)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss)?;
        self.params.accumulate(&p, &grads)?;
        opt.step(&mut self.params)?;
        self.target.soft_update(&self.params, self.cfg.tau)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(encoding: ActionEncoding) -> TransitionBatch {
        let seqs: Vec<Vec<Vec<f64>>> = vec![
            vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, -0.5], vec![0.2, 0.2, 0.2]],
            vec![vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]],
        ];
        let refs: Vec<&[Vec<f64>]> = seqs.iter().map(Vec::as_slice).collect();
        let contexts = PaddedBatch::new(&refs).unwrap();
        let actions = match encoding {
            ActionEncoding::Latent { dim } => {
                ActionInputs::Latent((0..3).map(|i| (0..dim).map(|j| ((i + j) as f64 * 0.7).sin()).collect()).collect())
            }
            ActionEncoding::Tokens { .. } => ActionInputs::Tokens(vec![vec![0, 1], vec![2, 3, 1], vec![4]]),
        };
        TransitionBatch {
            picks: vec![contexts.row(0, 0), contexts.row(0, 1), contexts.row(1, 0)],
            next_picks: vec![contexts.row(0, 1), contexts.row(0, 2), contexts.row(1, 1)],
            contexts,
            goals: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            seq: vec![0, 0, 1],
            actions,
            rewards: vec![0.0, 1.0, 0.0],
            terminal: vec![false, true, true],
        }
    }

    fn small_cfg() -> CriticConfig {
        CriticConfig {
            hidden: 4,
            head: 6,
            goal_embed: 3,
            action_embed: 3,
            ..CriticConfig::default()
        }
    }

    #[test]
    fn bellman_examples() {
        assert_eq!(bellman_target(1.0, true, 0.99, 0.7), 1.0);
        assert!((bellman_target(0.0, false, 0.99, 0.5) - 0.495).abs() < 1e-15);
    }

    #[test]
    fn deterministic_without_dropout_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ActionEncoding::Tokens { vocab: 5 };
        let c = Critic::new(small_cfg(), enc, 3, 2, &mut rng).unwrap();
        let b = toy_batch(enc);
        let q1 = c.q_values(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &[]).unwrap();
        let q2 = c.q_values(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &[]).unwrap();
        assert_eq!(q1, q2);
        assert!(q1.iter().all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn pessimistic_is_min_of_recorded_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ActionEncoding::Latent { dim: 4 };
        let c = Critic::new(small_cfg(), enc, 3, 2, &mut rng).unwrap();
        let b = toy_batch(enc);
        let masks = c.draw_masks(b.len(), 5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let each: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| c.q_values(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, std::slice::from_ref(m)).unwrap())
            .collect();
        let q = c
            .pessimistic_q(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, 5, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        for i in 0..b.len() {
            let m = each.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min);
            let mean = each.iter().map(|v| v[i]).sum::<f64>() / 5.0;
            assert_eq!(q[i], m);
            assert!(q[i] <= mean);
        }
    }

    #[test]
    fn zero_rate_pessimism_equals_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ActionEncoding::Latent { dim: 4 };
        let cfg = CriticConfig { dropout: 0.0, ..small_cfg() };
        let c = Critic::new(cfg, enc, 3, 2, &mut rng).unwrap();
        let b = toy_batch(enc);
        let plain = c.q_values(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &[]).unwrap();
        let pess = c.pessimistic_q(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, 5, &mut rng).unwrap();
        assert_eq!(plain, pess);
    }

    #[test]
    fn squared_td_error_arithmetic() {
        // Q = 0.4 against a target of 0.9
        assert!(((0.4f64 - 0.9).powi(2) - 0.25).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ActionEncoding::Tokens { vocab: 5 };
        let c = Critic::new(small_cfg(), enc, 3, 2, &mut rng).unwrap();
        let b = toy_batch(enc);
        let q = c.q_values(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &[]).unwrap();
        let targets: Vec<f64> = q.iter().map(|v| v - 0.5).collect();
        let mut g = Graph::new();
        let p = c.params.bind(&mut g);
        let loss = c.critic_loss(&mut g, &p, &b, &targets, Dropout::Off, None).unwrap();
        assert!((g.scalar(loss) - 0.25).abs() < 1e-12);
        let mut g = Graph::new();
        let p = c.params.bind(&mut g);
        let loss = c.critic_loss(&mut g, &p, &b, &q, Dropout::Off, None).unwrap();
        assert!(g.scalar(loss).abs() < 1e-15);
    }

    #[test]
    fn latent_critic_requires_kl_when_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ActionEncoding::Latent { dim: 4 };
        let c = Critic::new(small_cfg(), enc, 3, 2, &mut rng).unwrap();
        let b = toy_batch(enc);
        let mut g = Graph::new();
        let p = c.params.bind(&mut g);
        let err = c.critic_loss(&mut g, &p, &b, &[0.0; 3], Dropout::Off, None).unwrap_err();
        assert!(matches!(err, Error::IncompatibleAction(_)));
    }

    #[test]
    fn wrong_action_form_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = Critic::new(small_cfg(), ActionEncoding::Latent { dim: 4 }, 3, 2, &mut rng).unwrap();
        let b = toy_batch(ActionEncoding::Tokens { vocab: 5 });
        let err = c
            .q_values(&c.params, &b.contexts, &b.goals, &b.picks, &b.seq, &b.actions, &[])
            .unwrap_err();
        assert!(matches!(err, Error::IncompatibleAction(_)));
    }

    #[test]
    fn loss_gradient_with_frozen_mask() {
        for (seed, enc) in [(8, ActionEncoding::Tokens { vocab: 5 }), (9, ActionEncoding::Latent { dim: 4 })] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Critic::new(small_cfg(), enc, 3, 2, &mut rng).unwrap();
            let b = toy_batch(enc);
            let mask = c.draw_masks(b.len(), 1, &mut rng).unwrap().remove(0);
            let err = grad_check(&c.params, 1e-5, None, |g, p| {
                c.critic_loss(g, p, &b, &[0.3, 1.0, 0.0], Dropout::Mask(&mask), Some(0.7))
            })
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn zero_tau_keeps_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = ActionEncoding::Tokens { vocab: 5 };
        let cfg = CriticConfig { tau: 0.0, ..small_cfg() };
        let mut c = Critic::new(cfg, enc, 3, 2, &mut rng).unwrap();
        let b = toy_batch(enc);
        let before = c.target.clone();
        let mut opt = OptimizerState::new(&c.params, c.cfg.lr);
        for _ in 0..3 {
            c.train_step(&b, &b.actions, None, &mut opt, &mut rng).unwrap();
        }
        assert_eq!(c.target, before);
        assert_ne!(c.params, before);
    }
}
