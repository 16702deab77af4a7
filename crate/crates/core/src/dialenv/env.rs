use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::acts::{ActionSpace, Slot, SystemAct, UserAct};
use super::goal::{sample_goal, Goal, GoalConfig};
use super::ontology::Ontology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbBucket {
    None,
    One,
    Many,
}

/// Ground-truth dialogue state tracked from the user's side of the conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeliefState {
    /// `[domain][informable]` value the user has stated.
    pub informed: Vec<Vec<Option<usize>>>,
    /// `[domain][requestable]` requests the user made that are still unanswered.
    pub outstanding: Vec<Vec<bool>>,
}

impl BeliefState {
    pub fn empty(ont: &Ontology) -> Self {
        BeliefState {
            informed: ont.domains.iter().map(|d| vec![None; d.informables.len()]).collect(),
            outstanding: ont.domains.iter().map(|d| vec![false; d.requestables.len()]).collect(),
        }
    }

    pub fn constraints(&self, domain: usize) -> Vec<(usize, usize)> {
        self.informed[domain]
            .iter()
            .enumerate()
            .filter_map(|(s, v)| v.map(|v| (s, v)))
            .collect()
    }

    pub fn db_bucket(&self, ont: &Ontology, domain: usize) -> DbBucket {
        let c = self.constraints(domain);
        match ont.domains[domain].matches(&c).take(2).count() {
            0 => DbBucket::None,
            1 => DbBucket::One,
            _ => DbBucket::Many,
        }
    }

    /// Binary vector: informed values, outstanding requests and a one-hot
    /// database bucket, domain by domain.
    pub fn to_bits(&self, ont: &Ontology) -> Vec<bool> {
        let mut bits = Vec::with_capacity(belief_dim(ont));
        for (d, dom) in ont.domains.iter().enumerate() {
            for (s, slot) in dom.informables.iter().enumerate() {
                bits.extend((0..slot.values.len()).map(|v| self.informed[d][s] == Some(v)));
            }
            bits.extend(self.outstanding[d].iter().copied());
            let b = self.db_bucket(ont, d);
            bits.extend([b == DbBucket::None, b == DbBucket::One, b == DbBucket::Many]);
        }
        bits
    }
}

pub fn belief_dim(ont: &Ontology) -> usize {
    ont.num_informable_values() + ont.num_requestables() + 3 * ont.domains.len()
}

/// Recovers the `(domain, slot, value)` triples whose informed bit is set.
pub fn decode_informed(ont: &Ontology, bits: &[bool]) -> Result<Vec<(usize, usize, usize)>> {
    if bits.len() != belief_dim(ont) {
        return Err(Error::shape("decode_informed", &[bits.len()], &[belief_dim(ont)]));
    }
    let mut out = Vec::new();
    let mut i = 0;
    for (d, dom) in ont.domains.iter().enumerate() {
        for (s, slot) in dom.informables.iter().enumerate() {
            for v in 0..slot.values.len() {
                if bits[i] {
                    out.push((d, s, v));
                }
                i += 1;
            }
        }
        i += dom.requestables.len() + 3;
    }
    Ok(out)
}

/// Number of distinct user acts.
pub fn num_user_acts(ont: &Ontology) -> usize {
    ont.num_informable_values() + ont.num_requestables() + 1
}

pub fn user_act_index(ont: &Ontology, act: &UserAct) -> usize {
    let informs = ont.num_informable_values();
    match *act {
        UserAct::Inform { domain, slot, value } => {
            let mut off = 0;
            for (d, dom) in ont.domains.iter().enumerate() {
                for (s, sl) in dom.informables.iter().enumerate() {
                    if d == domain && s == slot {
                        return off + value;
                    }
                    off += sl.values.len();
                }
            }
            unreachable!("inform outside the ontology")
        }
        UserAct::Request { domain, slot } => {
            let before: usize = ont.domains[..domain].iter().map(|d| d.requestables.len()).sum();
            informs + before + slot
        }
        UserAct::Bye => informs + ont.num_requestables(),
    }
}

pub fn user_act_from_index(ont: &Ontology, index: usize) -> Result<UserAct> {
    let mut off = 0;
    for (d, dom) in ont.domains.iter().enumerate() {
        for (s, sl) in dom.informables.iter().enumerate() {
            if index < off + sl.values.len() {
                return Ok(UserAct::Inform {
                    domain: d,
                    slot: s,
                    value: index - off,
                });
            }
            off += sl.values.len();
        }
    }
    for (d, dom) in ont.domains.iter().enumerate() {
        if index < off + dom.requestables.len() {
            return Ok(UserAct::Request {
                domain: d,
                slot: index - off,
            });
        }
        off += dom.requestables.len();
    }
    if index == off {
        Ok(UserAct::Bye)
    } else {
        Err(Error::invalid(format!("user act index {index} out of range")))
    }
}

/// What a policy sees after each user turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub user_act: UserAct,
    pub belief: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub max_turns: usize,
    /// Probability of flipping each informed-value bit in observations.
    pub belief_noise: f64,
    /// Constraints per domain the user states without being asked; any
    /// further ones come out only when the system asks for that slot or
    /// offers an entity that violates them.
    pub volunteered: usize,
    pub goals: GoalConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_turns: 20,
            belief_noise: 0.0,
            volunteered: 2,
            goals: GoalConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns == 0 {
            return Err(Error::Config("max_turns must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.belief_noise) {
            return Err(Error::Config("belief_noise must lie in [0, 1]".into()));
        }
        self.goals.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub goal: Goal,
    /// System turns taken so far.
    pub turn: usize,
    pub belief: BeliefState,
    /// `[domain][requestable]` entity whose value the system provided last.
    pub provided: Vec<Vec<Option<usize>>>,
    /// Index into `goal.domains` of the domain the user is working on.
    pub focus: usize,
    pub last_user_act: UserAct,
    pub done: bool,
    /// The user closed the dialogue because every request was answered.
    pub complete: bool,
}

impl EnvState {
    /// Goal constraints of a domain the user has not stated yet.
    pub fn pending_constraints(&self, goal_index: usize) -> Vec<(usize, usize)> {
        let dg = &self.goal.domains[goal_index];
        dg.constraints
            .iter()
            .copied()
            .filter(|&(s, v)| self.belief.informed[dg.domain][s] != Some(v))
            .collect()
    }

    /// Requested slots of a domain that have not been provided.
    pub fn unprovided(&self, goal_index: usize) -> Vec<usize> {
        let dg = &self.goal.domains[goal_index];
        dg.requests
            .iter()
            .copied()
            .filter(|&r| self.provided[dg.domain][r].is_none())
            .collect()
    }

    fn all_provided(&self) -> bool {
        (0..self.goal.domains.len()).all(|i| self.unprovided(i).is_empty())
    }
}

/// The miniature dialogue environment with a deterministic agenda user.
#[derive(Debug, Clone)]
pub struct Env {
    ont: Ontology,
    space: ActionSpace,
    cfg: EnvConfig,
}

impl Env {
    pub fn new(ont: Ontology, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let space = ActionSpace::new(&ont);
        Ok(Env { ont, space, cfg })
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ont
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.space
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Goal> {
        sample_goal(rng, &self.ont, &self.cfg.goals)
    }

    /// Initial state: the user opens with the first constraint of the first domain.
    pub fn reset(&self, goal: Goal) -> Result<EnvState> {
        goal.validate(&self.ont)?;
        let dg = &goal.domains[0];
        let (slot, value) = *dg
            .constraints
            .first()
            .ok_or_else(|| Error::Ontology("goal domain without constraints".into()))?;
        let first = UserAct::Inform {
            domain: dg.domain,
            slot,
            value,
        };
        let mut st = EnvState {
            belief: BeliefState::empty(&self.ont),
            provided: self.ont.domains.iter().map(|d| vec![None; d.requestables.len()]).collect(),
            goal,
            turn: 0,
            focus: 0,
            last_user_act: first,
            done: false,
            complete: false,
        };
        apply_user_act(&mut st, first);
        Ok(st)
    }

    /// Entity the system refers to in a domain: first database match of the
    /// constraints informed so far.
    pub fn top_match(&self, belief: &BeliefState, domain: usize) -> Option<usize> {
        let c = belief.constraints(domain);
        let first = self.ont.domains[domain].matches(&c).next();
        first
    }

    /// Whether the state would earn the success reward if the dialogue ended now.
    pub fn is_success(&self, st: &EnvState) -> bool {
        st.goal.domains.iter().all(|dg| {
            let dom = &self.ont.domains[dg.domain];
            let values: Option<Vec<&str>> = dg
                .requests
                .iter()
                .map(|&r| st.provided[dg.domain][r].map(|e| dom.entities[e].requestable[r].as_str()))
                .collect();
            let Some(values) = values else { return false };
            dom.entities.iter().enumerate().any(|(e, ent)| {
                dg.is_consistent(&self.ont, e)
                    && dg.requests.iter().zip(&values).all(|(&r, v)| ent.requestable[r] == *v)
            })
        })
    }

    pub fn step(&self, state: &EnvState, act_id: usize) -> Result<(EnvState, f64, bool)> {
        if state.done {
            return Err(Error::TerminalState);
        }
        let act = self.space.act(act_id)?;
        let mut st = state.clone();
        st.turn += 1;
        if act == SystemAct::Bye {
            st.done = true;
            let r = if self.is_success(&st) { 1.0 } else { 0.0 };
            return Ok((st, r, true));
        }
        if let SystemAct::Provide {
            domain,
            slot: Slot::Requestable(r),
        } = act
        {
            if let Some(e) = self.top_match(&st.belief, domain) {
                st.provided[domain][r] = Some(e);
                st.belief.outstanding[domain][r] = false;
            }
        }
        let reply = self.respond(&mut st, act);
        apply_user_act(&mut st, reply);
        st.last_user_act = reply;
        if reply == UserAct::Bye {
            st.complete = true;
            st.done = true;
        } else if st.turn >= self.cfg.max_turns {
            st.done = true;
        }
        let reward = if st.done && self.is_success(&st) { 1.0 } else { 0.0 };
        let done = st.done;
        Ok((st, reward, done))
    }

    fn respond(&self, st: &mut EnvState, act: SystemAct) -> UserAct {
        if st.all_provided() {
            return UserAct::Bye;
        }
        match act {
            SystemAct::Request { domain, slot } | SystemAct::Confirm { domain, slot } => {
                if let Some(value) = st.goal.get(domain).and_then(|g| g.value_of(slot)) {
                    return UserAct::Inform { domain, slot, value };
                }
            }
            SystemAct::Offer { domain } => {
                if let Some(gi) = st.goal.domains.iter().position(|g| g.domain == domain) {
                    if let Some(e) = self.top_match(&st.belief, domain) {
                        let dg = &st.goal.domains[gi];
                        if dg.is_consistent(&self.ont, e) {
                            if let Some(&r) = st.unprovided(gi).first() {
                                return UserAct::Request { domain, slot: r };
                            }
                        } else {
                            let ent = &self.ont.domains[domain].entities[e];
                            let &(slot, value) = dg
                                .constraints
                                .iter()
                                .find(|&&(s, v)| ent.informable[s] != v)
                                .expect("inconsistent entity violates a constraint");
                            return UserAct::Inform { domain, slot, value };
                        }
                    }
                }
            }
            _ => {}
        }
        self.agenda(st)
    }

    fn agenda(&self, st: &mut EnvState) -> UserAct {
        while st.focus < st.goal.domains.len() {
            let domain = st.goal.domains[st.focus].domain;
            let stated = st.goal.domains[st.focus].constraints.len() - st.pending_constraints(st.focus).len();
            if stated < self.cfg.volunteered {
                if let Some(&(slot, value)) = st.pending_constraints(st.focus).first() {
                    return UserAct::Inform { domain, slot, value };
                }
            }
            if let Some(&slot) = st.unprovided(st.focus).first() {
                return UserAct::Request { domain, slot };
            }
            if st.focus + 1 == st.goal.domains.len() {
                break;
            }
            st.focus += 1;
        }
        UserAct::Bye
    }

    /// Observation of the current state, with belief noise applied to the
    /// informed bits when configured.
    pub fn observe<R: Rng + ?Sized>(&self, st: &EnvState, rng: &mut R) -> Observation {
        let mut belief = st.belief.to_bits(&self.ont);
        if self.cfg.belief_noise > 0.0 {
            let mut i = 0;
            for dom in &self.ont.domains {
                let n: usize = dom.informables.iter().map(|s| s.values.len()).sum();
                for b in &mut belief[i..i + n] {
                    if rng.random_bool(self.cfg.belief_noise) {
                        *b = !*b;
                    }
                }
                i += n + dom.requestables.len() + 3;
            }
        }
        Observation {
            user_act: st.last_user_act,
            belief,
        }
    }

    /// Noise-free observation.
    pub fn observation(&self, st: &EnvState) -> Observation {
        Observation {
            user_act: st.last_user_act,
            belief: st.belief.to_bits(&self.ont),
        }
    }

    /// One-hot user act followed by the belief bits.
    pub fn encode_observation(&self, obs: &Observation) -> Vec<f64> {
        let n = num_user_acts(&self.ont);
        let mut v = vec![0.0; n + obs.belief.len()];
        v[user_act_index(&self.ont, &obs.user_act)] = 1.0;
        for (i, &b) in obs.belief.iter().enumerate() {
            if b {
                v[n + i] = 1.0;
            }
        }
        v
    }

    pub fn observation_dim(&self) -> usize {
        num_user_acts(&self.ont) + belief_dim(&self.ont)
    }

    /// Observation features followed by a one-hot of the previous system act
    /// (all zeros on the opening turn).
    pub fn turn_features(&self, obs: &Observation, prev_act: Option<usize>) -> Vec<f64> {
        let mut v = self.encode_observation(obs);
        let start = v.len();
        v.resize(start + self.space.len(), 0.0);
        if let Some(a) = prev_act {
            v[start + a] = 1.0;
        }
        v
    }

    pub fn turn_dim(&self) -> usize {
        self.observation_dim() + self.space.len()
    }
}

fn apply_user_act(st: &mut EnvState, act: UserAct) {
    match act {
        UserAct::Inform { domain, slot, value } => st.belief.informed[domain][slot] = Some(value),
        UserAct::Request { domain, slot } => st.belief.outstanding[domain][slot] = true,
        UserAct::Bye => {}
    }
}
