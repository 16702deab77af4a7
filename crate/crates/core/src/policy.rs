//! Dialogue policies and the context they act on.

use rand::{Rng, RngCore};

use crate::dialenv::{decode_informed, Env, Goal, Observation, Slot, SystemAct, UserAct};
use crate::error::{Error, Result};

/// Dialogue history up to the current decision point.
///
/// `acts[t]` is the system act taken after `observations[t]`, so a context at
/// decision turn `t` holds `t + 1` observations and `t` acts. The goal is
/// privileged information; only scripted policies read it.
#[derive(Debug, Clone, Copy)]
pub struct DialogueContext<'a> {
    pub goal: &'a Goal,
    pub observations: &'a [Observation],
    pub acts: &'a [usize],
}

impl<'a> DialogueContext<'a> {
    pub fn new(goal: &'a Goal, observations: &'a [Observation], acts: &'a [usize]) -> Result<Self> {
        if observations.is_empty() || acts.len() + 1 != observations.len() {
            return Err(Error::invalid(format!(
                "context needs one more observation than acts, got {} and {}",
                observations.len(),
                acts.len()
            )));
        }
        Ok(DialogueContext {
            goal,
            observations,
            acts,
        })
    }

    pub fn turn(&self) -> usize {
        self.acts.len()
    }

    pub fn last(&self) -> &Observation {
        self.observations.last().expect("non-empty by construction")
    }

    /// Turn features for every observation, each paired with the act before it.
    pub fn features(&self, env: &Env) -> Vec<Vec<f64>> {
        self.observations
            .iter()
            .enumerate()
            .map(|(t, o)| env.turn_features(o, t.checked_sub(1).map(|p| self.acts[p])))
            .collect()
    }
}

/// How a policy's actions are presented to a critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionForm {
    Latent,
    ActId,
    Tokens,
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `act` ignores its random stream.
    fn is_deterministic(&self) -> bool;

    /// Chooses a system act id for the context.
    fn act(&self, ctx: &DialogueContext<'_>, rng: &mut dyn RngCore) -> Result<usize>;

    /// Latent action behind the chosen act, for policies that have one.
    fn latent(&self, _ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Option<Result<Vec<f64>>> {
        None
    }

    fn action_form(&self) -> ActionForm {
        ActionForm::ActId
    }
}

/// Rule-based expert that reads the goal: it asks for every missing goal
/// constraint, then provides each requested slot once the domain's
/// constraints are all known.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    env: Env,
}

impl ScriptedOracle {
    pub fn new(env: &Env) -> Self {
        ScriptedOracle { env: env.clone() }
    }

    fn informed_sets(&self, obs: &Observation) -> Vec<(usize, usize, usize)> {
        decode_informed(self.env.ontology(), &obs.belief).unwrap_or_default()
    }

    fn choose(&self, ctx: &DialogueContext<'_>) -> Result<SystemAct> {
        let goal = ctx.goal;
        let complete_at = |obs: &Observation, domain: usize| {
            let inf = self.informed_sets(obs);
            goal.get(domain)
                .is_some_and(|g| g.constraints.iter().all(|&(s, v)| inf.contains(&(domain, s, v))))
        };
        // requested slots already answered from a fully informed belief
        let mut done: Vec<(usize, usize)> = Vec::new();
        for (t, &a) in ctx.acts.iter().enumerate() {
            if let SystemAct::Provide {
                domain,
                slot: Slot::Requestable(r),
            } = self.env.actions().act(a)?
            {
                if complete_at(&ctx.observations[t], domain) {
                    done.push((domain, r));
                }
            }
        }
        let focus = ctx.last().user_act.domain().filter(|d| goal.get(*d).is_some());
        let mut order: Vec<usize> = focus.into_iter().collect();
        order.extend(goal.domains.iter().map(|g| g.domain).filter(|d| Some(*d) != focus));
        let informed = self.informed_sets(ctx.last());
        for d in order {
            let dg = goal.get(d).expect("domain from goal");
            if let Some(&(slot, _)) = dg
                .constraints
                .iter()
                .find(|&&(s, v)| !informed.contains(&(d, s, v)))
            {
                return Ok(SystemAct::Request { domain: d, slot });
            }
            if let Some(&r) = dg.requests.iter().find(|&&r| !done.contains(&(d, r))) {
                return Ok(SystemAct::Provide {
                    domain: d,
                    slot: Slot::Requestable(r),
                });
            }
        }
        Ok(SystemAct::Bye)
    }
}

impl Policy for ScriptedOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn act(&self, ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Result<usize> {
        let a = self.choose(ctx)?;
        self.env.actions().id(&a)
    }
}

/// Plays the scripted oracle with probability `1 - epsilon`, otherwise a
/// uniformly random system act.
#[derive(Debug, Clone)]
pub struct EpsilonOracle {
    oracle: ScriptedOracle,
    epsilon: f64,
    name: String,
}

impl EpsilonOracle {
    pub fn new(env: &Env, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let name = if epsilon == 1.0 {
            "random".to_string()
        } else {
            format!("eps-{epsilon}")
        };
        Ok(EpsilonOracle {
            oracle: ScriptedOracle::new(env),
            epsilon,
            name,
        })
    }

    /// The uniform-random policy.
    pub fn uniform(env: &Env) -> Self {
        Self::new(env, 1.0).expect("1 is a valid epsilon")
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Policy for EpsilonOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        self.epsilon == 0.0
    }

    fn act(&self, ctx: &DialogueContext<'_>, rng: &mut dyn RngCore) -> Result<usize> {
        if self.epsilon > 0.0 && rng.random_bool(self.epsilon) {
            Ok(rng.random_range(0..self.oracle.env.actions().len()))
        } else {
            self.oracle.act(ctx, rng)
        }
    }
}

/// Context-blind plant that cycles through the requestable slots of whichever
/// domain the user last spoke about, answering questions nobody asked yet.
#[derive(Debug, Clone)]
pub struct EagerProvider {
    env: Env,
}

impl EagerProvider {
    pub fn new(env: &Env) -> Self {
        EagerProvider { env: env.clone() }
    }
}

impl Policy for EagerProvider {
    fn name(&self) -> &str {
        "eager"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn act(&self, ctx: &DialogueContext<'_>, _rng: &mut dyn RngCore) -> Result<usize> {
        let domain = ctx.last().user_act.domain().unwrap_or(0);
        let run = ctx
            .observations
            .iter()
            .rev()
            .take_while(|o| o.user_act.domain() == Some(domain) || o.user_act == UserAct::Bye)
            .count();
        let n = self.env.ontology().domains[domain].requestables.len();
        let act = SystemAct::Provide {
            domain,
            slot: Slot::Requestable((run - 1) % n),
        };
        self.env.actions().id(&act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialenv::{EnvConfig, Ontology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn context_shape_is_checked() {
        let env = Env::new(Ontology::miniwoz(), EnvConfig::default()).unwrap();
        let goal = env.sample_goal(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let st = env.reset(goal.clone()).unwrap();
        let obs = vec![env.observation(&st)];
        assert!(DialogueContext::new(&goal, &obs, &[]).is_ok());
        assert!(DialogueContext::new(&goal, &obs, &[1]).is_err());
        assert!(DialogueContext::new(&goal, &[], &[]).is_err());
    }

    #[test]
    fn epsilon_out_of_range() {
        let env = Env::new(Ontology::miniwoz(), EnvConfig::default()).unwrap();
        assert!(EpsilonOracle::new(&env, 1.5).is_err());
        assert!(EpsilonOracle::new(&env, -0.1).is_err());
    }
}
