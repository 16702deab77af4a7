use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ontology::Ontology;

/// The user's task in one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainGoal {
    pub domain: usize,
    /// `(informable slot, value)` pairs in the order the user states them.
    pub constraints: Vec<(usize, usize)>,
    /// Requestable slots, ascending.
    pub requests: Vec<usize>,
}

impl DomainGoal {
    pub fn value_of(&self, slot: usize) -> Option<usize> {
        self.constraints.iter().find(|c| c.0 == slot).map(|c| c.1)
    }

    pub fn is_consistent(&self, ont: &Ontology, entity: usize) -> bool {
        let e = &ont.domains[self.domain].entities[entity];
        self.constraints.iter().all(|&(s, v)| e.informable[s] == v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Goal {
    pub domains: Vec<DomainGoal>,
}

impl Goal {
    pub fn get(&self, domain: usize) -> Option<&DomainGoal> {
        self.domains.iter().find(|g| g.domain == domain)
    }

    /// Checks slot and value ranges plus database achievability.
    pub fn validate(&self, ont: &Ontology) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Ontology("goal has no active domain".into()));
        }
        for (i, dg) in self.domains.iter().enumerate() {
            let dom = ont
                .domains
                .get(dg.domain)
                .ok_or_else(|| Error::Ontology(format!("goal domain {} out of range", dg.domain)))?;
            if self.domains[..i].iter().any(|o| o.domain == dg.domain) {
                return Err(Error::Ontology(format!("domain {} repeated in goal", dom.name)));
            }
            for &(s, v) in &dg.constraints {
                let ok = dom.informables.get(s).is_some_and(|slot| v < slot.values.len());
                if !ok {
                    return Err(Error::Ontology(format!("bad constraint ({s}, {v}) in {}", dom.name)));
                }
            }
            if dg.requests.is_empty() || dg.requests.iter().any(|&r| r >= dom.requestables.len()) {
                return Err(Error::Ontology(format!("bad requests in {}", dom.name)));
            }
            if dom.matches(&dg.constraints).next().is_none() {
                return Err(Error::Ontology(format!("goal for {} matches no entity", dom.name)));
            }
        }
        Ok(())
    }
}

/// Distribution over user goals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalConfig {
    /// Probability that a goal spans two domains instead of one.
    pub two_domain_prob: f64,
    /// Probability of three constraints in a domain instead of two.
    pub three_constraint_prob: f64,
    pub min_requests: usize,
    pub max_requests: usize,
}

impl Default for GoalConfig {
    fn default() -> Self {
        GoalConfig {
            two_domain_prob: 0.3,
            three_constraint_prob: 0.3,
            min_requests: 2,
            max_requests: 3,
        }
    }
}

impl GoalConfig {
    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.two_domain_prob) || !p_ok(self.three_constraint_prob) {
            return Err(Error::Config("goal probabilities must lie in [0, 1]".into()));
        }
        if self.min_requests == 0 || self.min_requests > self.max_requests {
            return Err(Error::Config("need 1 <= min_requests <= max_requests".into()));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Draws an achievable goal by rejection sampling.
pub fn sample_goal<R: Rng + ?Sized>(rng: &mut R, ont: &Ontology, cfg: &GoalConfig) -> Result<Goal> {
    cfg.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let n_dom = if ont.domains.len() > 1 && rng.random_bool(cfg.two_domain_prob) {
            2
        } else {
            1
        };
        let chosen = sample(rng, ont.domains.len(), n_dom).into_vec();
        let mut goal = Goal {
            domains: Vec::with_capacity(n_dom),
        };
        for d in chosen {
            let dom = &ont.domains[d];
            let n_inf = dom.informables.len();
            let k = if rng.random_bool(cfg.three_constraint_prob) { 3 } else { 2 };
            let k = k.min(n_inf);
            let slots = sample(rng, n_inf, k).into_vec();
            let constraints = slots
                .into_iter()
                .map(|s| (s, rng.random_range(0..dom.informables[s].values.len())))
                .collect();
            let n_req = dom.requestables.len();
            let lo = cfg.min_requests.min(n_req);
            let hi = cfg.max_requests.min(n_req);
            let m = rng.random_range(lo..=hi);
            let mut requests = sample(rng, n_req, m).into_vec();
            requests.sort_unstable();
            goal.domains.push(DomainGoal {
                domain: d,
                constraints,
                requests,
            });
        }
        if goal.validate(ont).is_ok() {
            return Ok(goal);
        }
    }
    Err(Error::Ontology(format!("no achievable goal after {MAX_ATTEMPTS} attempts")))
}

/// Fixed binary goal encoding: per domain an active bit, one bit per
/// informable value, and one bit per requestable slot.
pub fn encode_goal(ont: &Ontology, goal: &Goal) -> Vec<f64> {
    let mut out = Vec::with_capacity(goal_dim(ont));
    for (d, dom) in ont.domains.iter().enumerate() {
        let dg = goal.get(d);
        out.push(if dg.is_some() { 1.0 } else { 0.0 });
        for (s, slot) in dom.informables.iter().enumerate() {
            let v = dg.and_then(|g| g.value_of(s));
            out.extend((0..slot.values.len()).map(|i| if v == Some(i) { 1.0 } else { 0.0 }));
        }
        for r in 0..dom.requestables.len() {
            let on = dg.is_some_and(|g| g.requests.contains(&r));
            out.push(if on { 1.0 } else { 0.0 });
        }
    }
    out
}

pub fn goal_dim(ont: &Ontology) -> usize {
    ont.domains.len() + ont.num_informable_values() + ont.num_requestables()
}
