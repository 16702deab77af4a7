//! Static dialogue corpora: generation from behavior policies, sampling and
//! line-delimited storage.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialenv::{
    belief_dim, user_act_from_index, user_act_index, DomainGoal, Env, Goal, Observation, Ontology,
};
use crate::error::{Error, Result};
use crate::numerics::hex;
use crate::policy::{DialogueContext, EpsilonOracle, Policy};

pub const SCHEMA: &str = "dialcrit-corpus/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// One dialogue: `observations[t]` precedes system act `acts[t]`; the final
/// observation follows the last act.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub goal: Goal,
    pub observations: Vec<Observation>,
    pub acts: Vec<usize>,
    /// Terminal reward, which doubles as the success label.
    pub reward: f64,
    /// Whether the user closed the dialogue.
    pub complete: bool,
    pub policy: String,
}

/// A single `(s_t, a_t, s_{t+1}, r_t)` step viewed through its contexts.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub context: DialogueContext<'a>,
    pub action: usize,
    pub next: DialogueContext<'a>,
    pub reward: f64,
    pub terminal: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    pub fn success(&self) -> bool {
        self.reward == 1.0
    }

    /// Context at decision turn `t` (corpus history before `t`).
    pub fn context(&self, t: usize) -> DialogueContext<'_> {
        DialogueContext {
            goal: &self.goal,
            observations: &self.observations[..=t],
            acts: &self.acts[..t],
        }
    }

    pub fn transition(&self, t: usize) -> Transition<'_> {
        let terminal = t + 1 == self.acts.len();
        Transition {
            context: self.context(t),
            action: self.acts[t],
            next: self.context(t + 1),
            reward: if terminal { self.reward } else { 0.0 },
            terminal,
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        (0..self.acts.len()).map(|t| self.transition(t))
    }

    /// Replays the acts from the goal's initial state and checks that every
    /// recorded observation, the reward and termination are reproduced.
    pub fn replay(&self, env: &Env) -> Result<()> {
        let mut st = env.reset(self.goal.clone())?;
        let mismatch = |t: usize| Error::invalid(format!("replay diverges at turn {t}"));
        if env.observation(&st) != self.observations[0] {
            return Err(mismatch(0));
        }
        for (t, &a) in self.acts.iter().enumerate() {
            let (next, r, done) = env.step(&st, a)?;
            if env.observation(&next) != self.observations[t + 1] {
                return Err(mismatch(t + 1));
            }
            let last = t + 1 == self.acts.len();
            if done != last || (last && r != self.reward) || (!last && r != 0.0) {
                return Err(mismatch(t + 1));
            }
            st = next;
        }
        Ok(())
    }
}

/// Rolls `policy` out on `goal` until the dialogue ends.
pub fn rollout<R: Rng>(env: &Env, policy: &dyn Policy, goal: Goal, rng: &mut R) -> Result<Episode> {
    let mut st = env.reset(goal)?;
    let mut observations = vec![env.observe(&st, rng)];
    let mut acts = Vec::new();
    let reward = loop {
        let ctx = DialogueContext::new(&st.goal, &observations, &acts)?;
        let a = policy.act(&ctx, rng)?;
        let (next, r, done) = env.step(&st, a)?;
        acts.push(a);
        observations.push(env.observe(&next, rng));
        st = next;
        if done {
            break r;
        }
    };
    Ok(Episode {
        goal: st.goal,
        observations,
        acts,
        reward,
        complete: st.complete,
        policy: policy.name().to_string(),
    })
}

/// Behavior policy of graded quality: the scripted oracle with probability
/// `1 - epsilon`, a random act otherwise.
pub fn make_behavior_policy(env: &Env, epsilon: f64) -> Result<EpsilonOracle> {
    EpsilonOracle::new(env, epsilon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub ontology_hash: String,
    pub split: Split,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

/// Independent random stream for episode `index` of a generation run.
pub fn episode_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `n` episodes, drawing each episode's policy from `mix` in
/// proportion to its weight.
pub fn generate_mixed(
    env: &Env,
    mix: &[(f64, &dyn Policy)],
    n: usize,
    seed: u64,
    split: Split,
) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be positive"));
    }
    if mix.is_empty() || mix.iter().any(|(w, _)| !(*w > 0.0)) {
        return Err(Error::invalid("policy mix needs positive weights"));
    }
    let total: f64 = mix.iter().map(|(w, _)| w).sum();
    let mut episodes = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = episode_stream(seed, i as u64);
        let mut pick = rng.random::<f64>() * total;
        let mut policy = mix[mix.len() - 1].1;
        for (w, p) in mix {
            if pick < *w {
                policy = *p;
                break;
            }
            pick -= w;
        }
        let goal = env.sample_goal(&mut rng)?;
        episodes.push(rollout(env, policy, goal, &mut rng)?);
    }
    Ok(Corpus {
        ontology_hash: env.ontology().hash().to_string(),
        split,
        seed,
        episodes,
    })
}

pub fn generate_corpus(env: &Env, policy: &dyn Policy, n: usize, seed: u64, split: Split) -> Result<Corpus> {
    generate_mixed(env, &[(1.0, policy)], n, seed, split)
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.reward).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn sample_episode<'a, R: Rng + ?Sized>(&'a self, rng: &mut R) -> Result<&'a Episode> {
        if self.episodes.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        Ok(&self.episodes[rng.random_range(0..self.episodes.len())])
    }

    pub fn to_jsonl(&self, ont: &Ontology) -> Result<String> {
        let mut out = String::new();
        let header = Header {
            schema: SCHEMA.to_string(),
            ontology_hash: self.ontology_hash.clone(),
            seed: self.seed,
            split: self.split,
            episodes: self.episodes.len(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(&EpisodeRecord::from_episode(ont, e))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// SHA-256 of the serialized corpus.
    pub fn content_hash(&self, ont: &Ontology) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_jsonl(ont)?.as_bytes())))
    }

    pub fn save(&self, path: &Path, ont: &Ontology) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl(ont)?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Loads a corpus, checking the schema, the ontology hash and every
    /// episode's invariants against `env`.
    pub fn load(path: &Path, env: &Env) -> Result<Corpus> {
        let reader = BufReader::new(File::open(path)?);
        let malformed = |line: usize, message: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| malformed(1, "missing header".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
        if header.schema != SCHEMA {
            return Err(malformed(1, format!("unsupported schema `{}`", header.schema)));
        }
        if header.ontology_hash != env.ontology().hash() {
            return Err(Error::HashMismatch {
                expected: env.ontology().hash().to_string(),
                found: header.ontology_hash,
            });
        }
        let mut episodes = Vec::with_capacity(header.episodes);
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            let line = line?;
            let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| malformed(no, e.to_string()))?;
            let ep = rec.into_episode(env).map_err(|e| malformed(no, e.to_string()))?;
            episodes.push(ep);
        }
        if episodes.len() != header.episodes {
            return Err(malformed(
                episodes.len() + 2,
                format!("expected {} episodes, found {}", header.episodes, episodes.len()),
            ));
        }
        Ok(Corpus {
            ontology_hash: header.ontology_hash,
            split: header.split,
            seed: header.seed,
            episodes,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    ontology_hash: String,
    seed: u64,
    split: Split,
    episodes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainGoalRecord {
    domain: String,
    constraints: Vec<(String, String)>,
    requests: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRecord {
    user: usize,
    belief: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    policy: String,
    reward: f64,
    complete: bool,
    goal: Vec<DomainGoalRecord>,
    observations: Vec<ObservationRecord>,
    acts: Vec<usize>,
}

impl EpisodeRecord {
    fn from_episode(ont: &Ontology, e: &Episode) -> Self {
        let goal = e
            .goal
            .domains
            .iter()
            .map(|dg| {
                let dom = &ont.domains[dg.domain];
                DomainGoalRecord {
                    domain: dom.name.clone(),
                    constraints: dg
                        .constraints
                        .iter()
                        .map(|&(s, v)| {
                            let slot = &dom.informables[s];
                            (slot.name.clone(), slot.values[v].clone())
                        })
                        .collect(),
                    requests: dg.requests.iter().map(|&r| dom.requestables[r].clone()).collect(),
                }
            })
            .collect();
        let observations = e
            .observations
            .iter()
            .map(|o| ObservationRecord {
                user: user_act_index(ont, &o.user_act),
                belief: o.belief.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            })
            .collect();
        EpisodeRecord {
            policy: e.policy.clone(),
            reward: e.reward,
            complete: e.complete,
            goal,
            observations,
            acts: e.acts.clone(),
        }
    }

    fn into_episode(self, env: &Env) -> Result<Episode> {
        let ont = env.ontology();
        let mut domains = Vec::with_capacity(self.goal.len());
        for g in self.goal {
            let d = ont
                .domain_index(&g.domain)
                .ok_or_else(|| Error::invalid(format!("unknown domain `{}`", g.domain)))?;
            let dom = &ont.domains[d];
            let mut constraints = Vec::with_capacity(g.constraints.len());
            for (s, v) in &g.constraints {
                let si = dom
                    .informable_index(s)
                    .ok_or_else(|| Error::invalid(format!("unknown slot `{s}`")))?;
                let vi = dom.informables[si]
                    .values
                    .iter()
                    .position(|x| x == v)
                    .ok_or_else(|| Error::invalid(format!("unknown value `{v}`")))?;
                constraints.push((si, vi));
            }
            let requests = g
                .requests
                .iter()
                .map(|r| {
                    dom.requestable_index(r)
                        .ok_or_else(|| Error::invalid(format!("unknown requestable `{r}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            domains.push(DomainGoal {
                domain: d,
                constraints,
                requests,
            });
        }
        let goal = Goal { domains };
        goal.validate(ont)?;
        let bdim = belief_dim(ont);
        let observations = self
            .observations
            .into_iter()
            .map(|o| {
                if o.belief.len() != bdim || !o.belief.bytes().all(|b| b == b'0' || b == b'1') {
                    return Err(Error::invalid(format!("belief must be {bdim} binary digits")));
                }
                Ok(Observation {
                    user_act: user_act_from_index(ont, o.user)?,
                    belief: o.belief.bytes().map(|b| b == b'1').collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if self.acts.is_empty() || observations.len() != self.acts.len() + 1 {
            return Err(Error::invalid("episode needs acts and one more observation than acts"));
        }
        if let Some(&a) = self.acts.iter().find(|&&a| a >= env.actions().len()) {
            return Err(Error::UnknownAction(a));
        }
        if self.reward != 0.0 && self.reward != 1.0 {
            return Err(Error::invalid(format!("terminal reward {} is not 0 or 1", self.reward)));
        }
        Ok(Episode {
            goal,
            observations,
            acts: self.acts,
            reward: self.reward,
            complete: self.complete,
            policy: self.policy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialenv::EnvConfig;
    use crate::policy::ScriptedOracle;

    fn env() -> Env {
        Env::new(Ontology::miniwoz(), EnvConfig::default()).unwrap()
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let env = env();
        let p = ScriptedOracle::new(&env);
        assert!(generate_corpus(&env, &p, 0, 1, Split::Train).is_err());
    }

    #[test]
    fn oracle_episodes_are_sparse_and_replayable() {
        let env = env();
        let p = ScriptedOracle::new(&env);
        let c = generate_corpus(&env, &p, 50, 3, Split::Train).unwrap();
        for e in &c.episodes {
            assert!(e.success());
            let rewards: Vec<f64> = e.transitions().map(|t| t.reward).collect();
            assert_eq!(rewards.iter().filter(|r| **r != 0.0).count(), 1);
            assert!(e.transitions().last().unwrap().terminal);
            e.replay(&env).unwrap();
        }
    }

    #[test]
    fn empty_corpus_cannot_be_sampled() {
        let c = Corpus {
            ontology_hash: String::new(),
            split: Split::Test,
            seed: 0,
            episodes: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(c.sample_episode(&mut rng), Err(Error::Empty(_))));
    }
}
