//! MiniWOZ: a deterministic miniature task-oriented dialogue environment.

mod acts;
mod env;
mod goal;
mod ontology;

pub use acts::{ActionSpace, Slot, SystemAct, UserAct, Vocabulary, BOS, EOS};
pub use env::{
    belief_dim, decode_informed, num_user_acts, user_act_from_index, user_act_index, BeliefState, DbBucket, Env,
    EnvConfig, EnvState, Observation,
};
pub use goal::{encode_goal, goal_dim, sample_goal, DomainGoal, Goal, GoalConfig};
pub use ontology::{Domain, Entity, InformableSlot, Ontology, DEFAULT_ONTOLOGY};
