//! Intent-aware models of team behaviour and a task-time coaching engine.

pub mod btil;
pub mod coach;
pub mod domains;
pub mod error;
pub mod filter;
pub mod harness;
pub mod io;
pub mod random;
pub mod scalar;
pub mod session;
pub mod table;
pub mod task;
pub mod team;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TaskModelF64 = task::TaskModel<f64>;
pub type TaskModelF32 = task::TaskModel<f32>;
pub type TeamModelF64 = team::TeamModel<f64>;
pub type TeamModelF32 = team::TeamModel<f32>;
pub type AgentBehaviorModelF64 = team::AgentBehaviorModel<f64>;
pub type AgentBehaviorModelF32 = team::AgentBehaviorModel<f32>;
pub type ProbTableF64 = table::ProbTable<f64>;
pub type ProbTableF32 = table::ProbTable<f32>;
pub type BeliefStateF64 = filter::BeliefState<f64>;
pub type BeliefStateF32 = filter::BeliefState<f32>;
