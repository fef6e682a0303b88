//! Multi-intersection traffic signal control laboratory: a queue-based
//! simulator, a parameter-shared actor-critic controller and a latent
//! teacher-student distillation module trained jointly with PPO.

pub mod net;
pub mod sim;
pub mod obs;
pub mod numerics;
pub mod policy;
pub mod ts;
pub mod env;
pub mod trainer;
pub mod baselines;
pub mod eval;

pub use baselines::Baseline;
pub use env::{Env, EPISODE_STEPS};
pub use eval::{run_episode, summarize, Controller, EvalError, MetricsReport, MetricsTrace, PolicyController};
pub use net::{build_grid, heterogeneous_fixture, load_demand, load_network, uniform_demand, DemandSpec, NetworkSpec};
pub use numerics::{load_checkpoint, save_checkpoint, Checkpoint};
pub use obs::{ObsDims, ObservationBundle};
pub use policy::{ActionMode, PolicyDims, PolicyNet};
pub use sim::{init_sim, SimState};
pub use trainer::{LatsModel, TrainConfig, TrainError, Trainer};
pub use ts::{EmbeddingProvider, HashProvider, HttpProvider, Variant};
