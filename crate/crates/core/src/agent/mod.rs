//! TD3 learner with prioritized replay.

mod adam;
mod mlp;
mod per;
mod td3;

pub use adam::Adam;
pub use mlp::{Cache, Dense, Grads, Mlp, OutputActivation};
pub use per::{PerConfig, PrioritizedReplay, SampledBatch, SumTree};
pub use td3::{critic_loss, Td3Agent, Td3Config, UpdateReport};
