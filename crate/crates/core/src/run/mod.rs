//! Training schedules, configuration and persistence.

mod config;
mod state;
mod train;

pub use config::RunConfig;
pub use state::RunState;
pub use train::{
    map_image, pretrain, train_agent, train_joint, MapOutput, TrainedAgent, TrainedJoint, SCA_AGENT,
    SCA_JOINT, SEG_JOINT, SEG_PRETRAIN,
};
