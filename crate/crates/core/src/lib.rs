pub mod baselines;
pub mod bp;
pub mod em;
pub mod embp;
pub mod error;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod selftest;
pub mod train;

pub use baselines::{trellis_map_detect, PilotConfig};
pub use bp::{BeliefSet, FactorTables, MessageSet};
pub use em::{make_schedule, Schedule, ScheduleKind};
pub use embp::{run_embp, EmbpResult, InitStrategy};
pub use error::{Error, Result};
pub use harness::{Detector, ExperimentConfig, ScheduleSource};
pub use model::{ChannelParams, Constellation, MatchedStats, TransmissionBlock};
pub use train::{GradientMode, Objective, TrainConfig, TrainingSet};
