//! Hamilton-Jacobi reachability with neural value functions whose terminal
//! condition holds exactly.

pub mod error;
pub mod grid;
pub mod io;
pub mod net;
pub mod rng;
pub mod rollout;
pub mod systems;
pub mod train;
pub mod value;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Grid, GridField};
pub use io::{Checkpoint, RunConfig, SliceSpec};
pub use net::{Adjoint, NetEval, NetParams, ParamGrad};
pub use systems::{Mode, Obstacle, SystemSpec};
pub use train::{Precision, TrainConfig};
pub use rollout::Trajectory;
pub use value::{LearnedValue, ValueEval, ValueFunction, Variant};
pub use verify::{RunRecord, VerifyConfig};
