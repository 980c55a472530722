pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod train;

pub use autodiff::Array;
pub use checkpoint::{Checkpoint, EvalModel};
pub use config::TrainConfig;
pub use data::{Builtin, Dataset};
pub use error::{Error, Result};
pub use net::{Arch, CmParams, ConsistencyFn, TruncPair};
