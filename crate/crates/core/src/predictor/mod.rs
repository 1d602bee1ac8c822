//! Learned filter prediction: network, optimizer and training loop.

pub mod adam;
pub mod net;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use net::{backward, check_network_gradient, forward, init_params, NetConfig, PredictorParams, Tape};
pub use train::{infer, pair_gradient, train, train_from, Corpus, IterationLog, TrainConfig, TrainOutcome};
