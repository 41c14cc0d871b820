//! Convolutional networks in f64: layers, training, input gradients and model files.

pub mod arch;
pub mod grad;
pub mod io;
pub mod kernels;
pub mod layer;
pub mod network;
pub mod train;

pub use arch::ArchSpec;
pub use grad::{input_gradient, LossSpec};
pub use io::{load_model, model_hash, save_model};
pub use layer::{Layer, LayerSpec, Mode, ParamGrads, Params};
pub use network::Network;
pub use train::{batch_loss, evaluate, loss_gradients, softmax_cross_entropy, train, LrSchedule, TrainConfig, TrainReport};
