//! Bias-free networks trained by plain SGD with per-example recording.

pub mod checkpoint;
pub mod lstm;
pub mod mlp;
pub mod train;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_FILE};
pub use lstm::{lstm_step, lstm_train, LmStepReport, LmTrainConfig, LstmLmModel, LstmState, LstmStep, SegmentGradients};
pub use mlp::{argmax, mlp_backward, mlp_forward, sgd_step, softmax_xent, BatchTrace, ExampleTrace, MlpForward, MlpModel, MNIST_DIMS};
pub use train::{accuracy, train_mlp, StepReport};
