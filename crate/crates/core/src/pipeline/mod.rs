//! Encoder pretraining, the two diffusion training phases, and dual-chain
//! inference.

mod infer;
mod log;
mod train;

pub use infer::{
    check_lr_size, lr_size_multiple, predict_kernel, sample_image_chain, sample_kernel_chain, super_resolve,
    KernelPrediction, SrOutput,
};
pub use log::{LogLine, TrainLog, TRAIN_LOG_FILE};
pub use train::{
    pretrain_encoder, train_kernel_predictor, train_reconstructor, PhaseIo, StepRecord, TrainReport, TrainingData,
};
