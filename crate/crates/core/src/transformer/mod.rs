//! Stage-two prior: a history encoder, an autoregressive trend-token
//! decoder and a target-token decoder that also attends to the trend tokens.

pub mod continuous;
pub mod layers;
mod model;
mod train;

pub use continuous::{
    forecast_continuous, prepare_continuous, train_continuous, ContinuousConfig, ContinuousData,
    ContinuousOutput, ContinuousPrior,
};
pub use model::{ContextEncoder, DecodeState, HdtPrior, PriorConfig, TokenDecoder};
pub use train::{
    prepare_stage2, train_stage2, SelfCondSource, Stage2Config, Stage2Data, Stage2LogRow, Stage2Output,
};

