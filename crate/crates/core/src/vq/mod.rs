//! Stage one: convolutional vector-quantized tokenizers for target windows
//! and their moving-average trend.

pub mod codebook;
mod loss;
mod model;
mod train;

pub use codebook::nearest_codes;
pub use loss::{
    adaptive_lambda, discriminator_loss, discriminator_loss_from_logits, gan_losses, generator_loss,
    generator_loss_from_logits, l2_reg_loss, vq_loss, VqLoss, LAMBDA_MAX, L2_EPS, LOGIT_CLAMP,
};
pub use model::{
    from_channels, to_channels, Discriminator, Tokenizer, TokenizerConfig, TokenizerPass,
};
pub use train::{
    gan_onset, train_stage1, CheckpointPolicy, Stage1Config, Stage1LogRow, Stage1Model,
    Stage1Output,
};

/// Which codebook a token sequence indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodebookKind {
    Target,
    Downsampled,
}

/// Codebook indices for one window, in time order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    pub kind: CodebookKind,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
