//! Next-scale autoregressive generator: teacher-forced training over token
//! pyramids with a block-wise causal mask and AdaLN conditioning, and cached
//! coarse-to-fine generation with token-wise adaptive-temperature sampling
//! and moving-average smoothing.

pub mod forward;
pub mod generate;
pub mod mask;
pub mod model;
pub mod sampling;
pub mod train;

pub use forward::{build_teacher_inputs, cond_embedding, star_forward, star_loss};
pub use generate::{
    generate, generate_tokenwise_ablation, generate_with_logits, recompute_logits_full,
    GenerationTrace,
};
pub use mask::{blockwise_mask, mask_to_bias};
pub use model::{AdaLnLayer, SamplerConfig, StarConfig, StarError, StarModel};
pub use sampling::{moving_average_smooth, sample_token, tokenwise_temperatures};
pub use train::{
    prepare_star_samples, sample_condition, train_star, StarEpochLog, StarTrainConfig,
};
