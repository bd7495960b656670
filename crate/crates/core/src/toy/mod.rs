//! Synthetic shapes world and a small conditional U-Net trained on it.

pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod sampling;
pub mod train;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Dtype, TrainMode};
pub use dataset::{
    class_caption, class_prior_images, decode, encode, recontext_prompts, subject_caption,
    subject_images, subject_prompt, Color, Fill, Sample, Scene, Shape, ToyDataset,
};
pub use model::{ModelConfig, Params, ToyModel};
pub use train::{finetune_dreambooth, train_base, Adam, FinetuneConfig, TrainConfig, TrainReport};
pub use vocab::{Vocabulary, IDENTIFIER, NULL_TOKEN};
pub use sampling::{generate, identifier_source, ppm_bytes, GenerateOptions, Generation, MASK_RESOLUTIONS};
