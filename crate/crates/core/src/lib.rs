//! Universal adversarial perturbations against prompt-guided segmenters.
//!
//! The main entry points are [`train_uap_cl`] (contrastive, perturbation-centric
//! optimization), [`run_baseline`] (image-centric mask-removal attack) and
//! [`evaluate_uap`] (clean vs adversarial mIoU).

pub mod augment;
pub mod baseline;
pub mod cl_attack;
mod container;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod membank;
pub mod ops;
pub mod optim;
pub mod par;
pub mod synth;
pub mod types;
pub mod uapfile;

use sha2::{Digest, Sha256};

pub use augment::{apply_augmentation, AugmentDraw, AugmentKind, AugmentSpec};
pub use baseline::{
    attack_image_agnostic, attack_image_dependent, mask_removal_loss, run_baseline, BaselineConfig, BaselineMode,
    BaselineObjective,
};
pub use cl_attack::{infonce_loss, infonce_loss_grad, train_uap_cl, ClConfig, TrainOutcome};
pub use corpus::{ingest_corpus, Corpus, CorpusImage};
pub use encoders::{embed, FeatureMap, ImageEncoder, Segmenter, SegmenterHandle};
pub use error::{Result, UapError};
pub use eval::{cosine_analysis, emit_overlays, evaluate_uap, random_noise_baseline, sweep, EvalConfig, EvalReport};
pub use membank::{build_membank, load_membank, sample_negatives, save_membank, MemoryBank};
pub use ops::{binarize_mask, clamp_pixels, cosine_similarity, iou, l2_normalize, linf_project};
pub use types::{BinaryMask, Embedding, ImageTensor, MaskLogits, Prompt, PromptKind, Uap, DEFAULT_EPSILON};
pub use uapfile::{load_uap, save_uap};

/// Hex SHA-256 of a serialized config.
pub fn config_hash(json: &str) -> String {
    encoders::hex_digest(&Sha256::digest(json.as_bytes()))
}
