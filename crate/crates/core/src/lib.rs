//! Video-grounded dialog models trained end-to-end on a synthetic corpus.
//!
//! The crate provides the full stack: a small autograd tensor engine, a
//! WordPiece-style text pipeline, per-modality encoders (text transformer,
//! 3-D conv visual backbone with transformer head, frozen audio featurizer
//! with trainable head), cross-attention fusion with an autoregressive
//! answer decoder and retrieval scoring, the training objectives for the
//! generative and retrieval tasks, generation/retrieval evaluation metrics,
//! and a deterministic synthetic video-dialog dataset generator.

pub mod seed;
pub mod text;
pub mod tensor;
