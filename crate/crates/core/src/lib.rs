//! Natural-stream continual learning: synthetic stream generation, feature
//! file ingestion, replay memories, streaming learners and class-balanced
//! evaluation.
//!
//! Learners only ever see [`ExperienceBatch`]es; macro-experience
//! boundaries live on [`StreamView`] and are consulted by evaluation alone.

pub mod error;
pub mod eval;
pub mod ingest;
pub mod learners;
pub mod replay;
pub mod rng;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{amca, imbalance_profile, spearman, temporal_similarity_profile, EvalReport};
pub use learners::{Learner, LearnerConfig, LearnerKind, TrainHyper};
pub use replay::{MemoryPolicy, ReplayMemory};
pub use rng::{derive_seed, seeded, StreamRng};
pub use stream::{
    shuffle_stream, split_into_experiences, ExperienceBatch, MacroExperienceDescriptor, Sample, StreamView,
};
pub use synth::{balance_stream, generate_stream, preset_profile, StreamSpec};
