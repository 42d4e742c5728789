//! Sample data model and the contracts with the outside world: chat
//! completion, text-to-image generation (as feature vectors), and assembly of
//! the multi-generator candidate pool.

mod chat;
pub(crate) use chat::{collides_with, fallback_tag};
mod features_io;
mod generator;
mod pool;

pub use chat::{
    chat_complete, ChatBackend, ChatRequest, HttpChat, HttpChatConfig, MockChat, RecordingChat,
    API_KEY_ENV,
};
pub use features_io::{read_features_jsonl, write_features_jsonl, FeatureRecord};
pub use generator::{
    generate_samples, mock_feature_generate, mock_real_features, Generator, HttpGenerator,
    MockGenerator, SyntheticFeatureModel,
};
pub use pool::{
    assemble_pool, CandidatePool, Concept, FeatureVector, GeneratedSample, PoolViolation,
};
