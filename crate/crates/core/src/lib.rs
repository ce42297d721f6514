//! Late-interaction page retrieval and hierarchical document QA.
//!
//! The crate is organized around the lifecycle of a document-QA run:
//!
//! 1. [`ingest`] turns a PDF (or a directory of pre-rendered page images)
//!    into an ordered set of per-page PNGs and obtains their multi-vector
//!    embeddings through the model gateway.
//! 2. [`retrieval`] scores queries against page embeddings with the
//!    late-interaction (MaxSim) kernel, builds and persists the page index,
//!    and answers top-k queries. It also carries the softplus contrastive
//!    loss and its analytic gradient for desk-scale verification.
//! 3. [`gateway`] is the single abstraction over model calls: a
//!    deterministic scripted mock backend for offline runs and tests, and
//!    an OpenAI-compatible HTTP backend for real endpoints.
//! 4. [`pipeline`] runs the QA flow per question: relevance-filter the
//!    retrieved pages, decompose the question into sub-questions, and
//!    parse the structured think/answer reply.
//! 5. [`region`] optionally refines the retrieved set by cropping
//!    model-localized answer regions and swapping them in when they score
//!    strictly higher.
//! 6. [`vote`] runs the shuffled-trial voting protocol and cross-model
//!    fusion.
//! 7. [`eval`] loads benchmark datasets, orchestrates end-to-end runs, and
//!    computes the public score.

pub mod eval;
pub mod gateway;
pub mod ingest;
pub mod pipeline;
pub mod region;
pub mod retrieval;
pub mod vote;

pub use gateway::{BackendConfig, ChatRequest, ChatResponse, Gateway};
pub use retrieval::{MultiVectorEmbedding, PageIndex, RetrievalHit, TrainingBatch};
