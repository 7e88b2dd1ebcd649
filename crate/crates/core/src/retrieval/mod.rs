//! Inference-side search: PCA compression, exact kNN and sequence matching.

mod index;
mod pca;
mod seqmatch;

pub use index::{memory_estimate_bytes, Neighbor, RetrievalIndex, INDEX_MAGIC};
pub use pca::{pca_fit, PcaModel, WHITEN_EPS};
pub use seqmatch::{rank_by_sequence_matching, seq_match_score, SeqMatch, SimilarityMatrix, DEFAULT_VELOCITIES};
