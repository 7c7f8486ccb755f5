//! Near-duplicate filtering and corpus diversity scoring.

pub mod dedup;
pub mod diversity;
pub mod rouge;

use thiserror::Error;

use crate::gateway::GatewayError;

pub use dedup::{filter_near_duplicates, DedupOutcome, Removal, RemovalLog};
pub use diversity::{
    diversity_compare, mean_cosine, mean_pairwise_cosine, DiversityComparison, DiversityOptions,
    DiversityReport, PairMode, SimilarityMatrixSpec,
};
pub use rouge::{lcs_len, rouge_l, rouge_l_text, tokenize};

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("diversity needs at least two records, got {records}")]
    EmptyCorpus { records: usize },
    #[error("diversity comparison needs at least two datasets, got {0}")]
    NotEnoughDatasets(usize),
    #[error("invalid pair specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}
