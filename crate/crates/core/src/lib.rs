//! Coreset sampling from a large open-set embedding pool.
//!
//! The downstream set is fingerprinted into a [`CountingBloomFilter`] keyed by
//! the sign pattern of each embedding. Open-set rows whose signature passes the
//! filter become candidates, and an exact cosine top-k over the candidates picks
//! the final budgeted coreset.
//!
//! ```
//! use bloomcoreset::{bench, sample_coreset, SamplerConfig};
//!
//! let data = bench::generate(&bench::SyntheticSpec::default()).unwrap();
//! let report = sample_coreset(&data.downstream, &data.openset, &SamplerConfig::default()).unwrap();
//! assert_eq!(report.n_selected, 100);
//! ```

pub mod bench;
pub mod cbf;
pub mod embedding_io;
pub mod error;
pub mod kernels;
pub mod murmur3;
pub mod par;
pub mod sampler;

pub use cbf::{hash_index, sized_for, CountingBloomFilter, FilterStats, HashFamily};
pub use embedding_io::{
    binarize, load_matrix, normalize, write_matrix, BitSignature, EmbeddingMatrix,
};
pub use error::{Error, Result};
pub use kernels::dot;
pub use sampler::{
    build_fingerprint, refine, sample_coreset, sample_with_filter, score, screen, Aggregation,
    CandidateSet, CoresetReport, CoresetSelection, SamplerConfig, ScoreTable, SelectedItem,
    StageTimings,
};
