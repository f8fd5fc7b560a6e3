//! Two-stage content-based image retrieval over stored CNN feature maps.
//!
//! Stage 1 ranks an index of average-pooled, L2-normalized global descriptors
//! by cosine similarity ([`search::top_k`]). Stage 2 re-scores the top
//! candidates by matching the spatial patches of the query's feature map
//! against each candidate's ([`rerank::local_score`]) and fuses the two scores
//! ([`fusion::fuse`]). A linear [`head::ProjectionHead`] trained with a
//! contrastive loss can be applied before search, and [`eval`] computes mAP@k.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
mod binio;
pub mod error;
pub mod eval;
pub mod feature;
pub mod fusion;
pub mod head;
pub mod linalg;
pub mod pipeline;
pub mod rerank;
pub mod search;
pub mod store;
pub mod synth;
pub mod tsv;

pub use error::{Error, Result};
pub use eval::{average_precision_at_k, evaluate, EvalReport};
pub use feature::{average_pool, extract_patches, l2_normalize, FeatureMap, GlobalDescriptor, PatchSet};
pub use fusion::{fuse, train_fusion, FusionModel, FusionSample, FusionTrainConfig};
pub use head::{contrastive_loss, mine_pairs, train_head, BatchSampler, ProjectionHead, TrainerConfig};
pub use rerank::{local_score, rerank, MapSource, RerankedList, ScoredPair};
pub use search::{cosine_similarity, top_k, RankedEntry, RankedList, DEFAULT_K};
pub use store::{
    build_store, load_manifest, read_feature_file, write_feature_file, DescriptorStore, Manifest, ManifestEntry, Split,
};
