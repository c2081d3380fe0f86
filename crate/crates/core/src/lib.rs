//! Cross-domain recommendation with matrix factorization, fixed multimodal
//! side features and adversarial embedding alignment.
//!
//! A typical run loads interactions and feature files ([`ingestion`]),
//! fuses textual and visual features ([`fusion`]), pre-trains one CF model
//! per domain ([`cf`]), aligns the two with domain classifiers
//! ([`adapter`]) and scores the target domain ([`evaluation`]).

pub mod adapter;
pub mod cf;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod ingestion;
pub mod optimizer;
pub mod pipeline;
pub mod synth;
mod textio;

pub use data::{
    concat_representation, AdaptationConfig, CfModel, Domain, DomainClassifier, EntityKind,
    FeatureKind, FeatureMatrix, InteractionSet, RepresentationDims, SideFeatures, Variant,
};
pub use error::{Error, Result};
