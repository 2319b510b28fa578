//! Local, pooled-global and cluster-wise global one-hour-ahead load forecasting.
//!
//! The crate is organized around the data flow of an experiment:
//!
//! - [`series_store`]: hourly collections, splits, normalization, aggregation
//! - [`featurizer`]: supervised samples and heterogeneity indices
//! - [`models`]: ridge regression and gradient-boosted regression trees
//! - [`clustering`]: weighted k-means, model-based series clustering and
//!   importance-weighted instance clustering
//! - [`paradigms`]: training and applying local, global and cluster-wise models
//! - [`evalmetrics`]: point metrics, peak errors, drift and coherency reports
//! - [`synthgen`]: labeled synthetic load collections with drift

pub mod clustering;
pub mod evalmetrics;
pub mod featurizer;
pub mod models;
pub mod paradigms;
pub mod series_store;
pub mod synthgen;
