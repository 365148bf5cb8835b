//! Filter-resistant face recognition and facial attribute analysis.
//!
//! `ffsense` trains a residual CNN face recognizer on datasets of baseline
//! and filtered face images, reuses its trunk as a feature extractor for
//! age, gender, and ethnicity heads, and quantifies per-filter damage:
//! identity-distribution distortion distances with breaking verdicts, age
//! deviation statistics, and gender/ethnicity misprediction tables.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`dataset`]: JSONL manifest loading, validation, reproducible
//!   train/test splitting, and baseline/filtered pairing.
//! - [`nets`]: declarative network construction, inference, and
//!   checkpointing for the recognizer and the attribute heads.
//! - [`train`]: end-to-end identity training and attribute-head training
//!   on frozen extracted features.
//! - [`metrics`]: pure evaluation formulas — classification/regression
//!   reports, normalized-distribution distances, age deviations,
//!   misprediction tables, confusion matrices.
//! - [`report`]: deterministic markdown/CSV/text rendering of every
//!   analysis product plus per-filter usability verdicts.
//! - [`cli`]: the `ffsense` command pipeline
//!   (validate → split → train → predict → analyze → report).
//! - [`synthetic`]: generators for the synthetic datasets and canned
//!   prediction dumps used by the test suites and the quickstart.

pub mod cli;
pub mod dataset;
pub mod metrics;
pub mod nets;
pub mod report;
pub mod synthetic;
pub mod train;
