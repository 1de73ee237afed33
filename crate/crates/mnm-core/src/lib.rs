//! Two-view sparse lesion detector with cross-view attention and
//! multiple-instance learning, built on a minimal double-precision
//! reverse-mode autodiff engine.
//!
//! The crate is organized along the data path:
//!
//! - [`numerics`] — dense `f64` tensors, a recording graph, and the
//!   differentiable primitives (linear maps, softmax, layer norm,
//!   multi-head attention, dropout).
//! - [`geometry`] — box algebra: IoU, GIoU, the center-hit criterion and
//!   the delta parameterization used between refinement stages.
//! - [`synthdata`] — deterministic paired-view synthetic data with sparse
//!   malignant findings, benign distractors, a negative majority and
//!   partially withheld box annotations.
//! - [`model`] — the detector itself: small conv backbone, bilinear RoI
//!   cropping, six cascaded refinement heads with self- and cross-view
//!   attention, dual objectness/malignancy classification and MIL pooling.
//! - [`matchloss`] — Hungarian set matching, focal classification losses,
//!   GIoU + L1 regression and the indicator-gated total loss.
//! - [`metrics`] — the evaluation protocol: AP over an IoU sweep with and
//!   without negatives, FROC with center-hit scoring, R@t and ROC AUC.
//! - [`trainer`] — deterministic training loop with breast-paired batches,
//!   1:1 annotated/unannotated sampling, AdamW and step LR schedule.
//! - [`eval`] — inference orchestration feeding the metrics protocol.

pub mod eval;
pub mod geometry;
pub mod matchloss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod trainer;
