//! Tile-based biomarker prediction from H&E histopathology images.
//!
//! The pipeline has four stages: slide preprocessing (tessellation, edge QC,
//! Macenko stain normalization, resizing), tumor tile selection through a
//! nine-class tissue scorer, tile-level score prediction with one of nine
//! architecture families, and aggregation of tile scores to patient scores.
//! Evaluation uses AUROC/AUPRC with patient-level bootstrap confidence
//! intervals plus an epoch/prediction timing harness.

pub mod cohort;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod seed;
