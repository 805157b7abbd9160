//! Latent-class trajectory subtyping: mixture linear mixed models for noisy
//! per-eye time series, class-count selection, membership stability checks,
//! and cluster characterization with GEE, odds ratios and Kaplan-Meier curves.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characterization;
pub mod cohort;
pub mod lcmm;
pub mod link;
pub mod robustness;
pub mod selection;
pub mod synthetic;
