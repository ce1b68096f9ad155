//! Synthesis pipeline for long chain-of-thought training data on
//! vision-centric multiple-choice tasks.
//!
//! The pipeline runs three generation stages (turn dense image
//! descriptions into multiple-choice questions, sample simple CoTs from a
//! VLM, then expand those CoTs with a reasoning model preconditioned on an
//! assistant prefill) and then builds SFT and preference (DPO) datasets
//! from the labeled traces. A separate harness evaluates models on
//! standardized MCQ benchmarks and produces difficulty/behavior analytics.

pub mod analyze;
pub mod config;
pub mod cotgen;
pub mod datasets;
pub mod domain;
pub mod evalharness;
pub mod expand;
pub mod manifest;
pub mod modelio;
pub mod pipeline;
pub mod qgen;
