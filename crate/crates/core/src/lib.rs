//! Toolkit for building composed image retrieval datasets: pair mining,
//! staged VLM captioning, caption permutation, distractor sampling and
//! retrieval evaluation.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod distractors;
pub mod embedding;
pub mod inventory;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod permute;
pub mod phash;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
