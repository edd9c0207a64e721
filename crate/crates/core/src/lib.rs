//! Diffusion-based trajectory generation and stitching for offline RL data
//! augmentation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod envs;
pub mod eval;
pub mod generation;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stitching;
