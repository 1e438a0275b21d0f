//! Semi-supervised segmentation training sandbox.
//!
//! A desk-scale, fully deterministic implementation of dual-teacher
//! semi-supervised training for pixel classification: a shared encoder with
//! student and EMA-teacher heads, consensus pseudo-labeling under a
//! confidence threshold, an attention module that generates per-sample class
//! weights, and a four-component loss with explicit gradient routing.
//! Everything runs on an in-crate f64 autodiff tape over synthetic
//! weather-degraded scenes, so every update rule is checkable by finite
//! differences and closed-form oracles.
//!
//! Start with the runnable examples (`cargo run --example train_quickstart`)
//! or the `duoseg` binary (`cargo run --bin duoseg -- train`).

pub mod checkpoint;
pub mod cli;
pub mod ema;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pseudo;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod verify;
