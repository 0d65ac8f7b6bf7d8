//! Desk-scale pipeline for domain-specializing small computer-use agents.
//!
//! The crate is organized around two stages. The generation stage runs paired
//! teacher/student rollouts in a deterministic simulated desktop, verifies
//! both, distills recurring student failures into weakness reports, and
//! synthesizes new task queries until a failure-focused task set has been
//! collected. The training stage replays teacher trajectories through the
//! student to harvest step-level preference pairs, classifies each divergence
//! as a planning- or execution-level error, builds per-token loss masks from
//! the response span structure, and optimizes a per-domain low-rank adapter on
//! a toy autoregressive policy with a masked preference objective.
//!
//! Everything is runnable hermetically: scripted policies, a programmatic
//! verifier, and deterministic stand-ins for the chat/embedding endpoints mean
//! no test or pipeline stage needs network access. Real model servers plug in
//! behind the [`gateway`] seams.
//!
//! Batch-level inner loops (paired rollouts, batch loss/gradients, diversity
//! selection) are data-parallel via rayon when the `parallel` feature is
//! enabled (the default) and fall back to sequential iteration otherwise.
//! Results are collected in input order either way, so outputs are identical
//! across both modes.

pub mod action;
pub mod config;
pub mod dpo;
pub mod gateway;
pub mod hashutil;
pub mod par;
pub mod pipeline;
pub mod prefs;
pub mod sim;
pub mod trajectory;
pub mod weakness;
