//! Beamspace generative channel estimation toolkit.
//!
//! This crate simulates narrowband mmWave MIMO channel estimation with hybrid
//! analog beamforming and learns a generative prior over beamspace channels
//! directly from (possibly noisy) pilot measurements. The trained generator is
//! then used to solve the compressive channel-estimation inverse problem, with
//! orthogonal matching pursuit and an EM-tuned Gaussian-mixture AMP solver as
//! classical baselines.
//!
//! The main pieces:
//!
//! * [`channel`] — synthetic cluster channels, DFT beamspace transforms and
//!   dataset normalization statistics.
//! * [`measurement`] — phase-quantized pilot triplets, Kronecker sensing
//!   matrices, stacked full-rank least-squares estimation with its exact
//!   shaped noise covariance, and coherence/rank diagnostics.
//! * [`nn`] — the generator / critic / LOS-predictor function families with
//!   hand-rolled forward, backward and gradient-penalty passes.
//! * [`training`] — Wasserstein GAN training (clipped and gradient-penalty),
//!   conditional and pilot-measurement variants, and the LOS predictor.
//! * [`federated`] — multi-user federated critic training under a link budget.
//! * [`estimation`] — latent-space generative channel estimation, NMSE
//!   scoring, OMP and EM-GM-AMP.
//! * [`dataset`] — versioned on-disk containers for channel and LS-estimate
//!   datasets plus network checkpoints.

extern crate blas_src;

pub mod channel;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod federated;
pub mod linalg;
pub mod measurement;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
