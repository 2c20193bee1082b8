//! Numerical laboratory for score-based diffusion on synthetic manifolds.
//!
//! The crate builds everything a desk-scale study of diffusion samplers on
//! low-dimensional data manifolds needs:
//!
//! - [`geometry`] — a zoo of embedded manifolds (circle, sphere, Clifford
//!   torus, SO(d)) with exact nearest-point projection, geodesic distances,
//!   tangent/normal frames and surface sampling;
//! - [`measures`] — Gaussian-smoothed measures on those manifolds with exact
//!   mixture densities and Monte Carlo divergence estimators (KL, chi-square,
//!   Hellinger), plus the `1/N` smoothing-rate experiment;
//! - [`nn`] — a small feed-forward score network with hand-rolled
//!   reverse-mode gradients and an AdamW loop;
//! - [`score`] — the score-field abstraction (oracle mixture, projection
//!   class, learned, perturbed) with DSM/LDSM objectives and the excess-risk
//!   identity;
//! - [`potential`] — distance potentials, the eikonal residual and class
//!   membership checks, local PCA, zero-set extraction and the PME loss;
//! - [`sampler`] — VE/VP noise schedules, reverse-time SDE, probability-flow
//!   ODE, the hybrid SDE-then-ODE sampler and annealed Langevin dynamics;
//! - [`diagnostics`] — Hausdorff/projection/drift metrics, thickened-ball
//!   coverage with its analytic lower bound, and the memorization fraction;
//! - [`config`], [`train`], [`suites`], [`plot`] — experiment presets, the
//!   training runner, the verification suites and SVG trace plots.

pub mod config;
pub mod diagnostics;
pub mod geometry;
pub mod measures;
pub mod nn;
pub mod plot;
pub mod potential;
pub mod sampler;
pub mod score;
pub mod suites;
pub mod train;
pub mod vecmath;
