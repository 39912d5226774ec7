//! Contact-guided denoising diffusion for generating an articulated body that
//! interacts with a given partner body.

pub mod autodiff;
pub mod body;
pub mod config;
pub mod contact;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod selftest;
