//! Stable few-shot image generation in a linear toy latent world.
//!
//! A latent code is split into a category-relevant part (the class embedding)
//! and a category-irrelevant part expressed through a learned dictionary. New
//! samples of an unseen category are drawn by estimating its embedding from a
//! few shots and adding sparse edits sampled from nearby seen categories.

pub mod adam;
pub mod cli;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod fusion;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod stable;
pub mod world;

pub use error::{Error, Result};
