//! Text-independent speaker identification on emotional speech with capsule
//! networks.
//!
//! The pipeline runs audio through an MFCC front end ([`dsp`]), feeds the
//! resulting 40-row feature matrices to a capsule network with dynamic routing
//! ([`models`]) built on a small reverse-mode differentiation engine
//! ([`autodiff`]), trains on neutral speech only ([`trainer`]) and scores the
//! result per emotion ([`evaluator`]).

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod evaluator;
pub mod models;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
