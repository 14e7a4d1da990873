//! Interaction-region video transformer for egocentric action anticipation.
//!
//! The crate is organised bottom-up: [`numerics`] is a small dense tensor
//! engine with a reverse-mode computation record; [`tokenizer`], [`roi`],
//! [`interaction`] and [`trajectory`] build the token streams; [`model`]
//! assembles the full network; [`synthdata`] generates the procedural
//! hand-object anticipation task used for training and verification.

pub mod error;
pub mod interaction;
pub mod model;
pub mod numerics;
pub mod roi;
pub mod synthdata;
pub mod tokenizer;
pub mod trajectory;

pub use error::{Error, Result};
