// SPDX-License-Identifier: MIT OR Apache-2.0

//! Key-value credit attribution for pre-norm GPT-style transformers.

pub mod attribution;
pub mod cli;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod knockout;
pub mod model;

pub use error::{Result, UnpackError};
