//! Masked generative policy at desk scale: a VQ action tokenizer, a
//! conditional masked token transformer, short- and long-horizon mask-and-refine
//! samplers, toy control tasks with scripted experts, and the experiment harness.

mod binio;
pub mod env;
pub mod error;
pub mod harness;
pub mod numeric;
pub mod samplers;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
