//! K-line foundation-model toolkit: market-data cleaning, BSQ tokenization,
//! a coarse-to-fine autoregressive transformer, stochastic forecasting and an
//! evaluation harness.

pub mod ar;
mod error;
pub mod evaluation;
pub mod inference;
pub mod kline;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
