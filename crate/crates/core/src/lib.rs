//! Forecasting daily heat production of a photovoltaic-thermal collector from
//! weather data, as a per-window classification into production classes.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod ingestion;
pub mod models;
pub mod nn;
pub mod quantization;
pub mod report;
pub mod synthetic;
pub mod time_encoding;
pub mod training;

pub use error::{Error, Result};
