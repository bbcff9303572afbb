pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fcr;
pub mod harness;
pub mod io;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod report;
pub mod survival;
pub mod synth;

pub use error::{Error, Result};
