//! Joint learning of multi-contrast k-space sampling, recurrent reconstruction
//! and T2* mapping on synthetic phantoms.

pub mod budget;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod kspace;
pub mod maskgen;
pub mod metrics;
pub mod phantom;
pub mod recon;
pub mod t2star;
pub mod trainer;

pub use error::{Error, Result};
