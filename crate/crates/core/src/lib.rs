pub mod autograd;
pub mod controller;
pub mod datagen;
pub mod error;
pub mod evalbench;
pub mod experts;
pub mod fields;
pub mod io;
pub mod router;
pub mod spectral;
pub mod training;

pub use error::{M2mError, Result};
