pub mod attention;
pub mod autograd;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod mask;
pub mod numerics;
pub mod toy;

pub use error::{Error, Result};
