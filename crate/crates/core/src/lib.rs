pub mod body;
pub mod decoders;
pub mod edit;
pub mod error;
pub mod geom;
pub mod gma;
pub mod losses;
pub mod persist;
pub mod pipeline;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
