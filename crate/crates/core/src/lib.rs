pub mod data;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod maps;
pub mod rng;
pub mod net;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations.
pub type Network64 = net::Network<f64>;
pub type GaussianLogitMap64 = maps::GaussianLogitMap<f64>;
pub type Trainer64<'a> = train::Trainer<'a, f64>;

/// Single-precision instantiations.
pub type Network32 = net::Network<f32>;
pub type GaussianLogitMap32 = maps::GaussianLogitMap<f32>;
pub type Trainer32<'a> = train::Trainer<'a, f32>;
