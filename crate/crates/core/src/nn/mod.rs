//! Neural-network plumbing on top of candle tensors.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{Conv2d, Linear};
pub use params::{Init, ParamGroup, ParamStore, ParamTag, TensorData};
