//! Transformer noise-prediction trunks and their parameter registry.

mod config;
mod params;
mod trunk;

pub use config::{count_params, Conditioning, ModelConfig, ModelName, SizeSpec, SIZE_GRID};
pub use params::{ParamGroup, Parameter, TrunkParameters, INIT_STD};
pub use trunk::{adaln_modulate, sinusoidal_features, ObsBatch, Trunk, LAYER_NORM_EPS};

#[cfg(test)]
mod tests;
