//! Primitive sketch recovery from raster images with denoising set prediction.

pub mod assignment;
pub mod dataset;
pub mod denoise;
pub mod export;
pub mod geometry;
pub mod handdraw;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod scalar;
pub mod seeds;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type Graph64 = numcore::Graph<f64>;
