pub mod config;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod segment;
pub mod spatial;
pub mod synth;
