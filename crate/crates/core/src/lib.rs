pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
