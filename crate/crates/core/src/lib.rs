pub mod dataset;
pub mod distortion;
pub mod embeddings;
pub mod gradcheck;
pub mod hierarchy;
pub mod image;
pub mod metrics;
pub mod model;
pub mod tensor;
