pub mod binary;
pub mod data;
pub mod effects;
pub mod error;
pub mod linalg;
pub mod mest;
pub mod pipeline;
pub mod special;
pub mod weights;
pub mod inference;
pub mod rng;
pub mod simulation;
