//! Collaborative RGB-D SLAM over anisotropic Gaussian splat maps.
//!
//! Multiple agents each track their camera against a local splat map built
//! from their own observations, while a consensus task periodically aligns
//! the agents through image-descriptor loop detection, map-to-map
//! registration, pose-graph optimization, and joint photometric map
//! refinement. A synthetic-scene module provides ground-truth worlds and
//! rendered RGB-D sequences so every stage can be verified end to end.

pub mod agent;
pub mod align;
pub mod consensus;
pub mod dataset;
pub mod descriptor;
pub mod frame;
pub mod geometry;
pub mod gradients;
pub mod map;
pub mod metrics;
pub mod pose_graph;
pub mod render;
pub mod sim;
