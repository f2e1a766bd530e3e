//! Incremental structure-from-motion constrained by a pre-built LiDAR
//! point cloud map. Camera poses and sparse structure are recovered at
//! metric scale by augmenting bundle adjustment with point-to-plane
//! factors against the map.

pub mod association;
pub mod ba;
pub mod geometry;
pub mod map;
pub mod pipeline;
pub mod scene;
pub mod sfm;
