//! Room-based terrain mapping for a leg-mounted sensing unit: rolling
//! elevation maps, a semantic pose graph with submaps, median room fusion,
//! step-height traversability, keyframe relocalization, evaluation tools and
//! a deterministic simulator that drives all of them.
//!
//! Raster types are generic over [`scalar::GridScalar`]; the aliases below fix
//! the common choices.

pub mod artifacts;
pub mod elevation;
pub mod evaluation;
pub mod fusion;
pub mod gridmap;
pub mod localization;
pub mod pipeline;
pub mod pointcloud;
pub mod posegraph;
pub mod scalar;
pub mod scenarios;
pub mod se3;
pub mod simworld;
pub mod trajectory;
pub mod traversability;

pub use scalar::GridScalar;

pub type Grid = gridmap::MultiLayerGrid<f64>;
pub type Grid32 = gridmap::MultiLayerGrid<f32>;
pub type Geometry = gridmap::GridGeometry<f64>;
pub type Geometry32 = gridmap::GridGeometry<f32>;
pub type ElevationMap = elevation::RollingElevationMap<f64>;
pub type ElevationMap32 = elevation::RollingElevationMap<f32>;
pub type RoomMap = fusion::RoomTerrainMap<f64>;
pub type RoomMap32 = fusion::RoomTerrainMap<f32>;
pub type ScoreMap = traversability::TraversabilityMap<f64>;
pub type ScoreMap32 = traversability::TraversabilityMap<f32>;
