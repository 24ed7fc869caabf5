//! Registration of partially overlapping point clouds from learned point-wise
//! features: a hierarchical encoder, graph-attention refinement, softmax
//! matching and sample-consensus pose fitting, plus a synthetic scene
//! generator and a small trainer.

// `!(x > 0.0)` also rejects NaN, which is what the parameter checks want.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod procrustes;
pub mod ransac;
pub mod scenes;
pub mod spatial;
pub mod training;

pub use error::{Error, Result, Stage};
pub use geometry::{PointCloud, RegistrationMetrics, RigidTransform, Vec3};
pub use model::{Model, ModelConfig};
pub use pipeline::{register_pair, PipelineConfig};
pub use scenes::ScenePair;
