//! Layered decomposition of posed human scans into reposeable human and object layers.

pub mod compose;
pub mod config;
pub mod decompose;
pub mod error;
pub mod geom;
pub mod guidance;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod rig;
pub mod seglift;
pub mod synthetic;
pub mod tetgrid;

pub use error::{Error, Result};
pub use mesh::{merge_meshes, Label, TriMesh, Vec3};
