pub mod config;
pub mod error;
pub mod fluid;
pub mod forces;
pub mod geom;
pub mod ibkernel;
pub mod mesh;
pub mod metrics;
pub mod rbfgeom;
pub mod run;
pub mod snapshot;
pub mod stepper;
pub mod study;

pub use error::{IbError, Result};
pub use geom::Vec2;
