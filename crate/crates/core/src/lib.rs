pub mod error;
pub mod linalg;
pub mod solid_model;
pub mod fluid_model;
pub mod geometry;
pub mod diagnostics;
pub mod stepper;
pub mod cli_io;
