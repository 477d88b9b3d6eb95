//! File formats, the training pipeline, the command line and the HTTP
//! modulation service built on `xdec-core`.

pub mod checkpoint;
pub mod cli;
pub mod infer;
pub mod io;
pub mod pipeline;
pub mod service;
pub mod store;
