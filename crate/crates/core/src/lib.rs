//! Detection of watermark radioactivity: whether a language model was trained
//! on text produced by a watermarked generator.

pub mod dedup;
pub mod exec;
pub mod hashing;
pub mod models;
pub mod pipelines;
pub mod schemes;
pub mod stats;
