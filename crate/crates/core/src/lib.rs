pub mod data;
pub mod decompose;
pub mod diff;
pub mod graph;
pub mod config;
pub mod model;
pub mod pipeline;
pub mod train_eval;
