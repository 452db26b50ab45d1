pub mod backend;
pub mod index;
pub mod model;
pub mod prompt;
pub mod detector;
pub mod compositor;
pub mod manifest;
pub mod mitigator;
pub mod human_eval;
pub mod config;
pub mod pipeline;
pub mod service;
