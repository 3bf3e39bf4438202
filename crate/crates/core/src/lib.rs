pub mod analysis;
pub mod clock;
pub mod gateway;
pub mod graph;
pub mod hashing;
pub mod metrics;
pub mod profile;
pub mod scoring;
pub mod service;
pub mod pipeline;
