pub mod bridge;
pub mod config;
pub mod data;
pub mod distill;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod signal;
pub mod teacher;
pub mod tensor;
