pub mod codec;
pub mod nn;
pub mod numerics;
pub mod environment;
pub mod perception;
pub mod decision;
pub mod metrics;
pub mod config;
pub mod checks;
