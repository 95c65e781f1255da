pub mod emotion;
pub mod error;
pub mod face;
pub mod imageio;
pub mod dataset;
pub mod bayesopt;
pub mod ranking;
pub mod prefmodel;
