pub mod benchmark;
pub mod check;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod mdfe;
pub mod model;
pub mod plot;
pub mod sim;
pub mod tracker;
pub mod training;
