pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod controller;
pub mod data;
pub mod gradcheck;
pub mod lstm;
pub mod memory;
pub mod model;
pub mod train;
