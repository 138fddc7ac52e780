pub mod attention;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod mtam;
pub mod nn;
pub mod perceiver;
pub mod checkpoint;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;
pub mod experiments;
