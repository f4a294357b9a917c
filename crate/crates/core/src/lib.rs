pub mod data;
pub mod encoders;
pub mod error;
pub mod flows;
pub mod fsutil;
pub mod statistics;
pub mod tensorfile;
pub mod optim;
pub mod synthesis;
pub mod distill;
pub mod evaluate;
pub mod theory;
pub mod viz;
pub mod config;
pub mod pipeline;
