pub mod audit;
pub mod cli;
pub mod config;
pub mod data;
pub mod dealer;
pub mod error;
pub mod fedavg;
pub mod fss;
pub mod model;
pub mod model_io;
pub mod mpc;
pub mod ring;
pub mod secure_nn;
pub mod sharing;
pub mod simnet;
pub mod stats;
