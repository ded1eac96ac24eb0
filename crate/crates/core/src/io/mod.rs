pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod rawtensor;
pub mod run;
