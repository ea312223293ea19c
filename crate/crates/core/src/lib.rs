pub mod netsim;
pub mod collector;
pub mod pipeline;
pub mod tsdb;
pub mod config;
pub mod analytics;
pub mod actioner;
pub mod system;
