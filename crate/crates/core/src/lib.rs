pub mod calibrate;
pub mod cli;
pub mod coxfit;
pub mod harness;
pub mod iptw;
pub mod simgen;
pub mod statcore;
