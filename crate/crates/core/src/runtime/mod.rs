//! Cluster runtime.

pub mod chairs;
pub mod cluster;
pub mod inbox;
pub mod iptable;
pub mod message;
pub mod streams;
pub mod window;
pub mod wire;
pub mod worker;
