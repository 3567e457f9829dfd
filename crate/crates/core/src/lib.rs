//! Simulation of a switched, software-defined quantum key distribution
//! network: fibre topology, classical/quantum coexistence noise, BB84 link
//! estimation, key management and an event-driven controller.

pub mod channel;
pub mod fixtures;
pub mod qkd;
pub mod topology;
pub mod kms;
pub mod controller;
pub mod sim;
