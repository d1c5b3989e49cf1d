//! Hysteresis-aware whole-body modelling and reinforcement-learning control
//! of a three-chamber soft continuum robot.

pub mod geometry;
pub mod plant;
pub mod dataset;
pub mod nn;
pub mod hwbnn;
pub mod actuation;
pub mod rlenv;
pub mod ppo;
