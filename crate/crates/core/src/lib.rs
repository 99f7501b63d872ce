//! Desk-scale drone-racing workbench: quadrotor simulation, FPV rendering,
//! gaze-attention maps, feature tracking, and an MPC expert for generating
//! control labels.

pub mod gaze;
pub mod mpc;
pub mod render;
pub mod seed;
pub mod sim;
pub mod tracks;
