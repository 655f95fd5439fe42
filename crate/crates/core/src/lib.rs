//! Barrier-function control, feasibility prediction and the dialogue layer
//! for a simulated manipulator that negotiates tasks with its operator.

pub mod cbf;
pub mod kinematics;
pub mod qp;
pub mod world;
pub mod controller;
pub mod predictor;
pub mod intent;
pub mod decision;
