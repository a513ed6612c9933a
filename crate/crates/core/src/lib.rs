//! Whole-body trajectory tracking for mobile manipulators: a kinematic
//! predictive planner, a neural-dynamics QP solver and a terminal sliding
//! mode torque controller, plus a closed-loop simulator.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod ftcnd;
pub mod kinematics;
pub mod model;
pub mod nftsm;
pub mod pomptc;
pub mod qp;
pub mod qp_oracle;
pub mod sim;

pub use error::{Error, Result};
