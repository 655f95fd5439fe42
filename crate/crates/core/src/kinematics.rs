//! Serial-chain manipulator model: forward kinematics, analytic Jacobian and
//! the velocity-driven state update `x' = J(q) u`.
//!
//! Every joint is revolute. Joint `i` rotates about its local `axis` by `q_i`
//! and is followed by a rigid link of `length_m` along its local `direction`.
//! The end-effector is the tip of the last link; only its position is
//! controlled, so the task space is always three dimensional.

use nalgebra::{DVector, Matrix3xX, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimension of the controlled task space (end-effector position).
pub const TASK_DIM: usize = 3;

pub type JointVector = DVector<f64>;
pub type Position = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite joint velocity input")]
    NonFiniteInput,
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

/// One revolute joint followed by its rigid link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub length_m: f64,
    pub q_min_rad: f64,
    pub q_max_rad: f64,
    pub v_max_rad_s: f64,
    pub axis: Unit<Vector3<f64>>,
    pub direction: Unit<Vector3<f64>>,
}

impl Joint {
    /// Planar joint: rotation about +z, link along +x.
    pub fn planar(length_m: f64, q_min_rad: f64, q_max_rad: f64, v_max_rad_s: f64) -> Self {
        Self {
            length_m,
            q_min_rad,
            q_max_rad,
            v_max_rad_s,
            axis: Vector3::z_axis(),
            direction: Vector3::x_axis(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    joints: Vec<Joint>,
    base: Position,
}

impl RobotModel {
    pub fn new(joints: Vec<Joint>, base: Position) -> Result<Self, KinematicsError> {
        if joints.is_empty() {
            return Err(KinematicsError::InvalidModel("at least one joint is required".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            let finite = [j.length_m, j.q_min_rad, j.q_max_rad, j.v_max_rad_s]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(KinematicsError::InvalidModel(format!("joint {} has non-finite parameters", i + 1)));
            }
            if j.q_min_rad >= j.q_max_rad {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {}: q_min ({}) must be below q_max ({})",
                    i + 1,
                    j.q_min_rad,
                    j.q_max_rad
                )));
            }
            if j.v_max_rad_s <= 0.0 {
                return Err(KinematicsError::InvalidModel(format!("joint {}: velocity limit must be positive", i + 1)));
            }
            if j.length_m < 0.0 {
                return Err(KinematicsError::InvalidModel(format!("joint {}: negative link length", i + 1)));
            }
        }
        if !base.iter().all(|v| v.is_finite()) {
            return Err(KinematicsError::InvalidModel("non-finite base position".into()));
        }
        Ok(Self { joints, base })
    }

    /// Planar chain in the z = 0 plane with symmetric limits.
    pub fn planar(lengths: &[f64], q_limit: f64, v_max: f64) -> Result<Self, KinematicsError> {
        let joints = lengths.iter().map(|&l| Joint::planar(l, -q_limit, q_limit, v_max)).collect();
        Self::new(joints, Position::zeros())
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn base(&self) -> Position {
        self.base
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn task_dim(&self) -> usize {
        TASK_DIM
    }

    /// Sum of link lengths: an upper bound on the distance base → tip.
    pub fn reach(&self) -> f64 {
        self.joints.iter().map(|j| j.length_m).sum()
    }

    fn check_len(&self, len: usize) -> Result<(), KinematicsError> {
        if len != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), got: len });
        }
        Ok(())
    }

    /// Joint origins (world frame), the world-frame rotation axis of every
    /// joint, and the tip position.
    fn frames(&self, q: &JointVector) -> (Vec<Position>, Vec<Vector3<f64>>, Position) {
        let mut rot = Rotation3::identity();
        let mut p = self.base;
        let mut origins = Vec::with_capacity(self.dof());
        let mut axes = Vec::with_capacity(self.dof());
        for (joint, &qi) in self.joints.iter().zip(q.iter()) {
            origins.push(p);
            axes.push(rot * joint.axis.into_inner());
            rot *= Rotation3::from_axis_angle(&joint.axis, qi);
            p += rot * (joint.direction.into_inner() * joint.length_m);
        }
        (origins, axes, p)
    }
}

/// Task-space velocity per unit joint velocity, `3 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian(pub Matrix3xX<f64>);

impl Jacobian {
    pub fn matrix(&self) -> &Matrix3xX<f64> {
        &self.0
    }

    /// `gᵀ J` for a task-space gradient `g`.
    pub fn project(&self, gradient: &Vector3<f64>) -> DVector<f64> {
        (gradient.transpose() * &self.0).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    q: JointVector,
    qdot: JointVector,
    x: Position,
    t: f64,
}

impl RobotState {
    pub fn new(model: &RobotModel, q: JointVector, t: f64) -> Result<Self, KinematicsError> {
        let x = forward_kinematics(model, &q)?;
        let qdot = JointVector::zeros(model.dof());
        Ok(Self { q, qdot, x, t })
    }

    pub fn q(&self) -> &JointVector {
        &self.q
    }

    pub fn qdot(&self) -> &JointVector {
        &self.qdot
    }

    pub fn x(&self) -> &Position {
        &self.x
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &JointVector) -> Result<Position, KinematicsError> {
    model.check_len(q.len())?;
    Ok(model.frames(q).2)
}

/// Analytic Jacobian: column `i` is `ω_i × (x − o_i)`.
pub fn jacobian(model: &RobotModel, q: &JointVector) -> Result<Jacobian, KinematicsError> {
    model.check_len(q.len())?;
    let (origins, axes, tip) = model.frames(q);
    let mut m = Matrix3xX::zeros(model.dof());
    for (i, (o, w)) in origins.iter().zip(axes.iter()).enumerate() {
        m.set_column(i, &w.cross(&(tip - o)));
    }
    Ok(Jacobian(m))
}

/// Explicit Euler step `q⁺ = q + u·dt`.
pub fn integrate_state(
    model: &RobotModel,
    state: &RobotState,
    u: &JointVector,
    dt: f64,
) -> Result<RobotState, KinematicsError> {
    model.check_len(u.len())?;
    model.check_len(state.q.len())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(KinematicsError::BadTimeStep(dt));
    }
    if !u.iter().all(|v| v.is_finite()) {
        return Err(KinematicsError::NonFiniteInput);
    }
    let q = &state.q + u * dt;
    let x = forward_kinematics(model, &q)?;
    Ok(RobotState { q, qdot: u.clone(), x, t: state.t + dt })
}

/// Per-joint box clamp to `[-v_max·scale, v_max·scale]`.
pub fn clamp_velocity(model: &RobotModel, u: &JointVector) -> JointVector {
    clamp_velocity_scaled(model, u, 1.0)
}

pub fn clamp_velocity_scaled(model: &RobotModel, u: &JointVector, scale: f64) -> JointVector {
    JointVector::from_iterator(
        u.len(),
        u.iter().zip(model.joints.iter()).map(|(&ui, j)| {
            let v = j.v_max_rad_s * scale;
            ui.clamp(-v, v)
        }),
    )
}
