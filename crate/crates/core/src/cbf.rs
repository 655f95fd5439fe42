//! Control barrier functions for the task stack.
//!
//! Every barrier `h` is non-negative exactly on its satisfaction region.
//! [`linearize`] turns a barrier into one row `a·q̇ ≥ b` of the control QP by
//! enforcing `ḣ + α(h) ≥ 0` with `ḣ = ∇h · q̇` (goals and obstacles are held
//! constant within a tick, so `∂h/∂t = 0`).

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, Jacobian, JointVector, Position, RobotModel, RobotState};
use crate::world::Scene;

pub const DEFAULT_RHO_POSITION: f64 = 5.0;
pub const DEFAULT_RHO_SAFETY: f64 = 10.0;
pub const DEFAULT_RHO_LIMIT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbfError {
    #[error("barrier {id}: {reason}")]
    InvalidSpec { id: BarrierId, reason: String },
    #[error("barrier {id} references unknown obstacle {obstacle:?}")]
    MissingObstacle { id: BarrierId, obstacle: String },
    #[error("barrier {id} references joint {joint} but the robot has {dof} joints")]
    MissingJoint { id: BarrierId, joint: usize, dof: usize },
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BarrierId(pub String);

impl BarrierId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn for_obstacle(obstacle: &str) -> Self {
        Self(format!("obstacle:{obstacle}"))
    }

    /// `joint` is zero-based; ids are one-based to match how operators count.
    pub fn for_joint(joint: usize) -> Self {
        Self(format!("joint:{}", joint + 1))
    }
}

impl fmt::Display for BarrierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Skills may always be relaxed by a slack; limits are hard unless the
/// relaxed problem is being solved and the limit is marked relaxable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    Skill,
    Limit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObstacleSelector {
    Nearest,
    Id(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BarrierKind {
    PositionTask { goal: Position },
    /// `dmin_floor` is the smallest margin any relaxation may grant.
    ObstacleSafety { selector: ObstacleSelector, dmin: f64, dmin_floor: f64 },
    /// Zero-based joint index.
    JointLimit { joint: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    id: BarrierId,
    kind: BarrierKind,
    gain: f64,
    relaxable: bool,
}

impl BarrierSpec {
    pub fn position_task(id: BarrierId, goal: Position, gain: f64) -> Result<Self, CbfError> {
        if !goal.iter().all(|v| v.is_finite()) {
            return Err(CbfError::InvalidSpec { id, reason: "goal must be finite".into() });
        }
        Self::checked(Self { id, kind: BarrierKind::PositionTask { goal }, gain, relaxable: false })
    }

    pub fn obstacle_safety(
        id: BarrierId,
        selector: ObstacleSelector,
        dmin: f64,
        dmin_floor: f64,
        gain: f64,
        relaxable: bool,
    ) -> Result<Self, CbfError> {
        if !(dmin > 0.0 && dmin.is_finite()) {
            return Err(CbfError::InvalidSpec { id, reason: format!("D_min must be positive, got {dmin}") });
        }
        if !(dmin_floor >= 0.0 && dmin_floor <= dmin) {
            return Err(CbfError::InvalidSpec {
                id,
                reason: format!("margin floor {dmin_floor} must lie in [0, D_min = {dmin}]"),
            });
        }
        Self::checked(Self {
            id,
            kind: BarrierKind::ObstacleSafety { selector, dmin, dmin_floor },
            gain,
            relaxable,
        })
    }

    pub fn joint_limit(joint: usize, gain: f64) -> Result<Self, CbfError> {
        Self::checked(Self {
            id: BarrierId::for_joint(joint),
            kind: BarrierKind::JointLimit { joint },
            gain,
            relaxable: false,
        })
    }

    fn checked(spec: Self) -> Result<Self, CbfError> {
        if !(spec.gain > 0.0 && spec.gain.is_finite()) {
            return Err(CbfError::InvalidSpec { id: spec.id, reason: format!("gain must be positive, got {}", spec.gain) });
        }
        Ok(spec)
    }

    pub fn id(&self) -> &BarrierId {
        &self.id
    }

    pub fn kind(&self) -> &BarrierKind {
        &self.kind
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn relaxable(&self) -> bool {
        self.relaxable
    }

    pub fn category(&self) -> Category {
        match self.kind {
            BarrierKind::PositionTask { .. } => Category::Skill,
            _ => Category::Limit,
        }
    }

    pub fn goal(&self) -> Option<Position> {
        match self.kind {
            BarrierKind::PositionTask { goal } => Some(goal),
            _ => None,
        }
    }

    /// Largest slack `η` this limit may ever receive: zero for hard limits,
    /// and for obstacle margins the slack at which the effective margin
    /// reaches its floor.
    pub fn relaxation_ceiling(&self) -> f64 {
        match (&self.kind, self.relaxable) {
            (BarrierKind::ObstacleSafety { dmin, dmin_floor, .. }, true) => {
                self.gain * (dmin * dmin - dmin_floor * dmin_floor)
            }
            _ => 0.0,
        }
    }

    /// Margin enforced when the safety row is loosened by a constant `η`:
    /// `ρ(d² − D²) ≥ −η` ⇔ `d ≥ √(D² − η/ρ)`.
    pub fn effective_dmin(&self, eta: f64) -> Option<f64> {
        match self.kind {
            BarrierKind::ObstacleSafety { dmin, .. } => Some((dmin * dmin - eta / self.gain).max(0.0).sqrt()),
            _ => None,
        }
    }
}

/// Extended class-K function applied to `h` in the barrier condition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum ClassK {
    #[default]
    Identity,
    Linear(f64),
    Cubic,
}

impl ClassK {
    pub fn apply(&self, h: f64) -> f64 {
        match *self {
            ClassK::Identity => h,
            ClassK::Linear(k) => k * h,
            ClassK::Cubic => h * h * h,
        }
    }
}

pub fn class_k(h: f64) -> f64 {
    ClassK::Identity.apply(h)
}

/// `h = −ρ‖x − x_goal‖²`
pub fn eval_position_cbf(x: &Position, goal: &Position, rho: f64) -> f64 {
    -rho * (x - goal).norm_squared()
}

/// `h = ρ(‖x − x_obs‖² − D²)`
pub fn eval_safety_cbf(x: &Position, obstacle: &Position, dmin: f64, rho: f64) -> f64 {
    rho * ((x - obstacle).norm_squared() - dmin * dmin)
}

/// `h = ρ(q⁺ − q)(q − q⁻)/(q⁺ − q⁻)`
pub fn eval_joint_limit_cbf(q: f64, q_minus: f64, q_plus: f64, rho: f64) -> f64 {
    rho * (q_plus - q) * (q - q_minus) / (q_plus - q_minus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlackKind {
    Skill,
    Limit,
}

/// One linearized barrier: `a·q̇ (+ slack) ≥ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub a: DVector<f64>,
    pub b: f64,
    pub h: f64,
    pub slack: Option<SlackKind>,
    pub source: BarrierId,
}

fn obstacle_position(spec: &BarrierSpec, selector: &ObstacleSelector, scene: &Scene, x: &Position, t: f64) -> Result<Option<Position>, CbfError> {
    match selector {
        ObstacleSelector::Nearest => Ok(crate::world::nearest_obstacle(scene, x, t).map(|n| n.position)),
        ObstacleSelector::Id(name) => scene
            .obstacle_position(name, t)
            .map(Some)
            .ok_or_else(|| CbfError::MissingObstacle { id: spec.id.clone(), obstacle: name.clone() }),
    }
}

fn joint_bounds(spec: &BarrierSpec, model: &RobotModel, joint: usize) -> Result<(f64, f64), CbfError> {
    model
        .joints()
        .get(joint)
        .map(|j| (j.q_min_rad, j.q_max_rad))
        .ok_or(CbfError::MissingJoint { id: spec.id.clone(), joint: joint + 1, dof: model.dof() })
}

/// Barrier value at configuration `q` and time `t`. `None` when the barrier
/// has nothing to act on (nearest-obstacle selector in an empty scene).
pub fn barrier_value(spec: &BarrierSpec, model: &RobotModel, q: &JointVector, scene: &Scene, t: f64) -> Result<Option<f64>, CbfError> {
    match &spec.kind {
        BarrierKind::PositionTask { goal } => {
            let x = forward_kinematics(model, q)?;
            Ok(Some(eval_position_cbf(&x, goal, spec.gain)))
        }
        BarrierKind::ObstacleSafety { selector, dmin, .. } => {
            let x = forward_kinematics(model, q)?;
            Ok(obstacle_position(spec, selector, scene, &x, t)?.map(|o| eval_safety_cbf(&x, &o, *dmin, spec.gain)))
        }
        BarrierKind::JointLimit { joint } => {
            let (lo, hi) = joint_bounds(spec, model, *joint)?;
            Ok(Some(eval_joint_limit_cbf(q[*joint], lo, hi, spec.gain)))
        }
    }
}

/// Linearize a barrier at `state` into a QP row. `jac` must be evaluated at
/// `state.q()`. A slack is attached to every skill, and to relaxable limits
/// when `relax_mode` is set.
pub fn linearize(
    spec: &BarrierSpec,
    model: &RobotModel,
    state: &RobotState,
    scene: &Scene,
    jac: &Jacobian,
    relax_mode: bool,
    alpha: ClassK,
) -> Result<Option<ConstraintRow>, CbfError> {
    let x = state.x();
    let (a, h) = match &spec.kind {
        BarrierKind::PositionTask { goal } => {
            let grad = -2.0 * spec.gain * (x - goal);
            (jac.project(&grad), eval_position_cbf(x, goal, spec.gain))
        }
        BarrierKind::ObstacleSafety { selector, dmin, .. } => {
            let Some(obs) = obstacle_position(spec, selector, scene, x, state.t())? else {
                return Ok(None);
            };
            let grad = 2.0 * spec.gain * (x - obs);
            (jac.project(&grad), eval_safety_cbf(x, &obs, *dmin, spec.gain))
        }
        BarrierKind::JointLimit { joint } => {
            let (lo, hi) = joint_bounds(spec, model, *joint)?;
            let qi = state.q()[*joint];
            let mut a = DVector::zeros(model.dof());
            a[*joint] = spec.gain * (hi + lo - 2.0 * qi) / (hi - lo);
            (a, eval_joint_limit_cbf(qi, lo, hi, spec.gain))
        }
    };
    let slack = match spec.category() {
        Category::Skill => Some(SlackKind::Skill),
        Category::Limit if relax_mode && spec.relaxable => Some(SlackKind::Limit),
        Category::Limit => None,
    };
    // b = −∂h/∂t − α(h), with ∂h/∂t = 0
    Ok(Some(ConstraintRow { a, b: -alpha.apply(h), h, slack, source: spec.id.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::jacobian;
    use crate::world::{Obstacle, Scene};

    #[test]
    fn position_barrier_values() {
        let g = Position::new(1.0, 2.0, 3.0);
        assert_eq!(eval_position_cbf(&g, &g, 5.0), 0.0);
        let x = Position::new(2.0, 2.0, 3.0);
        assert_eq!(eval_position_cbf(&x, &g, 5.0), -5.0);
    }

    #[test]
    fn safety_barrier_values() {
        let o = Position::zeros();
        assert!((eval_safety_cbf(&Position::new(1.0, 0.0, 0.0), &o, 0.5, 10.0) - 7.5).abs() < 1e-15);
        assert_eq!(eval_safety_cbf(&Position::new(0.0, 0.5, 0.0), &o, 0.5, 10.0), 0.0);
        assert!(eval_safety_cbf(&Position::new(0.0, 0.2, 0.0), &o, 0.5, 10.0) < 0.0);
    }

    #[test]
    fn joint_limit_values() {
        assert_eq!(eval_joint_limit_cbf(1.0, -1.0, 1.0, 1.0), 0.0);
        assert_eq!(eval_joint_limit_cbf(0.0, -1.0, 1.0, 1.0), 0.5);
        assert!(eval_joint_limit_cbf(1.1, -1.0, 1.0, 1.0) < 0.0);
        assert!(eval_joint_limit_cbf(-1.1, -1.0, 1.0, 1.0) < 0.0);
    }

    #[test]
    fn identity_class_k() {
        assert_eq!(class_k(0.0), 0.0);
        assert_eq!(class_k(7.5), 7.5);
        assert_eq!(ClassK::Cubic.apply(0.0), 0.0);
    }

    #[test]
    fn spec_invariants() {
        let task = BarrierSpec::position_task(BarrierId::new("goal"), Position::zeros(), 5.0).unwrap();
        assert_eq!(task.category(), Category::Skill);
        assert!(!task.relaxable());
        let lim = BarrierSpec::joint_limit(2, 1.0).unwrap();
        assert_eq!(lim.category(), Category::Limit);
        assert_eq!(lim.id().as_str(), "joint:3");
        assert!(!lim.relaxable());
        assert!(BarrierSpec::joint_limit(0, 0.0).is_err());
        assert!(BarrierSpec::obstacle_safety(BarrierId::new("o"), ObstacleSelector::Nearest, 0.0, 0.0, 10.0, true).is_err());
        assert!(BarrierSpec::obstacle_safety(BarrierId::new("o"), ObstacleSelector::Nearest, 0.5, 0.6, 10.0, true).is_err());
    }

    #[test]
    fn relaxation_ceiling_and_effective_margin() {
        let s = BarrierSpec::obstacle_safety(BarrierId::new("o"), ObstacleSelector::Nearest, 0.5, 0.1, 10.0, true).unwrap();
        let ceiling = s.relaxation_ceiling();
        assert!((ceiling - 10.0 * (0.25 - 0.01)).abs() < 1e-12);
        assert!((s.effective_dmin(ceiling).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(s.effective_dmin(0.0), Some(0.5));
        let eta = 10.0 * (0.25 - 0.09);
        assert!((s.effective_dmin(eta).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(BarrierSpec::joint_limit(0, 1.0).unwrap().relaxation_ceiling(), 0.0);
    }

    #[test]
    fn satisfied_task_row_allows_rest() {
        let model = RobotModel::planar(&[1.0, 1.0], 3.0, 1.0).unwrap();
        let state = RobotState::new(&model, JointVector::from_vec(vec![0.3, 0.4]), 0.0).unwrap();
        let spec = BarrierSpec::position_task(BarrierId::new("goal"), *state.x(), 5.0).unwrap();
        let j = jacobian(&model, state.q()).unwrap();
        let row = linearize(&spec, &model, &state, &Scene::default(), &j, false, ClassK::Identity).unwrap().unwrap();
        assert_eq!(row.b, 0.0);
        assert_eq!(row.slack, Some(SlackKind::Skill));
    }

    #[test]
    fn joint_limit_row_has_single_entry() {
        let model = RobotModel::planar(&[1.0, 1.0, 1.0], 2.0, 1.0).unwrap();
        let state = RobotState::new(&model, JointVector::from_vec(vec![0.1, 0.7, -0.2]), 0.0).unwrap();
        let spec = BarrierSpec::joint_limit(1, 1.0).unwrap();
        let j = jacobian(&model, state.q()).unwrap();
        let row = linearize(&spec, &model, &state, &Scene::default(), &j, true, ClassK::Identity).unwrap().unwrap();
        assert_eq!(row.a[0], 0.0);
        assert_eq!(row.a[2], 0.0);
        assert!((row.a[1] - (2.0 + -2.0 - 1.4) / 4.0).abs() < 1e-15);
        assert_eq!(row.slack, None, "joint limits are never relaxed");
    }

    #[test]
    fn relaxable_limit_gets_slack_only_in_relax_mode() {
        let model = RobotModel::planar(&[1.0, 1.0], 3.0, 1.0).unwrap();
        let state = RobotState::new(&model, JointVector::from_vec(vec![0.3, 0.4]), 0.0).unwrap();
        let scene = Scene::with_obstacles(vec![Obstacle::fixed("box", Position::new(0.0, 1.5, 0.0))]);
        let spec = BarrierSpec::obstacle_safety(BarrierId::for_obstacle("box"), ObstacleSelector::Id("box".into()), 0.5, 0.1, 10.0, true).unwrap();
        let j = jacobian(&model, state.q()).unwrap();
        let nominal = linearize(&spec, &model, &state, &scene, &j, false, ClassK::Identity).unwrap().unwrap();
        let relaxed = linearize(&spec, &model, &state, &scene, &j, true, ClassK::Identity).unwrap().unwrap();
        assert_eq!(nominal.slack, None);
        assert_eq!(relaxed.slack, Some(SlackKind::Limit));
        assert_eq!(nominal.a, relaxed.a);
    }

    #[test]
    fn missing_obstacle_is_a_configuration_error() {
        let model = RobotModel::planar(&[1.0], 3.0, 1.0).unwrap();
        let state = RobotState::new(&model, JointVector::zeros(1), 0.0).unwrap();
        let spec = BarrierSpec::obstacle_safety(BarrierId::for_obstacle("ghost"), ObstacleSelector::Id("ghost".into()), 0.5, 0.1, 10.0, true).unwrap();
        let j = jacobian(&model, state.q()).unwrap();
        let err = linearize(&spec, &model, &state, &Scene::default(), &j, false, ClassK::Identity).unwrap_err();
        assert!(matches!(err, CbfError::MissingObstacle { .. }));
        let nearest = BarrierSpec::obstacle_safety(BarrierId::new("near"), ObstacleSelector::Nearest, 0.5, 0.1, 10.0, true).unwrap();
        assert!(linearize(&nearest, &model, &state, &Scene::default(), &j, false, ClassK::Identity).unwrap().is_none());
    }
}
