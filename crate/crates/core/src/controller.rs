//! The live control loop: a stack of skills and limits, turned into one QP
//! per tick.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{self, BarrierId, BarrierKind, BarrierSpec, Category, CbfError, ClassK, SlackKind};
use crate::kinematics::{self, JointVector, KinematicsError, RobotModel, RobotState};
use crate::qp::{self, Bound, QpProblem, QpRow, QpStatus, SlackWeights};
use crate::world::Scene;

pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("a position task ({active}) is already active")]
    Conflict { active: BarrierId },
    #[error("no barrier with id {0}")]
    UnknownBarrier(BarrierId),
    #[error("duplicate barrier id {0}")]
    DuplicateId(BarrierId),
    #[error("{0} is not a {1:?} barrier")]
    WrongCategory(BarrierId, Category),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("speed scale must lie in (0, 1], got {0}")]
    BadSpeedScale(f64),
    #[error("cap for {0} must be finite and non-negative")]
    BadCap(BarrierId),
    #[error(transparent)]
    Barrier(#[from] CbfError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub spec: BarrierSpec,
    pub epsilon: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limit {
    pub spec: BarrierSpec,
    /// Upper bound on this limit's slack in relaxed mode.
    pub cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Every limit is hard.
    Nominal,
    /// Relaxable limits with a positive cap get a bounded slack.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStack {
    skills: Vec<Skill>,
    limits: Vec<Limit>,
    mode: Mode,
    speed_scale: f64,
    v_max_scale: f64,
    weights: SlackWeights,
    alpha: ClassK,
}

impl TaskStack {
    /// Weights are `l` for skill slacks and `l_eta` for limit slacks.
    pub fn new(l: f64, l_eta: f64) -> Self {
        Self {
            skills: Vec::new(),
            limits: Vec::new(),
            mode: Mode::Nominal,
            speed_scale: 1.0,
            v_max_scale: 1.0,
            weights: SlackWeights { skill: l, limit: l_eta },
            alpha: ClassK::Identity,
        }
    }

    pub fn skills(&self) -> &[Skill] {
        &self.skills
    }

    pub fn limits(&self) -> &[Limit] {
        &self.limits
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn speed_scale(&self) -> f64 {
        self.speed_scale
    }

    pub fn weights(&self) -> SlackWeights {
        self.weights
    }

    pub fn set_weights(&mut self, weights: SlackWeights) {
        self.weights = weights;
    }

    pub fn set_alpha(&mut self, alpha: ClassK) {
        self.alpha = alpha;
    }

    pub fn set_speed_scale(&mut self, s: f64) -> Result<(), ControllerError> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(ControllerError::BadSpeedScale(s));
        }
        self.speed_scale = s;
        Ok(())
    }

    /// Global multiplier on every joint's velocity bound.
    pub fn set_v_max_scale(&mut self, s: f64) -> Result<(), ControllerError> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(ControllerError::BadSpeedScale(s));
        }
        self.v_max_scale = s;
        Ok(())
    }

    pub fn velocity_scale(&self) -> f64 {
        self.speed_scale * self.v_max_scale
    }

    fn contains(&self, id: &BarrierId) -> bool {
        self.skills.iter().any(|s| s.spec.id() == id) || self.limits.iter().any(|l| l.spec.id() == id)
    }

    pub fn add_skill(&mut self, spec: BarrierSpec, epsilon: f64, label: impl Into<String>) -> Result<(), ControllerError> {
        if spec.category() != Category::Skill {
            return Err(ControllerError::WrongCategory(spec.id().clone(), Category::Skill));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ControllerError::BadTolerance(epsilon));
        }
        if let Some(active) = self.skills.iter().find(|s| matches!(s.spec.kind(), BarrierKind::PositionTask { .. })) {
            return Err(ControllerError::Conflict { active: active.spec.id().clone() });
        }
        if self.contains(spec.id()) {
            return Err(ControllerError::DuplicateId(spec.id().clone()));
        }
        self.skills.push(Skill { spec, epsilon, label: label.into() });
        Ok(())
    }

    pub fn remove_skill(&mut self, id: &BarrierId) -> Result<Skill, ControllerError> {
        let i = self.skills.iter().position(|s| s.spec.id() == id).ok_or_else(|| ControllerError::UnknownBarrier(id.clone()))?;
        Ok(self.skills.remove(i))
    }

    pub fn clear_skills(&mut self) {
        self.skills.clear();
    }

    pub fn add_limit(&mut self, spec: BarrierSpec) -> Result<(), ControllerError> {
        if spec.category() != Category::Limit {
            return Err(ControllerError::WrongCategory(spec.id().clone(), Category::Limit));
        }
        if self.contains(spec.id()) {
            return Err(ControllerError::DuplicateId(spec.id().clone()));
        }
        self.limits.push(Limit { spec, cap: 0.0 });
        Ok(())
    }

    pub fn remove_limit(&mut self, id: &BarrierId) -> Result<Limit, ControllerError> {
        let i = self.limits.iter().position(|l| l.spec.id() == id).ok_or_else(|| ControllerError::UnknownBarrier(id.clone()))?;
        Ok(self.limits.remove(i))
    }

    /// One limit per joint, ids `joint:1 … joint:n`.
    pub fn add_joint_limits(&mut self, model: &RobotModel, rho: f64) -> Result<(), ControllerError> {
        for j in 0..model.dof() {
            self.add_limit(BarrierSpec::joint_limit(j, rho)?)?;
        }
        Ok(())
    }

    /// Back to hard limits: every cap is zero.
    pub fn set_nominal(&mut self) {
        self.mode = Mode::Nominal;
        for l in &mut self.limits {
            l.cap = 0.0;
        }
    }

    /// Relaxed mode with the given caps. Caps are clamped to each limit's
    /// relaxation ceiling; limits not named keep a zero cap.
    pub fn grant_caps(&mut self, caps: &BTreeMap<BarrierId, f64>) -> Result<(), ControllerError> {
        for (id, cap) in caps {
            if !(cap.is_finite() && *cap >= 0.0) {
                return Err(ControllerError::BadCap(id.clone()));
            }
            if !self.limits.iter().any(|l| l.spec.id() == id) {
                return Err(ControllerError::UnknownBarrier(id.clone()));
            }
        }
        self.mode = Mode::Relaxed;
        for l in &mut self.limits {
            l.cap = caps.get(l.spec.id()).map_or(0.0, |c| c.min(l.spec.relaxation_ceiling()));
        }
        Ok(())
    }

    /// Relaxed mode with every relaxable limit capped only by its ceiling.
    pub fn set_free_relaxation(&mut self) {
        self.mode = Mode::Relaxed;
        for l in &mut self.limits {
            l.cap = l.spec.relaxation_ceiling();
        }
    }

    pub fn caps(&self) -> BTreeMap<BarrierId, f64> {
        self.limits.iter().filter(|l| l.cap > 0.0).map(|l| (l.spec.id().clone(), l.cap)).collect()
    }

    /// Drops every skill satisfied at `state` and returns them.
    pub fn prune_completed(&mut self, state: &RobotState) -> Vec<Skill> {
        let (done, open): (Vec<Skill>, Vec<Skill>) =
            std::mem::take(&mut self.skills).into_iter().partition(|s| task_satisfied(&s.spec, state, s.epsilon));
        self.skills = open;
        done
    }

    pub fn all_satisfied(&self, state: &RobotState) -> bool {
        self.skills.iter().all(|s| task_satisfied(&s.spec, state, s.epsilon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickDiagnostics {
    pub t: f64,
    pub status: QpStatus,
    /// True when the solve failed and zero velocity was applied.
    pub flagged: bool,
    pub u: Vec<f64>,
    pub h: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
    pub eta: BTreeMap<String, f64>,
    pub iterations: usize,
}

/// `|h| < ε` for a skill at `state`. Non-position skills are never
/// considered satisfied.
pub fn task_satisfied(skill: &BarrierSpec, state: &RobotState, epsilon: f64) -> bool {
    match skill.kind() {
        BarrierKind::PositionTask { goal } => cbf::eval_position_cbf(state.x(), goal, skill.gain()).abs() < epsilon,
        _ => false,
    }
}

/// Current `|h|` of a position skill.
pub fn skill_residual(skill: &BarrierSpec, state: &RobotState) -> Option<f64> {
    skill.goal().map(|g| cbf::eval_position_cbf(state.x(), &g, skill.gain()).abs())
}

/// Builds and solves the tick's QP and returns the clamped joint velocity.
pub fn control_step(
    stack: &TaskStack,
    model: &RobotModel,
    state: &RobotState,
    scene: &Scene,
) -> Result<(JointVector, TickDiagnostics), ControllerError> {
    let jac = kinematics::jacobian(model, state.q())?;
    let relax = stack.mode == Mode::Relaxed;
    let mut problem = QpProblem::new(model.dof());
    problem.weights = stack.weights;
    let scale = stack.velocity_scale();
    problem.vel_bounds = model.joints().iter().map(|j| Bound::symmetric(j.v_max_rad_s * scale)).collect();

    let mut h = BTreeMap::new();
    let mut slack_owner: Vec<BarrierId> = Vec::new();
    for skill in &stack.skills {
        let Some(row) = cbf::linearize(&skill.spec, model, state, scene, &jac, relax, stack.alpha)? else {
            continue;
        };
        h.insert(row.source.to_string(), row.h);
        let k = problem.add_slack(SlackKind::Skill, Bound::FREE);
        slack_owner.push(row.source.clone());
        problem.rows.push(qp::row_from(&row.a, row.b, Some(k)));
    }
    for limit in &stack.limits {
        let Some(row) = cbf::linearize(&limit.spec, model, state, scene, &jac, relax, stack.alpha)? else {
            continue;
        };
        h.insert(row.source.to_string(), row.h);
        let slack = match row.slack {
            Some(SlackKind::Limit) if limit.cap > 0.0 => {
                slack_owner.push(row.source.clone());
                Some(problem.add_slack(SlackKind::Limit, Bound { lo: 0.0, hi: limit.cap }))
            }
            _ => None,
        };
        problem.rows.push(QpRow { a: row.a.iter().copied().collect(), b: row.b, slack });
    }

    let sol = qp::solve(&problem);
    let flagged = sol.status != QpStatus::Optimal;
    let u = if flagged {
        JointVector::zeros(model.dof())
    } else {
        kinematics::clamp_velocity_scaled(model, &JointVector::from_vec(sol.qdot.clone()), scale)
    };
    let mut delta = BTreeMap::new();
    let mut eta = BTreeMap::new();
    for ((owner, var), value) in slack_owner.iter().zip(&problem.slacks).zip(&sol.slack) {
        let value = if flagged { 0.0 } else { *value };
        match var.kind {
            SlackKind::Skill => delta.insert(owner.to_string(), value),
            SlackKind::Limit => eta.insert(owner.to_string(), value),
        };
    }
    let diag = TickDiagnostics {
        t: state.t(),
        status: sol.status,
        flagged,
        u: u.iter().copied().collect(),
        h,
        delta,
        eta,
        iterations: sol.iterations,
    };
    Ok((u, diag))
}

/// One control tick followed by an Euler step. Live execution and the
/// predictor both go through here, so their trajectories coincide.
pub fn advance(
    stack: &TaskStack,
    model: &RobotModel,
    state: &RobotState,
    scene: &Scene,
    dt: f64,
) -> Result<(RobotState, TickDiagnostics), ControllerError> {
    let (u, diag) = control_step(stack, model, state, scene)?;
    let next = kinematics::integrate_state(model, state, &u, dt)?;
    Ok((next, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::ObstacleSelector;
    use crate::kinematics::{forward_kinematics, Position};
    use crate::world::Obstacle;

    fn arm() -> RobotModel {
        RobotModel::planar(&[1.0, 1.0], 3.0, 2.0).unwrap()
    }

    fn goal_task(goal: Position) -> BarrierSpec {
        BarrierSpec::position_task(BarrierId::new("goal"), goal, 5.0).unwrap()
    }

    fn stack_with_goal(model: &RobotModel, goal: Position) -> TaskStack {
        let mut s = TaskStack::new(100.0, 0.01);
        s.add_joint_limits(model, 1.0).unwrap();
        s.add_skill(goal_task(goal), DEFAULT_EPSILON, "move").unwrap();
        s
    }

    #[test]
    fn add_remove_is_identity() {
        let m = arm();
        let mut s = TaskStack::new(100.0, 0.01);
        s.add_joint_limits(&m, 1.0).unwrap();
        let before = s.clone();
        s.add_skill(goal_task(Position::new(1.0, 1.0, 0.0)), 0.01, "move").unwrap();
        s.remove_skill(&BarrierId::new("goal")).unwrap();
        assert_eq!(s, before);
        assert_eq!(s.limits().len(), m.dof());
    }

    #[test]
    fn second_position_task_conflicts() {
        let mut s = TaskStack::new(100.0, 0.01);
        s.add_skill(goal_task(Position::zeros()), 0.01, "a").unwrap();
        let other = BarrierSpec::position_task(BarrierId::new("other"), Position::zeros(), 5.0).unwrap();
        assert!(matches!(s.add_skill(other, 0.01, "b"), Err(ControllerError::Conflict { .. })));
        assert!(s.add_skill(goal_task(Position::zeros()), 0.0, "c").is_err());
    }

    #[test]
    fn satisfaction_threshold() {
        let m = RobotModel::planar(&[1.0], 3.0, 2.0).unwrap();
        let st = RobotState::new(&m, JointVector::from_vec(vec![0.0]), 0.0).unwrap();
        let at = goal_task(Position::new(1.0, 0.0, 0.0));
        assert!(task_satisfied(&at, &st, 1e-12));
        let off = goal_task(Position::new(1.1, 0.0, 0.0));
        assert!(!task_satisfied(&off, &st, 0.01));
        assert!(task_satisfied(&off, &st, 0.06));
    }

    #[test]
    fn satisfied_stack_is_stationary() {
        let m = arm();
        let q = JointVector::from_vec(vec![0.4, 0.7]);
        let x = forward_kinematics(&m, &q).unwrap();
        let st = RobotState::new(&m, q, 0.0).unwrap();
        let (u, diag) = control_step(&stack_with_goal(&m, x), &m, &st, &Scene::default()).unwrap();
        assert!(u.norm() <= 1e-9);
        assert!(!diag.flagged);
    }

    #[test]
    fn moves_toward_goal() {
        let m = arm();
        let st = RobotState::new(&m, JointVector::from_vec(vec![0.3, 0.9]), 0.0).unwrap();
        let goal = Position::new(1.2, 1.2, 0.0);
        let far = Scene::with_obstacles(vec![Obstacle::fixed("o", Position::new(-5.0, -5.0, 0.0))]);
        let (u, _) = control_step(&stack_with_goal(&m, goal), &m, &st, &far).unwrap();
        let xdot = kinematics::jacobian(&m, st.q()).unwrap().0 * &u;
        assert!(xdot.dot(&(goal - st.x())) > 0.0);
    }

    #[test]
    fn bypasses_obstacle_on_straight_path() {
        let m = arm();
        let mut st = RobotState::new(&m, JointVector::from_vec(vec![-0.6, 1.2]), 0.0).unwrap();
        let goal = Position::new(0.4, 1.6, 0.0);
        let mid = (st.x() + goal) / 2.0;
        let obs = mid + Position::new(0.3, -0.1, 0.0);
        let scene = Scene::with_obstacles(vec![Obstacle::fixed("o", obs)]);
        let mut s = stack_with_goal(&m, goal);
        s.add_limit(BarrierSpec::obstacle_safety(BarrierId::for_obstacle("o"), ObstacleSelector::Id("o".into()), 0.3, 0.1, 10.0, true).unwrap())
            .unwrap();
        let mut worst = f64::INFINITY;
        for _ in 0..2000 {
            let (next, diag) = advance(&s, &m, &st, &scene, 0.01).unwrap();
            assert!(!diag.flagged);
            st = next;
            worst = worst.min((st.x() - obs).norm());
        }
        assert!(worst >= 0.3 - 1e-3, "came within {worst}");
        assert!(task_satisfied(&s.skills()[0].spec, &st, 0.01));
    }

    #[test]
    fn infeasible_tick_applies_zero() {
        // joint limit violated and the velocity box forbids recovery
        let m = RobotModel::planar(&[1.0], 1.0, 0.1).unwrap();
        let st = RobotState::new(&m, JointVector::from_vec(vec![1.5]), 0.0).unwrap();
        let mut s = TaskStack::new(100.0, 0.01);
        s.add_joint_limits(&m, 1.0).unwrap();
        let (u, diag) = control_step(&s, &m, &st, &Scene::default()).unwrap();
        assert!(diag.flagged);
        assert_eq!(diag.status, QpStatus::Infeasible);
        assert_eq!(u, JointVector::zeros(1));
    }

    #[test]
    fn caps_bound_eta() {
        let m = arm();
        let st = RobotState::new(&m, JointVector::from_vec(vec![0.0, 0.5]), 0.0).unwrap();
        let x = *st.x();
        let obs = x + Position::new(0.2, 0.0, 0.0);
        let scene = Scene::with_obstacles(vec![Obstacle::fixed("o", obs)]);
        let mut s = stack_with_goal(&m, obs);
        let id = BarrierId::for_obstacle("o");
        s.add_limit(BarrierSpec::obstacle_safety(id.clone(), ObstacleSelector::Id("o".into()), 0.5, 0.1, 10.0, true).unwrap()).unwrap();
        let cap = 0.3;
        s.grant_caps(&BTreeMap::from([(id.clone(), cap)])).unwrap();
        let (_, diag) = control_step(&s, &m, &st, &scene).unwrap();
        assert!(diag.eta[id.as_str()] <= cap + 1e-6);
        s.set_nominal();
        assert!(s.caps().is_empty());
        assert_eq!(s.mode(), Mode::Nominal);
    }

    #[test]
    fn caps_clamped_to_ceiling() {
        let mut s = TaskStack::new(100.0, 0.01);
        let id = BarrierId::for_obstacle("o");
        s.add_limit(BarrierSpec::obstacle_safety(id.clone(), ObstacleSelector::Nearest, 0.5, 0.15, 10.0, true).unwrap()).unwrap();
        s.grant_caps(&BTreeMap::from([(id.clone(), 99.0)])).unwrap();
        assert!((s.caps()[&id] - 10.0 * (0.25 - 0.0225)).abs() < 1e-12);
        assert!(s.grant_caps(&BTreeMap::from([(BarrierId::new("nope"), 1.0)])).is_err());
    }

    #[test]
    fn prune_removes_completed_skill() {
        let m = arm();
        let q = JointVector::from_vec(vec![0.4, 0.7]);
        let st = RobotState::new(&m, q.clone(), 0.0).unwrap();
        let mut s = stack_with_goal(&m, *st.x());
        let done = s.prune_completed(&st);
        assert_eq!(done.len(), 1);
        assert!(s.skills().is_empty());
    }
}
