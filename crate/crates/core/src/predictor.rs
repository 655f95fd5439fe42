//! Virtual execution of a requested task on a frozen scene.
//!
//! [`assess`] first rolls the task out with every limit hard. When the goal
//! is not reached it rolls out again with relaxable limits free up to their
//! ceilings, reads the slack traces back into a [`Proposal`], and confirms
//! the proposal by a third rollout with the proposed caps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{BarrierId, BarrierKind, BarrierSpec, ObstacleSelector};
use crate::controller::{self, ControllerError, TaskStack, TickDiagnostics};
use crate::kinematics::{JointVector, Position, RobotModel, RobotState};
use crate::world::{config::margins, Fnv, Params, Scene, TaskAction};

/// Barrier id of the position skill installed for every task.
pub const GOAL_ID: &str = "goal";

/// A limit counts as blocking once its barrier value drops below this.
const ACTIVE_H: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("unknown station {0:?}")]
    UnknownStation(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub action: TaskAction,
    pub station: String,
    /// Operator-requested speed scale; `None` keeps full speed.
    pub speed_scale: Option<f64>,
}

impl TaskRequest {
    pub fn new(action: TaskAction, station: impl Into<String>) -> Self {
        Self { action, station: station.into(), speed_scale: None }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.action.verb(), self.station)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Feasible,
    FeasibleWithRelaxation,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relaxation {
    pub id: BarrierId,
    /// Cap on the limit's slack, in units of its barrier.
    pub cap: f64,
    /// For obstacle margins: the configured and the resulting margin, m.
    pub margin_m: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub relaxations: Vec<Relaxation>,
    pub speed_scale: Option<f64>,
    pub predicted_completion_s: f64,
    /// Fingerprint of the scene snapshot the proposal was computed on.
    pub snapshot: u64,
}

impl Proposal {
    pub fn caps(&self) -> BTreeMap<BarrierId, f64> {
        self.relaxations.iter().map(|r| (r.id.clone(), r.cap)).collect()
    }
}

/// Why a task cannot be done, in terms an operator can act on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum Cause {
    TaskResidual { id: BarrierId, residual: f64, epsilon: f64 },
    /// `joint` is one-based.
    JointLimit { id: BarrierId, joint: usize, q_min_rad: f64, q_max_rad: f64 },
    ObstacleMargin { id: BarrierId, obstacle: String, dmin_m: f64, floor_m: f64 },
    OutOfReach { distance_m: f64, reach_m: f64 },
    OutOfBounds { goal: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub task: TaskRequest,
    pub verdict: Verdict,
    /// Final `|h|` per skill of the nominal rollout.
    pub residuals: BTreeMap<String, f64>,
    pub time_to_satisfy: Option<f64>,
    /// Limits that became active during the nominal rollout, with their
    /// smallest barrier value.
    pub violated_limits: Vec<(BarrierId, f64)>,
    pub proposal: Option<Proposal>,
    pub causes: Vec<Cause>,
    pub reason: Option<String>,
    pub rollout_id: u64,
    pub snapshot: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Joint positions, starting with the initial state.
    pub q: Vec<JointVector>,
    pub ticks: Vec<TickDiagnostics>,
    /// Index into `q` of the first state where every skill holds.
    pub satisfied_at: Option<usize>,
    pub final_state: RobotState,
}

impl Rollout {
    pub fn max_eta(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for t in &self.ticks {
            for (k, v) in &t.eta {
                let e = out.entry(k.clone()).or_insert(0.0);
                *e = e.max(*v);
            }
        }
        out
    }

    pub fn min_h(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for t in &self.ticks {
            for (k, v) in &t.h {
                let e = out.entry(k.clone()).or_insert(f64::INFINITY);
                *e = e.min(*v);
            }
        }
        out
    }
}

/// Fixed-step simulation of `stack` on a frozen scene. Before every tick
/// the skills are checked; with `early_exit` the rollout stops at the first
/// state where all of them hold.
pub fn rollout(
    stack: &TaskStack,
    model: &RobotModel,
    state0: &RobotState,
    scene: &Scene,
    horizon_s: f64,
    dt: f64,
    early_exit: bool,
) -> Result<Rollout, ControllerError> {
    let n = (horizon_s / dt).round() as usize;
    let mut state = state0.clone();
    let mut q = vec![state.q().clone()];
    let mut ticks = Vec::with_capacity(n.min(4096));
    let mut satisfied_at = None;
    for k in 0..=n {
        if satisfied_at.is_none() && !stack.skills().is_empty() && stack.all_satisfied(&state) {
            satisfied_at = Some(k);
            if early_exit {
                break;
            }
        }
        if k == n {
            break;
        }
        let (next, diag) = controller::advance(stack, model, &state, scene, dt)?;
        ticks.push(diag);
        state = next;
        q.push(state.q().clone());
    }
    Ok(Rollout { q, ticks, satisfied_at, final_state: state })
}

/// The stack used for both prediction and execution: joint limits, one
/// safety barrier per obstacle, and optionally a position skill.
pub fn build_stack(model: &RobotModel, scene: &Scene, params: &Params, goal: Option<(Position, &str)>) -> Result<TaskStack, ControllerError> {
    let mut stack = TaskStack::new(params.l, params.l_eta);
    stack.set_v_max_scale(params.v_max_scale)?;
    stack.add_joint_limits(model, params.rho_l)?;
    for o in &scene.obstacles {
        let (dmin, floor) = margins(params, o);
        stack.add_limit(BarrierSpec::obstacle_safety(
            BarrierId::for_obstacle(&o.id),
            ObstacleSelector::Id(o.id.clone()),
            dmin,
            floor,
            params.rho_s,
            o.relaxable,
        )?)?;
    }
    if let Some((goal, label)) = goal {
        stack.add_skill(BarrierSpec::position_task(BarrierId::new(GOAL_ID), goal, params.rho_p)?, params.epsilon, label)?;
    }
    Ok(stack)
}

/// How caps are read back from a relaxed rollout's slack trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalRule {
    /// Slack in use when the skills became satisfied: what it takes to hold
    /// the goal. Slack spent only to approach faster is not granted.
    Hold,
    /// Largest slack over the whole rollout.
    Peak,
}

/// Turns a successful relaxed rollout into caps: `(1 + margin)·η`, with `η`
/// read per `rule`, omitting limits below the drop threshold and never
/// exceeding a limit's ceiling.
pub fn derive_proposal(relaxed: &Rollout, stack: &TaskStack, params: &Params, snapshot: u64, rule: ProposalRule) -> Proposal {
    let peaks = match rule {
        ProposalRule::Peak => relaxed.max_eta(),
        ProposalRule::Hold => relaxed.ticks.last().map(|t| t.eta.clone()).unwrap_or_default(),
    };
    let mut relaxations = Vec::new();
    let mut touches_obstacle = false;
    for limit in stack.limits() {
        let Some(&peak) = peaks.get(limit.spec.id().as_str()) else { continue };
        if peak < params.drop_threshold {
            continue;
        }
        let cap = ((1.0 + params.relax_margin) * peak).min(limit.spec.relaxation_ceiling());
        let margin_m = match limit.spec.kind() {
            BarrierKind::ObstacleSafety { dmin, .. } => {
                touches_obstacle = true;
                limit.spec.effective_dmin(cap).map(|eff| (*dmin, eff))
            }
            _ => None,
        };
        relaxations.push(Relaxation { id: limit.spec.id().clone(), cap, margin_m });
    }
    Proposal {
        relaxations,
        speed_scale: touches_obstacle.then_some(params.relaxed_speed_scale),
        predicted_completion_s: relaxed.satisfied_at.map_or(f64::NAN, |k| k as f64 * params.dt),
        snapshot,
    }
}

fn rollout_id(snapshot: u64, state: &RobotState, goal: &Position, params: &Params) -> u64 {
    let mut h = Fnv::new();
    h.bytes(&snapshot.to_le_bytes());
    for v in state.q().iter().chain(goal.iter()) {
        h.f64(*v);
    }
    h.f64(state.t());
    h.f64(params.dt);
    h.f64(params.horizon_s);
    h.finish()
}

fn blocking_causes(stack: &TaskStack, model: &RobotModel, scene: &Scene, params: &Params, trace: &Rollout) -> Vec<Cause> {
    let tail_from = trace.ticks.len() - trace.ticks.len() / 10;
    let tail = &trace.ticks[tail_from.min(trace.ticks.len().saturating_sub(1))..];
    let mut causes = Vec::new();
    for limit in stack.limits() {
        let id = limit.spec.id();
        let active = tail.iter().any(|t| {
            t.h.get(id.as_str()).is_some_and(|h| *h < ACTIVE_H)
                || (limit.cap > 0.0 && t.eta.get(id.as_str()).is_some_and(|e| *e >= 0.999 * limit.cap))
        });
        if !active {
            continue;
        }
        match limit.spec.kind() {
            BarrierKind::JointLimit { joint } => {
                let j = &model.joints()[*joint];
                causes.push(Cause::JointLimit { id: id.clone(), joint: joint + 1, q_min_rad: j.q_min_rad, q_max_rad: j.q_max_rad });
            }
            BarrierKind::ObstacleSafety { selector: ObstacleSelector::Id(name), .. } => {
                let (dmin, floor) = scene.obstacle(name).map_or((params.dmin, params.dmin_floor), |o| margins(params, o));
                let floor = if limit.spec.relaxable() { floor } else { dmin };
                causes.push(Cause::ObstacleMargin { id: id.clone(), obstacle: name.clone(), dmin_m: dmin, floor_m: floor });
            }
            _ => {}
        }
    }
    causes
}

fn reason_text(causes: &[Cause]) -> String {
    let parts: Vec<String> = causes
        .iter()
        .map(|c| match c {
            Cause::TaskResidual { id, residual, epsilon } => format!("{id} residual {residual:.2} stays above tolerance {epsilon:.2}"),
            Cause::JointLimit { id, joint, q_min_rad, q_max_rad } => {
                format!("{id} (joint {joint}) is held at its limit [{q_min_rad:.2}, {q_max_rad:.2}] rad")
            }
            Cause::ObstacleMargin { id, dmin_m, floor_m, .. } => {
                format!("{id} keeps the arm {dmin_m:.2} m away and may not go below {floor_m:.2} m")
            }
            Cause::OutOfReach { distance_m, reach_m } => format!("goal is {distance_m:.2} m from the base, beyond the reach of {reach_m:.2} m"),
            Cause::OutOfBounds { goal } => {
                format!("goal ({:.2}, {:.2}, {:.2}) lies outside the workspace bounds", goal[0], goal[1], goal[2])
            }
        })
        .collect();
    parts.join("; ")
}

/// Replays the task with the proposed caps, first at the proposed speed and
/// then at the requested one. Returns the proposal with its completion time
/// when either run reaches the goal.
fn confirm(
    stack: &TaskStack,
    model: &RobotModel,
    state0: &RobotState,
    scene: &Scene,
    params: &Params,
    base_speed: f64,
    mut proposal: Proposal,
) -> Result<Option<Proposal>, ControllerError> {
    let mut speeds = vec![proposal.speed_scale.map(|s| s.min(base_speed))];
    if proposal.speed_scale.is_some() {
        speeds.push(None);
    }
    for speed in speeds {
        let mut granted = stack.clone();
        granted.grant_caps(&proposal.caps())?;
        granted.set_speed_scale(speed.unwrap_or(base_speed))?;
        let run = rollout(&granted, model, state0, scene, params.horizon_s, params.dt, true)?;
        if let Some(k) = run.satisfied_at {
            proposal.speed_scale = speed;
            proposal.predicted_completion_s = k as f64 * params.dt;
            return Ok(Some(proposal));
        }
    }
    Ok(None)
}

/// Decides whether `request` can be executed from `state0` in `scene`.
/// `scene` should be a frozen snapshot.
pub fn assess(request: &TaskRequest, model: &RobotModel, state0: &RobotState, scene: &Scene, params: &Params) -> Result<PredictionReport, PredictError> {
    let (_, goal) = scene.station(&request.station).ok_or_else(|| PredictError::UnknownStation(request.station.clone()))?;
    if let Some(s) = request.speed_scale {
        if !(s > 0.0 && s <= 1.0) {
            return Err(PredictError::InvalidRequest(format!("speed scale {s} outside (0, 1]")));
        }
    }
    let snapshot = scene.fingerprint(state0.t());
    let label = request.label();
    let mut stack = build_stack(model, scene, params, Some((goal, &label)))?;
    let base_speed = request.speed_scale.unwrap_or(1.0);
    stack.set_speed_scale(base_speed)?;
    let goal_spec = stack.skills()[0].spec.clone();
    let epsilon = params.epsilon.max(f64::MIN_POSITIVE);

    let mut report = PredictionReport {
        task: request.clone(),
        verdict: Verdict::Infeasible,
        residuals: BTreeMap::new(),
        time_to_satisfy: None,
        violated_limits: Vec::new(),
        proposal: None,
        causes: Vec::new(),
        reason: None,
        rollout_id: rollout_id(snapshot, state0, &goal, params),
        snapshot,
    };
    let residual_of = |s: &RobotState| controller::skill_residual(&goal_spec, s).unwrap_or(0.0);

    if !scene.bounds.contains(&goal) {
        report.residuals.insert(GOAL_ID.into(), residual_of(state0));
        report.causes = vec![
            Cause::TaskResidual { id: BarrierId::new(GOAL_ID), residual: residual_of(state0), epsilon },
            Cause::OutOfBounds { goal: [goal[0], goal[1], goal[2]] },
        ];
        report.reason = Some(reason_text(&report.causes));
        return Ok(report);
    }

    // phase 1: every limit hard
    let nominal = rollout(&stack, model, state0, scene, params.horizon_s, params.dt, true)?;
    report.residuals.insert(GOAL_ID.into(), residual_of(&nominal.final_state));
    let mut violated: Vec<(BarrierId, f64)> = nominal
        .min_h()
        .into_iter()
        .filter(|(k, h)| k != GOAL_ID && *h < ACTIVE_H)
        .map(|(k, h)| (BarrierId::new(k), h))
        .collect();
    violated.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    report.violated_limits = violated;
    if let Some(k) = nominal.satisfied_at {
        report.verdict = Verdict::Feasible;
        report.time_to_satisfy = Some(k as f64 * params.dt);
        return Ok(report);
    }

    let distance = (goal - model.base()).norm();
    let reach = model.reach();
    let mut causes = vec![Cause::TaskResidual { id: BarrierId::new(GOAL_ID), residual: residual_of(&nominal.final_state), epsilon }];
    if distance > reach {
        causes.extend(blocking_causes(&stack, model, scene, params, &nominal));
        causes.push(Cause::OutOfReach { distance_m: distance, reach_m: reach });
        report.reason = Some(reason_text(&causes));
        report.causes = causes;
        return Ok(report);
    }

    // phase 2: relaxable limits free up to their ceilings
    let mut free = stack.clone();
    free.set_free_relaxation();
    let relaxed = rollout(&free, model, state0, scene, params.horizon_s, params.dt, true)?;
    if relaxed.satisfied_at.is_some() {
        for rule in [ProposalRule::Hold, ProposalRule::Peak] {
            let proposal = derive_proposal(&relaxed, &free, params, snapshot, rule);
            if proposal.relaxations.is_empty() {
                continue;
            }
            if let Some(confirmed) = confirm(&stack, model, state0, scene, params, base_speed, proposal)? {
                report.verdict = Verdict::FeasibleWithRelaxation;
                report.proposal = Some(confirmed);
                return Ok(report);
            }
        }
        causes.extend(blocking_causes(&stack, model, scene, params, &nominal));
    } else {
        causes.extend(blocking_causes(&free, model, scene, params, &relaxed));
    }
    report.reason = Some(reason_text(&causes));
    report.causes = causes;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Obstacle;

    fn arm() -> RobotModel {
        RobotModel::planar(&[1.0, 1.0], 3.0, 2.0).unwrap()
    }

    fn scene_with(stations: &[(&str, Position)], obstacles: Vec<Obstacle>) -> Scene {
        let mut s = Scene::with_obstacles(obstacles);
        for (k, p) in stations {
            s.stations.insert((*k).into(), *p);
        }
        s
    }

    fn start(m: &RobotModel) -> RobotState {
        RobotState::new(m, JointVector::from_vec(vec![0.2, 0.8]), 0.0).unwrap()
    }

    #[test]
    fn satisfied_at_tick_zero_is_stationary() {
        let m = arm();
        let st = start(&m);
        let scene = scene_with(&[("A", *st.x())], vec![]);
        let r = assess(&TaskRequest::new(TaskAction::Move, "A"), &m, &st, &scene, &Params::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Feasible);
        assert_eq!(r.time_to_satisfy, Some(0.0));
        assert!(r.proposal.is_none());
    }

    #[test]
    fn rollout_is_deterministic() {
        let m = arm();
        let st = start(&m);
        let scene = scene_with(&[("A", Position::new(0.5, 1.5, 0.0))], vec![Obstacle::fixed("o", Position::new(1.0, 1.0, 0.0))]);
        let p = Params::default();
        let stack = build_stack(&m, &scene, &p, Some((Position::new(0.5, 1.5, 0.0), "move"))).unwrap();
        let a = rollout(&stack, &m, &st, &scene, 3.0, 0.01, false).unwrap();
        let b = rollout(&stack, &m, &st, &scene, 3.0, 0.01, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.q.len(), 301);
    }

    #[test]
    fn reachable_station_is_feasible() {
        let m = arm();
        let scene = scene_with(&[("A", Position::new(0.6, 1.4, 0.0))], vec![]);
        let r = assess(&TaskRequest::new(TaskAction::Move, "station a"), &m, &start(&m), &scene, &Params::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Feasible);
        assert!(r.residuals[GOAL_ID] < crate::controller::DEFAULT_EPSILON);
        assert!(r.time_to_satisfy.unwrap() > 0.0);
    }

    #[test]
    fn unknown_station_is_a_request_error() {
        let m = arm();
        let scene = scene_with(&[], vec![]);
        let e = assess(&TaskRequest::new(TaskAction::Pick, "Z"), &m, &start(&m), &scene, &Params::default()).unwrap_err();
        assert_eq!(e, PredictError::UnknownStation("Z".into()));
    }

    #[test]
    fn goal_near_obstacle_needs_relaxation() {
        let m = arm();
        let goal = Position::new(1.2, 0.9, 0.0);
        let obs = goal + Position::new(0.3, 0.0, 0.0);
        let scene = scene_with(&[("A", goal)], vec![Obstacle::fixed("bot", obs)]);
        let p = Params::default();
        let st = RobotState::new(&m, JointVector::from_vec(vec![1.2, 0.6]), 0.0).unwrap();
        let r = assess(&TaskRequest::new(TaskAction::Move, "A"), &m, &st, &scene, &p).unwrap();
        assert_eq!(r.verdict, Verdict::FeasibleWithRelaxation, "{:?}", r.reason);
        assert!(r.residuals[GOAL_ID] >= p.epsilon);
        let prop = r.proposal.unwrap();
        assert_eq!(prop.relaxations.len(), 1);
        let rel = &prop.relaxations[0];
        assert_eq!(rel.id.as_str(), "obstacle:bot");
        let expected = p.rho_s * (p.dmin * p.dmin - 0.3 * 0.3);
        assert!((rel.cap - expected).abs() / expected < 0.15, "cap {}", rel.cap);
        let (from, to) = rel.margin_m.unwrap();
        assert_eq!(from, 0.5);
        assert!((to - 0.3).abs() < 0.05 && to >= p.dmin_floor);
        assert_eq!(prop.speed_scale, Some(0.5));
        assert_eq!(prop.snapshot, scene.fingerprint(0.0));
    }

    #[test]
    fn unreachable_goal_cites_reach() {
        let m = arm();
        let scene = scene_with(&[("far", Position::new(3.0, 0.0, 0.0))], vec![]);
        let r = assess(&TaskRequest::new(TaskAction::Move, "far"), &m, &start(&m), &scene, &Params::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Infeasible);
        assert!(r.causes.iter().any(|c| matches!(c, Cause::OutOfReach { .. })));
        let reason = r.reason.unwrap();
        assert!(reason.contains("goal") && reason.contains("reach"), "{reason}");
    }

    #[test]
    fn out_of_bounds_goal_is_infeasible() {
        let m = arm();
        let mut scene = scene_with(&[("A", Position::new(0.6, 1.4, 0.0))], vec![]);
        scene.bounds.max = Position::new(0.5, 5.0, 5.0);
        let r = assess(&TaskRequest::new(TaskAction::Move, "A"), &m, &start(&m), &scene, &Params::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Infeasible);
        assert!(r.causes.iter().any(|c| matches!(c, Cause::OutOfBounds { .. })));
    }

    #[test]
    fn proposal_threshold_and_margin() {
        let m = arm();
        let p = Params::default();
        let scene = scene_with(&[], vec![Obstacle::fixed("a", Position::new(5.0, 0.0, 0.0)), Obstacle::fixed("b", Position::new(-5.0, 0.0, 0.0))]);
        let stack = build_stack(&m, &scene, &p, None).unwrap();
        let st = start(&m);
        let tick = |a: f64, b: f64| TickDiagnostics {
            t: 0.0,
            status: crate::qp::QpStatus::Optimal,
            flagged: false,
            u: vec![0.0, 0.0],
            h: BTreeMap::new(),
            delta: BTreeMap::new(),
            eta: BTreeMap::from([("obstacle:a".to_string(), a), ("obstacle:b".to_string(), b)]),
            iterations: 0,
        };
        let trace = Rollout { q: vec![st.q().clone(); 3], ticks: vec![tick(0.5, 0.0), tick(1.0, 0.0)], satisfied_at: Some(2), final_state: st };
        let prop = derive_proposal(&trace, &stack, &p, 7, ProposalRule::Peak);
        assert_eq!(prop.relaxations.len(), 1);
        assert!((prop.relaxations[0].cap - 1.1).abs() < 1e-12);
        let trace = Rollout { ticks: vec![tick(1.0, 0.0), tick(0.5, 0.0)], ..trace };
        let hold = derive_proposal(&trace, &stack, &p, 7, ProposalRule::Hold);
        assert!((hold.relaxations[0].cap - 0.55).abs() < 1e-12);
        assert_eq!(prop.speed_scale, Some(0.5));
        assert!((prop.predicted_completion_s - 0.02).abs() < 1e-12);
    }
}
