//! Dialogue and job sequencing as a pure transition function.
//!
//! [`handle_event`] takes the current [`DecisionState`] and one [`Event`] and
//! returns the next state plus the [`Action`]s the host must carry out
//! (start an assessment, install a task, tell the operator something). It
//! never performs I/O and never reads the clock.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cbf::BarrierId;
use crate::intent::{Intent, IntentKind};
use crate::predictor::{Cause, PredictionReport, Proposal, TaskRequest, Verdict};
use crate::world::{JobScript, TaskAction};

pub mod metrics;

pub use metrics::{job_metrics, ExecutionLog, JobMetrics, LogEntry, LogEvent, TaskMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Homing,
    Idle,
    Simulating,
    AwaitingProposalAnswer,
    Executing,
    JobDone,
}

impl Phase {
    pub const ALL: [Phase; 6] =
        [Phase::Homing, Phase::Idle, Phase::Simulating, Phase::AwaitingProposalAnswer, Phase::Executing, Phase::JobDone];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskOrigin {
    Operator,
    /// Zero-based job step.
    Job(usize),
    Homing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveTask {
    pub id: u64,
    pub request: TaskRequest,
    pub origin: TaskOrigin,
    /// Set after an execution failure has triggered one re-assessment.
    pub retried: bool,
    /// Re-assessments caused by the scene changing under a prediction or
    /// an open proposal.
    pub scene_retries: u32,
}

impl ActiveTask {
    pub fn label(&self) -> String {
        self.request.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutstandingProposal {
    pub id: u64,
    pub proposal: Proposal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub cursor: usize,
    pub started: bool,
    pub running: bool,
    pub homed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionState {
    pub phase: Phase,
    pub queue: VecDeque<Intent>,
    pub active: Option<ActiveTask>,
    pub proposal: Option<OutstandingProposal>,
    pub script: JobScript,
    pub job: JobProgress,
    /// Operator speed scale applied to every new task.
    pub speed_scale: f64,
    /// Fingerprint of the live scene as last reported.
    pub scene: u64,
    pub next_task_id: u64,
    pub next_proposal_id: u64,
}

impl DecisionState {
    pub fn new(script: JobScript, scene: u64) -> Self {
        Self {
            phase: Phase::Idle,
            queue: VecDeque::new(),
            active: None,
            proposal: None,
            script,
            job: JobProgress { cursor: 0, started: false, running: false, homed: false },
            speed_scale: 1.0,
            scene,
            next_task_id: 1,
            next_proposal_id: 1,
        }
    }

    /// Structural invariants. Returns the first violated one.
    pub fn check(&self) -> Result<(), String> {
        let busy = matches!(self.phase, Phase::Homing | Phase::Simulating | Phase::AwaitingProposalAnswer | Phase::Executing);
        if busy != self.active.is_some() {
            return Err(format!("phase {:?} with active task {:?}", self.phase, self.active.as_ref().map(|a| a.id)));
        }
        if (self.phase == Phase::AwaitingProposalAnswer) != self.proposal.is_some() {
            return Err(format!("phase {:?} with proposal {:?}", self.phase, self.proposal.as_ref().map(|p| p.id)));
        }
        if self.job.cursor > self.script.steps.len() {
            return Err(format!("job cursor {} past {} steps", self.job.cursor, self.script.steps.len()));
        }
        if self.phase == Phase::Homing && !matches!(self.active.as_ref().map(|a| a.origin), Some(TaskOrigin::Homing)) {
            return Err("homing without a homing task".into());
        }
        if self.queue.iter().any(|i| !queueable(&i.kind)) {
            return Err("non-task intent in the queue".into());
        }
        Ok(())
    }
}

fn queueable(kind: &IntentKind) -> bool {
    kind.is_task() || *kind == IntentKind::StartJob
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExecutionOutcome {
    Completed,
    /// The controller could not make progress (e.g. persistent infeasible
    /// ticks).
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Intent(Intent),
    Prediction { task_id: u64, report: PredictionReport },
    /// The request could not be assessed at all (e.g. unknown station).
    RequestError { task_id: u64, message: String },
    Execution { task_id: u64, outcome: ExecutionOutcome },
    Tick,
    SceneChanged { fingerprint: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Accepted,
    Rejected,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Completed,
    Failed,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Ack,
    Result,
    InfeasibleReason,
    ProposalOffer,
    JobStatus,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorMessage {
    pub kind: MessageKind,
    pub text: String,
    /// Every number in `text` appears here with the value as printed.
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Assess { task_id: u64, request: TaskRequest },
    /// Put the task on the controller. Empty `caps` means nominal mode.
    Install { task_id: u64, request: TaskRequest, caps: BTreeMap<BarrierId, f64>, speed_scale: f64 },
    ClearSkills,
    SetSpeed(f64),
    SetParam { key: String, value: f64 },
    Emit(OperatorMessage),
    OfferProposal { id: u64, task_id: u64, proposal: Proposal },
    ResolveProposal { id: u64, resolution: Resolution },
    TaskStarted { task_id: u64, label: String, origin: TaskOrigin },
    TaskFinished { task_id: u64, label: String, outcome: TaskOutcome },
    JobStarted,
    JobFinished,
}

/// Pure transition: same inputs, same outputs.
pub fn handle_event(state: &DecisionState, event: &Event) -> (DecisionState, Vec<Action>) {
    let mut next = state.clone();
    let mut actions = Vec::new();
    step(&mut next, event, &mut actions);
    (next, actions)
}

fn step(s: &mut DecisionState, event: &Event, out: &mut Vec<Action>) {
    match event {
        Event::Intent(intent) => on_intent(s, intent, out),
        Event::Prediction { task_id, report } => {
            if s.phase == Phase::Simulating && s.active.as_ref().is_some_and(|a| a.id == *task_id) {
                on_prediction(s, report, out);
            }
        }
        Event::RequestError { task_id, message } => {
            if s.phase == Phase::Simulating && s.active.as_ref().is_some_and(|a| a.id == *task_id) {
                out.push(Action::Emit(error_message(message)));
                fail_active(s, out);
            }
        }
        Event::Execution { task_id, outcome } => {
            if matches!(s.phase, Phase::Executing | Phase::Homing) && s.active.as_ref().is_some_and(|a| a.id == *task_id) {
                on_execution(s, outcome, out);
            }
        }
        Event::Tick => {
            if s.phase == Phase::Idle {
                next_work(s, out);
            }
        }
        Event::SceneChanged { fingerprint } => {
            s.scene = *fingerprint;
            let stale = s.proposal.as_ref().is_some_and(|p| p.proposal.snapshot != *fingerprint);
            if s.phase == Phase::AwaitingProposalAnswer && stale {
                let p = s.proposal.take().expect("awaiting phase holds a proposal");
                out.push(Action::ResolveProposal { id: p.id, resolution: Resolution::Expired });
                let label = s.active.as_ref().map(|a| a.label()).unwrap_or_default();
                let again = reassess_after_scene_change(s, out);
                out.push(Action::Emit(compose_expired(&label, p.id, again)));
                if again {
                    s.phase = Phase::Simulating;
                } else {
                    fail_active(s, out);
                }
            }
        }
    }
}

fn on_intent(s: &mut DecisionState, intent: &Intent, out: &mut Vec<Action>) {
    match &intent.kind {
        IntentKind::Stop => {
            if let Some(p) = s.proposal.take() {
                out.push(Action::ResolveProposal { id: p.id, resolution: Resolution::Rejected });
            }
            out.push(Action::ClearSkills);
            if let Some(a) = s.active.take() {
                out.push(Action::TaskFinished { task_id: a.id, label: a.label(), outcome: TaskOutcome::Stopped });
                if a.origin == TaskOrigin::Homing {
                    s.job.homed = false;
                }
            }
            s.job.running = false;
            s.phase = Phase::Idle;
            out.push(Action::Emit(msg(MessageKind::Ack, "Stopped. All motion cancelled.".into(), serde_json::json!({"queued": s.queue.len()}))));
        }
        IntentKind::Status => out.push(Action::Emit(compose_status(s))),
        IntentKind::SetSpeed(v) => {
            s.speed_scale = *v;
            out.push(Action::SetSpeed(*v));
            let v = r2(*v);
            out.push(Action::Emit(msg(MessageKind::Ack, format!("Speed scale set to {v:.2}."), serde_json::json!({"speed_scale": v}))));
        }
        IntentKind::SetParam { key, value } => {
            out.push(Action::SetParam { key: key.clone(), value: *value });
            let v = r2(*value);
            out.push(Action::Emit(msg(
                MessageKind::Ack,
                format!("Parameter {key} set to {v:.2}."),
                serde_json::json!({"key": key, "value": v}),
            )));
        }
        IntentKind::Accept | IntentKind::Reject => {
            let Some(p) = s.proposal.take() else {
                out.push(Action::Emit(error_message("There is no proposal waiting for an answer.")));
                return;
            };
            let a = s.active.clone().expect("awaiting phase holds a task");
            if intent.kind == IntentKind::Accept {
                out.push(Action::ResolveProposal { id: p.id, resolution: Resolution::Accepted });
                let speed = p.proposal.speed_scale.unwrap_or_else(|| a.request.speed_scale.unwrap_or(1.0));
                out.push(Action::Install { task_id: a.id, request: a.request.clone(), caps: p.proposal.caps(), speed_scale: speed });
                let t = r2(p.proposal.predicted_completion_s);
                out.push(Action::Emit(msg(
                    MessageKind::Ack,
                    format!("Proposal {} accepted; starting {}. Estimated {t:.2} s.", p.id, a.label()),
                    serde_json::json!({"proposal_id": p.id, "task": a.label(), "estimate_s": t}),
                )));
                s.phase = Phase::Executing;
            } else {
                out.push(Action::ResolveProposal { id: p.id, resolution: Resolution::Rejected });
                out.push(Action::Emit(msg(
                    MessageKind::Ack,
                    format!("Proposal {} rejected; task {} abandoned.", p.id, a.label()),
                    serde_json::json!({"proposal_id": p.id, "task": a.label()}),
                )));
                fail_active(s, out);
            }
        }
        IntentKind::StartJob => {
            if matches!(s.phase, Phase::Idle | Phase::JobDone) {
                start_job(s, out);
            } else {
                enqueue(s, intent, out);
            }
        }
        kind if kind.is_task() => {
            if matches!(s.phase, Phase::Idle | Phase::JobDone) {
                let request = operator_request(s, kind);
                begin_task(s, request, TaskOrigin::Operator, out);
            } else {
                enqueue(s, intent, out);
            }
        }
        _ => {}
    }
}

fn enqueue(s: &mut DecisionState, intent: &Intent, out: &mut Vec<Action>) {
    s.queue.push_back(intent.clone());
    let n = s.queue.len();
    out.push(Action::Emit(msg(
        MessageKind::Ack,
        format!("Busy; \"{}\" queued at position {n}.", intent.kind.canonical_phrase()),
        serde_json::json!({"command": intent.kind.canonical_phrase(), "position": n}),
    )));
}

fn operator_request(s: &DecisionState, kind: &IntentKind) -> TaskRequest {
    let action = match kind {
        IntentKind::Pick(_) => TaskAction::Pick,
        IntentKind::Place(_) => TaskAction::Place,
        _ => TaskAction::Move,
    };
    let station = kind.station().map(|st| st.as_str().to_string()).unwrap_or_default();
    TaskRequest { action, station, speed_scale: (s.speed_scale < 1.0).then_some(s.speed_scale) }
}

fn begin_task(s: &mut DecisionState, request: TaskRequest, origin: TaskOrigin, out: &mut Vec<Action>) {
    let id = s.next_task_id;
    s.next_task_id += 1;
    out.push(Action::TaskStarted { task_id: id, label: request.label(), origin });
    if origin == TaskOrigin::Homing {
        let speed = request.speed_scale.unwrap_or(1.0);
        out.push(Action::Install { task_id: id, request: request.clone(), caps: BTreeMap::new(), speed_scale: speed });
        s.phase = Phase::Homing;
    } else {
        out.push(Action::Assess { task_id: id, request: request.clone() });
        s.phase = Phase::Simulating;
    }
    s.active = Some(ActiveTask { id, request, origin, retried: false, scene_retries: 0 });
}

fn start_job(s: &mut DecisionState, out: &mut Vec<Action>) {
    let fresh = !s.job.started || s.job.cursor >= s.script.steps.len();
    if fresh {
        s.job = JobProgress { cursor: 0, started: true, running: true, homed: false };
        out.push(Action::JobStarted);
    } else if s.job.running {
        out.push(Action::Emit(msg(MessageKind::Ack, "The job is already running.".into(), serde_json::json!({}))));
        return;
    } else {
        s.job.running = true;
    }
    let n = s.script.steps.len();
    let at = s.job.cursor + 1;
    out.push(Action::Emit(msg(
        MessageKind::JobStatus,
        if fresh { format!("Job started: {n} steps, homing first.") } else { format!("Job resumed at step {at} of {n}.") },
        if fresh { serde_json::json!({"steps": n}) } else { serde_json::json!({"step": at, "steps": n}) },
    )));
    if !s.job.homed {
        let request = TaskRequest { action: TaskAction::Move, station: s.script.home.clone(), speed_scale: None };
        begin_task(s, request, TaskOrigin::Homing, out);
    } else {
        s.phase = Phase::Idle;
        next_work(s, out);
    }
}

/// Serves the queue first, then the next job step.
fn next_work(s: &mut DecisionState, out: &mut Vec<Action>) {
    s.phase = Phase::Idle;
    if let Some(intent) = s.queue.pop_front() {
        if intent.kind == IntentKind::StartJob {
            start_job(s, out);
        } else {
            let request = operator_request(s, &intent.kind);
            begin_task(s, request, TaskOrigin::Operator, out);
        }
        return;
    }
    if !(s.job.running && s.job.homed) {
        return;
    }
    match s.script.steps.get(s.job.cursor) {
        Some(stepdef) => {
            let speed = match (stepdef.speed_scale, s.speed_scale < 1.0) {
                (Some(v), true) => Some(v.min(s.speed_scale)),
                (Some(v), false) => Some(v),
                (None, true) => Some(s.speed_scale),
                (None, false) => None,
            };
            let request = TaskRequest { action: stepdef.action, station: stepdef.station.clone(), speed_scale: speed };
            let cursor = s.job.cursor;
            begin_task(s, request, TaskOrigin::Job(cursor), out);
        }
        None => {
            s.job.running = false;
            s.phase = Phase::JobDone;
            out.push(Action::JobFinished);
            let n = s.script.steps.len();
            out.push(Action::Emit(msg(MessageKind::JobStatus, format!("Job finished: all {n} steps done. Stopping."), serde_json::json!({"steps": n}))));
        }
    }
}

fn on_prediction(s: &mut DecisionState, report: &PredictionReport, out: &mut Vec<Action>) {
    let a = s.active.clone().expect("simulating phase holds a task");
    if report.snapshot != s.scene {
        // the scene moved on while the assessment ran
        if !reassess_after_scene_change(s, out) {
            out.push(Action::Emit(msg(
                MessageKind::InfeasibleReason,
                format!("Task {} dropped: the scene kept changing during {MAX_SCENE_RETRIES} assessments.", a.label()),
                serde_json::json!({"task": a.label(), "assessments": MAX_SCENE_RETRIES}),
            )));
            fail_active(s, out);
        }
        return;
    }
    match report.verdict {
        Verdict::Feasible => {
            let speed = a.request.speed_scale.unwrap_or(1.0);
            out.push(Action::Install { task_id: a.id, request: a.request.clone(), caps: BTreeMap::new(), speed_scale: speed });
            out.push(Action::Emit(compose_feasible(&a.label(), report)));
            s.phase = Phase::Executing;
        }
        Verdict::FeasibleWithRelaxation => {
            let proposal = report.proposal.clone().expect("relaxation verdict carries a proposal");
            let id = s.next_proposal_id;
            s.next_proposal_id += 1;
            out.push(Action::OfferProposal { id, task_id: a.id, proposal: proposal.clone() });
            out.push(Action::Emit(compose_proposal(&a.label(), id, &proposal)));
            s.proposal = Some(OutstandingProposal { id, proposal });
            s.phase = Phase::AwaitingProposalAnswer;
        }
        Verdict::Infeasible => {
            out.push(Action::Emit(compose_infeasible(&a.label(), report)));
            fail_active(s, out);
        }
    }
}

fn on_execution(s: &mut DecisionState, outcome: &ExecutionOutcome, out: &mut Vec<Action>) {
    let mut a = s.active.clone().expect("executing phase holds a task");
    match outcome {
        ExecutionOutcome::Completed => {
            s.active = None;
            out.push(Action::ClearSkills);
            out.push(Action::TaskFinished { task_id: a.id, label: a.label(), outcome: TaskOutcome::Completed });
            match a.origin {
                TaskOrigin::Homing => {
                    s.job.homed = true;
                    s.phase = Phase::Idle;
                    out.push(Action::Emit(msg(MessageKind::Result, "Reached home.".into(), serde_json::json!({"station": a.request.station}))));
                }
                TaskOrigin::Job(i) => {
                    s.job.cursor = i + 1;
                    out.push(Action::Emit(compose_completed(&a.label())));
                    next_work(s, out);
                }
                TaskOrigin::Operator => {
                    out.push(Action::Emit(compose_completed(&a.label())));
                    next_work(s, out);
                }
            }
        }
        ExecutionOutcome::Failed { reason } => {
            out.push(Action::ClearSkills);
            if !a.retried && a.origin != TaskOrigin::Homing {
                a.retried = true;
                out.push(Action::Assess { task_id: a.id, request: a.request.clone() });
                out.push(Action::Emit(msg(
                    MessageKind::Ack,
                    format!("Task {} stalled ({reason}); re-checking feasibility.", a.label()),
                    serde_json::json!({"task": a.label(), "reason": reason}),
                )));
                s.active = Some(a);
                s.phase = Phase::Simulating;
            } else {
                out.push(Action::Emit(msg(
                    MessageKind::InfeasibleReason,
                    format!("Task {} failed: {reason}.", a.label()),
                    serde_json::json!({"task": a.label(), "reason": reason}),
                )));
                fail_active(s, out);
            }
        }
    }
}

/// The active task fails; a job step is skipped and the job pauses until
/// the operator resumes it.
/// Scene-driven re-assessments allowed per task, so a scene that never
/// settles cannot keep a task in prediction forever.
pub const MAX_SCENE_RETRIES: u32 = 3;

/// Queues a fresh assessment of the active task unless its budget is spent.
fn reassess_after_scene_change(s: &mut DecisionState, out: &mut Vec<Action>) -> bool {
    let Some(a) = s.active.as_mut() else { return false };
    if a.scene_retries >= MAX_SCENE_RETRIES {
        return false;
    }
    a.scene_retries += 1;
    out.push(Action::Assess { task_id: a.id, request: a.request.clone() });
    true
}

fn fail_active(s: &mut DecisionState, out: &mut Vec<Action>) {
    s.proposal = None;
    if let Some(a) = s.active.take() {
        out.push(Action::TaskFinished { task_id: a.id, label: a.label(), outcome: TaskOutcome::Failed });
        match a.origin {
            TaskOrigin::Job(i) => {
                s.job.cursor = i + 1;
                s.job.running = false;
            }
            TaskOrigin::Homing => {
                s.job.running = false;
                s.job.homed = false;
            }
            TaskOrigin::Operator => {}
        }
    }
    s.phase = Phase::Idle;
}

/// Two-decimal value exactly as `{:.2}` prints it.
fn r2(v: f64) -> f64 {
    format!("{v:.2}").parse().unwrap_or(v)
}

fn msg(kind: MessageKind, text: String, payload: serde_json::Value) -> OperatorMessage {
    OperatorMessage { kind, text, payload }
}

pub fn error_message(text: &str) -> OperatorMessage {
    msg(MessageKind::Error, text.to_string(), serde_json::json!({}))
}

pub fn compose_status(s: &DecisionState) -> OperatorMessage {
    let n = s.script.steps.len();
    let at = (s.job.cursor + 1).min(n);
    let q = s.queue.len();
    let job = if !s.job.started {
        "job not started".to_string()
    } else if s.job.cursor >= n {
        "job finished".to_string()
    } else if s.job.running {
        format!("job at step {at} of {n}")
    } else {
        format!("job paused at step {at} of {n}")
    };
    let task = s.active.as_ref().map(|a| format!(", working on {}", a.label())).unwrap_or_default();
    msg(
        MessageKind::JobStatus,
        format!("Status: {:?}{task}; {job}; {q} queued.", s.phase),
        serde_json::json!({"phase": format!("{:?}", s.phase), "step": at, "steps": n, "queued": q, "task": s.active.as_ref().map(|a| a.label())}),
    )
}

pub fn compose_feasible(label: &str, report: &PredictionReport) -> OperatorMessage {
    let t = r2(report.time_to_satisfy.unwrap_or(0.0));
    msg(MessageKind::Result, format!("Task {label} is feasible; starting now. Estimated {t:.2} s."), serde_json::json!({"task": label, "estimate_s": t}))
}

pub fn compose_completed(label: &str) -> OperatorMessage {
    msg(MessageKind::Result, format!("Task {label} completed."), serde_json::json!({"task": label}))
}

fn compose_expired(label: &str, id: u64, reassessing: bool) -> OperatorMessage {
    if reassessing {
        msg(
            MessageKind::Ack,
            format!("Proposal {id} for {label} expired because the scene changed; re-assessing."),
            serde_json::json!({"proposal_id": id, "task": label}),
        )
    } else {
        msg(
            MessageKind::InfeasibleReason,
            format!("Proposal {id} for {label} expired because the scene changed {MAX_SCENE_RETRIES} times; the task was dropped."),
            serde_json::json!({"proposal_id": id, "task": label, "assessments": MAX_SCENE_RETRIES}),
        )
    }
}

pub fn compose_infeasible(label: &str, report: &PredictionReport) -> OperatorMessage {
    let mut parts = Vec::new();
    let mut causes = Vec::new();
    for c in &report.causes {
        match c {
            Cause::TaskResidual { id, residual, epsilon } => {
                let (r, e) = (r2(*residual), r2(*epsilon));
                parts.push(format!("{id} residual stays at {r:.2} (tolerance {e:.2})"));
                causes.push(serde_json::json!({"cause": "task_residual", "id": id.as_str(), "residual": r, "epsilon": e}));
            }
            Cause::JointLimit { id, joint, q_min_rad, q_max_rad } => {
                let (lo, hi) = (r2(*q_min_rad), r2(*q_max_rad));
                parts.push(format!("joint {joint} is at its limit [{lo:.2}, {hi:.2}] rad"));
                causes.push(serde_json::json!({"cause": "joint_limit", "id": id.as_str(), "joint": joint, "q_min_rad": lo, "q_max_rad": hi}));
            }
            Cause::ObstacleMargin { id, obstacle, dmin_m, floor_m } => {
                let (d, f) = (r2(*dmin_m), r2(*floor_m));
                parts.push(format!("obstacle {obstacle} must stay {d:.2} m away (never closer than {f:.2} m)"));
                causes.push(serde_json::json!({"cause": "obstacle_margin", "id": id.as_str(), "obstacle": obstacle, "dmin_m": d, "floor_m": f}));
            }
            Cause::OutOfReach { distance_m, reach_m } => {
                let (d, r) = (r2(*distance_m), r2(*reach_m));
                parts.push(format!("the goal is {d:.2} m from the base but the arm reaches {r:.2} m"));
                causes.push(serde_json::json!({"cause": "out_of_reach", "distance_m": d, "reach_m": r}));
            }
            Cause::OutOfBounds { goal } => {
                let g: Vec<f64> = goal.iter().map(|v| r2(*v)).collect();
                parts.push(format!("the goal ({:.2}, {:.2}, {:.2}) is outside the workspace", g[0], g[1], g[2]));
                causes.push(serde_json::json!({"cause": "out_of_bounds", "goal": g}));
            }
        }
    }
    let why = if parts.is_empty() { "no alternative was found".to_string() } else { parts.join("; ") };
    msg(
        MessageKind::InfeasibleReason,
        format!("Task {label} is not feasible: {why}. Waiting for a new command."),
        serde_json::json!({"task": label, "causes": causes}),
    )
}

pub fn compose_proposal(label: &str, id: u64, proposal: &Proposal) -> OperatorMessage {
    let mut parts = Vec::new();
    let mut relax = Vec::new();
    for r in &proposal.relaxations {
        match r.margin_m {
            Some((from, to)) => {
                let (f, t) = (r2(from), r2(to));
                parts.push(format!("reduce the {} margin from {f:.2} m to {t:.2} m", r.id));
                relax.push(serde_json::json!({"id": r.id.as_str(), "from_m": f, "to_m": t, "cap": r.cap}));
            }
            None => {
                let c = r2(r.cap);
                parts.push(format!("relax {} by {c:.2}", r.id));
                relax.push(serde_json::json!({"id": r.id.as_str(), "cap": c}));
            }
        }
    }
    let mut payload = serde_json::json!({"proposal_id": id, "task": label, "relaxations": relax});
    if let Some(s) = proposal.speed_scale {
        let s = r2(s);
        parts.push(format!("slow down to {s:.2} of full speed"));
        payload["speed_scale"] = serde_json::json!(s);
    }
    let t = r2(proposal.predicted_completion_s);
    payload["estimate_s"] = serde_json::json!(t);
    msg(
        MessageKind::ProposalOffer,
        format!("Task {label} is not feasible as requested. Proposal {id}: {}. Estimated {t:.2} s. Accept?", parts.join(" and ")),
        payload,
    )
}
