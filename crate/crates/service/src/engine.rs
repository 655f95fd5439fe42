//! The tick loop. Owns the live scene, the robot state, the controller
//! stack and the decision state; everything else talks to it through
//! events and reads its outbox.

use std::collections::VecDeque;

use parley_core::controller::{self, TaskStack, TickDiagnostics};
use parley_core::decision::{
    self, handle_event, Action, DecisionState, Event, ExecutionLog, ExecutionOutcome, LogEvent, MessageKind,
};
use parley_core::intent::{self, Intent, IntentKind};
use parley_core::kinematics::{JointVector, Position, RobotModel, RobotState};
use parley_core::predictor::{self, TaskRequest};
use parley_core::world::{self, config::margins, Config, Obstacle, Params, Scene};

use crate::protocol::{arr, ObstacleView, SceneView, ServerBody, TelemetryFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssessMode {
    /// Assessments run to completion inside the tick that requested them.
    Inline,
    /// Assessments are handed out through [`Engine::take_pending`].
    Deferred,
}

/// Everything an assessment needs, detached from the live engine.
#[derive(Debug, Clone)]
pub struct PendingAssessment {
    pub task_id: u64,
    pub request: TaskRequest,
    pub model: RobotModel,
    pub state: RobotState,
    pub scene: Scene,
    pub params: Params,
}

impl PendingAssessment {
    pub fn run(&self) -> Event {
        match predictor::assess(&self.request, &self.model, &self.state, &self.scene, &self.params) {
            Ok(report) => Event::Prediction { task_id: self.task_id, report },
            Err(e) => Event::RequestError { task_id: self.task_id, message: format!("Cannot assess {}: {e}.", self.request.label()) },
        }
    }
}

#[derive(Debug, Clone)]
struct Execution {
    task_id: u64,
    label: String,
    started: f64,
    flagged_since: Option<f64>,
    trace: Vec<JointVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub t: f64,
    pub body: ServerBody,
}

/// Joint trajectory of one finished execution, starting at install time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedTrace {
    pub task_id: u64,
    pub label: String,
    pub q: Vec<JointVector>,
}

pub struct Engine {
    model: RobotModel,
    params: Params,
    scene: Scene,
    state: RobotState,
    decision: DecisionState,
    stack: TaskStack,
    execution: Option<Execution>,
    mode: AssessMode,
    pending: Vec<PendingAssessment>,
    events: VecDeque<Event>,
    log: ExecutionLog,
    outbox: Vec<Outgoing>,
    traces: Vec<ExecutedTrace>,
    tick: u64,
    fingerprint: u64,
    last_diag: Option<TickDiagnostics>,
    operator_speed: f64,
}

impl Engine {
    pub fn new(config: &Config, mode: AssessMode) -> Result<Self, controller::ControllerError> {
        let state = RobotState::new(&config.robot, config.q_init.clone(), 0.0)?;
        let stack = predictor::build_stack(&config.robot, &config.scene, &config.params, None)?;
        let fingerprint = config.scene.fingerprint(0.0);
        Ok(Self {
            model: config.robot.clone(),
            params: config.params.clone(),
            scene: config.scene.clone(),
            state,
            decision: DecisionState::new(config.job.clone(), fingerprint),
            stack,
            execution: None,
            mode,
            pending: Vec::new(),
            events: VecDeque::new(),
            log: ExecutionLog::default(),
            outbox: Vec::new(),
            traces: Vec::new(),
            tick: 0,
            fingerprint,
            last_diag: None,
            operator_speed: 1.0,
        })
    }

    pub fn t(&self) -> f64 {
        self.state.t()
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn decision(&self) -> &DecisionState {
        &self.decision
    }

    pub fn stack(&self) -> &TaskStack {
        &self.stack
    }

    pub fn log(&self) -> &ExecutionLog {
        &self.log
    }

    pub fn traces(&self) -> &[ExecutedTrace] {
        &self.traces
    }

    pub fn last_diagnostics(&self) -> Option<&TickDiagnostics> {
        self.last_diag.as_ref()
    }

    pub fn drain_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_pending(&mut self) -> Vec<PendingAssessment> {
        std::mem::take(&mut self.pending)
    }

    /// Feeds an assessment result computed elsewhere back into the loop.
    pub fn deliver(&mut self, event: Event) {
        self.events.push_back(event);
        self.pump();
    }

    fn emit(&mut self, body: ServerBody) {
        self.outbox.push(Outgoing { t: self.state.t(), body });
    }

    pub fn submit_utterance(&mut self, text: &str) {
        let t = self.t();
        self.log.push(t, LogEvent::Utterance { text: text.to_string() });
        match intent::parse(text) {
            Ok(intent) => self.submit(intent),
            Err(e) => {
                self.log.push(t, LogEvent::ParseError { message: e.message.clone() });
                let m = decision::OperatorMessage {
                    kind: MessageKind::Error,
                    text: e.message.clone(),
                    payload: serde_json::to_value(&e).unwrap_or_default(),
                };
                self.emit(ServerBody::OperatorMessage(m));
            }
        }
    }

    /// A structured intent; `proposal_id` must name the open proposal for
    /// accept/reject to apply.
    pub fn submit_intent(&mut self, kind: IntentKind, proposal_id: Option<u64>) {
        if let (Some(id), IntentKind::Accept | IntentKind::Reject) = (proposal_id, &kind) {
            let open = self.decision.proposal.as_ref().map(|p| p.id);
            if open != Some(id) {
                self.emit(ServerBody::Error { message: format!("proposal {id} is not open") });
                return;
            }
        }
        self.submit(Intent::direct(kind));
    }

    fn submit(&mut self, intent: Intent) {
        self.log.push(self.t(), LogEvent::Intent { phrase: intent.kind.canonical_phrase() });
        self.events.push_back(Event::Intent(intent));
        self.pump();
    }

    /// Adds or moves an obstacle in the live scene.
    pub fn place_obstacle(&mut self, obstacle: Obstacle) {
        match self.scene.obstacles.iter_mut().find(|o| o.id == obstacle.id) {
            Some(o) => *o = obstacle,
            None => self.scene.obstacles.push(obstacle),
        }
        self.rebuild_limits();
    }

    pub fn remove_obstacle(&mut self, id: &str) -> bool {
        let removed = self.scene.remove_obstacle(id);
        if removed {
            self.rebuild_limits();
        }
        removed
    }

    /// Keeps skills, caps and speed; replaces the limit set to match the
    /// scene and the current parameters.
    fn rebuild_limits(&mut self) {
        let Ok(mut fresh) = predictor::build_stack(&self.model, &self.scene, &self.params, None) else { return };
        for skill in self.stack.skills() {
            let _ = fresh.add_skill(skill.spec.clone(), skill.epsilon, skill.label.clone());
        }
        let _ = fresh.set_speed_scale(self.stack.speed_scale());
        if self.stack.mode() == controller::Mode::Relaxed {
            let caps = self.stack.caps().into_iter().filter(|(id, _)| fresh.limits().iter().any(|l| l.spec.id() == id)).collect();
            let _ = fresh.grant_caps(&caps);
        }
        self.stack = fresh;
    }

    pub fn scene_view(&self) -> SceneView {
        let t = self.t();
        SceneView {
            obstacles: self
                .scene
                .obstacles
                .iter()
                .map(|o| {
                    let (dmin, _) = margins(&self.params, o);
                    let id = parley_core::cbf::BarrierId::for_obstacle(&o.id);
                    let effective = self
                        .stack
                        .limits()
                        .iter()
                        .find(|l| l.spec.id() == &id)
                        .and_then(|l| l.spec.effective_dmin(l.cap))
                        .unwrap_or(dmin);
                    ObstacleView { id: o.id.clone(), position: arr(&o.position_at(t)), dmin, effective_dmin: effective }
                })
                .collect(),
            stations: self.scene.stations.iter().map(|(k, v)| (k.clone(), arr(v))).collect(),
            bounds: (arr(&self.scene.bounds.min), arr(&self.scene.bounds.max)),
            fingerprint: self.fingerprint,
        }
    }

    pub fn telemetry(&self) -> TelemetryFrame {
        let d = self.last_diag.as_ref();
        TelemetryFrame {
            tick: self.tick,
            q: self.state.q().iter().copied().collect(),
            x: arr(self.state.x()),
            h: d.map(|d| d.h.clone()).unwrap_or_default(),
            delta: d.map(|d| d.delta.clone()).unwrap_or_default(),
            eta: d.map(|d| d.eta.clone()).unwrap_or_default(),
            phase: self.decision.phase,
            speed_scale: self.stack.speed_scale(),
            flagged: d.is_some_and(|d| d.flagged),
            task: self.execution.as_ref().map(|e| e.label.clone()),
        }
    }

    /// Runs one control period.
    pub fn step(&mut self) {
        let t = self.t();
        let fp = self.scene.fingerprint(t);
        if fp != self.fingerprint {
            self.fingerprint = fp;
            self.log.push(t, LogEvent::SceneChanged { fingerprint: fp });
            self.events.push_back(Event::SceneChanged { fingerprint: fp });
            let view = self.scene_view();
            self.emit(ServerBody::SceneUpdate(view));
        }
        self.events.push_back(Event::Tick);
        self.pump();

        // completion is checked before the control step, as in a rollout
        for _ in 0..8 {
            let done = match &self.execution {
                Some(e) if self.stack.all_satisfied(&self.state) => Some(e.task_id),
                _ => None,
            };
            let Some(task_id) = done else { break };
            self.finish_execution();
            self.events.push_back(Event::Execution { task_id, outcome: ExecutionOutcome::Completed });
            self.pump();
        }

        let frozen = world::snapshot(&self.scene, t);
        let (next, diag) = match controller::advance(&self.stack, &self.model, &self.state, &frozen, self.params.dt) {
            Ok(r) => r,
            Err(e) => {
                let m = decision::error_message(&format!("Control step failed: {e}."));
                self.emit(ServerBody::OperatorMessage(m));
                let hold = RobotState::new(&self.model, self.state.q().clone(), t + self.params.dt).expect("current q is valid");
                (hold, TickDiagnostics {
                    t,
                    status: parley_core::qp::QpStatus::Infeasible,
                    flagged: true,
                    u: vec![0.0; self.model.dof()],
                    h: Default::default(),
                    delta: Default::default(),
                    eta: Default::default(),
                    iterations: 0,
                })
            }
        };
        self.state = next;
        self.tick += 1;

        let mut failure = None;
        if let Some(e) = &mut self.execution {
            e.trace.push(self.state.q().clone());
            if diag.flagged {
                let since = *e.flagged_since.get_or_insert(t);
                if t + self.params.dt - since >= self.params.infeasible_timeout_s {
                    failure = Some((e.task_id, format!("no admissible motion for {:.2} s", self.params.infeasible_timeout_s)));
                }
            } else {
                e.flagged_since = None;
            }
            if failure.is_none() && self.state.t() - e.started > self.params.horizon_s {
                failure = Some((e.task_id, format!("goal not reached within {:.2} s", self.params.horizon_s)));
            }
        }
        self.last_diag = Some(diag);
        if let Some((task_id, reason)) = failure {
            self.finish_execution();
            self.events.push_back(Event::Execution { task_id, outcome: ExecutionOutcome::Failed { reason } });
            self.pump();
        }

        let every = u64::from(self.params.telemetry_every.max(1));
        if self.tick.is_multiple_of(every) {
            let frame = self.telemetry();
            self.emit(ServerBody::Telemetry(frame));
        }
    }

    fn finish_execution(&mut self) {
        if let Some(e) = self.execution.take() {
            self.traces.push(ExecutedTrace { task_id: e.task_id, label: e.label, q: e.trace });
        }
    }

    fn pump(&mut self) {
        while let Some(event) = self.events.pop_front() {
            if let Event::Prediction { task_id, report } = &event {
                self.log.push(self.t(), LogEvent::Prediction { task_id: *task_id, verdict: report.verdict, rollout_id: report.rollout_id });
            }
            let (next, actions) = handle_event(&self.decision, &event);
            self.decision = next;
            for action in actions {
                self.apply(action);
            }
        }
    }

    fn apply(&mut self, action: Action) {
        let t = self.t();
        match action {
            Action::Assess { task_id, request } => {
                let job = PendingAssessment {
                    task_id,
                    request,
                    model: self.model.clone(),
                    state: self.state.clone(),
                    scene: world::snapshot(&self.scene, t),
                    params: self.params.clone(),
                };
                match self.mode {
                    AssessMode::Inline => {
                        let result = job.run();
                        self.events.push_back(result);
                    }
                    AssessMode::Deferred => self.pending.push(job),
                }
            }
            Action::Install { task_id, request, caps, speed_scale } => self.install(task_id, &request, &caps, speed_scale),
            Action::ClearSkills => {
                self.finish_execution();
                self.stack.clear_skills();
                self.stack.set_nominal();
                let _ = self.stack.set_speed_scale(self.operator_speed);
            }
            Action::SetSpeed(v) => {
                self.operator_speed = v;
                let _ = self.stack.set_speed_scale(v);
            }
            Action::SetParam { key, value } => {
                let mut p = self.params.clone();
                match p.set(&key, value) {
                    Ok(()) => {
                        self.params = p;
                        self.stack.set_weights(parley_core::qp::SlackWeights { skill: self.params.l, limit: self.params.l_eta });
                        self.rebuild_limits();
                    }
                    Err(e) => {
                        let m = decision::error_message(&format!("Parameter not changed: {e}."));
                        self.emit(ServerBody::OperatorMessage(m));
                    }
                }
            }
            Action::Emit(m) => {
                self.log.push(t, LogEvent::Message { message: m.clone() });
                self.emit(ServerBody::OperatorMessage(m));
            }
            Action::OfferProposal { id, task_id, proposal } => {
                self.log.push(t, LogEvent::ProposalOffered { id, task_id });
                let task = self.decision.active.as_ref().map(|a| a.label()).unwrap_or_default();
                self.emit(ServerBody::ProposalOffer {
                    id,
                    task,
                    relaxations: proposal.relaxations.clone(),
                    speed_scale: proposal.speed_scale,
                    predicted_completion_s: proposal.predicted_completion_s,
                    expiry: proposal.snapshot,
                });
            }
            Action::ResolveProposal { id, resolution } => {
                self.log.push(t, LogEvent::ProposalResolved { id, resolution });
                self.emit(ServerBody::ProposalResolved { id, resolution });
            }
            Action::TaskStarted { task_id, label, origin } => self.log.push(t, LogEvent::TaskStarted { task_id, label, origin }),
            Action::TaskFinished { task_id, label, outcome } => self.log.push(t, LogEvent::TaskFinished { task_id, label, outcome }),
            Action::JobStarted => self.log.push(t, LogEvent::JobStarted),
            Action::JobFinished => self.log.push(t, LogEvent::JobFinished),
        }
    }

    fn install(&mut self, task_id: u64, request: &TaskRequest, caps: &std::collections::BTreeMap<parley_core::cbf::BarrierId, f64>, speed: f64) {
        let label = request.label();
        let built = self.scene.station(&request.station).map(|(_, goal)| goal).ok_or_else(|| format!("unknown station {:?}", request.station)).and_then(
            |goal: Position| {
                let mut stack = predictor::build_stack(&self.model, &self.scene, &self.params, Some((goal, &label))).map_err(|e| e.to_string())?;
                if !caps.is_empty() {
                    stack.grant_caps(caps).map_err(|e| e.to_string())?;
                }
                stack.set_speed_scale(speed).map_err(|e| e.to_string())?;
                Ok(stack)
            },
        );
        match built {
            Ok(stack) => {
                self.finish_execution();
                self.stack = stack;
                self.execution = Some(Execution { task_id, label, started: self.t(), flagged_since: None, trace: vec![self.state.q().clone()] });
            }
            Err(reason) => {
                self.events.push_back(Event::Execution { task_id, outcome: ExecutionOutcome::Failed { reason } });
            }
        }
    }
}
