//! Headless scripted runs and the one-way / bidirectional comparison.
//!
//! A script is a TOML document with timed operator utterances and scene
//! mutations:
//!
//! ```toml
//! answer_delay_s = 1.0
//! max_time_s = 300.0
//!
//! [[events]]
//! t = 0.0
//! say = "start job"
//!
//! [[events]]
//! t = 12.5
//! place_obstacle = { id = "cart", position = [0.5, 0.5, 0.2] }
//! ```
//!
//! Besides the script, a scripted operator answers every proposal after
//! `answer_delay_s` (accept or reject depending on the policy) and resumes
//! a paused job with "start job".

use std::fmt::Write as _;

use parley_core::decision::{job_metrics, ExecutionLog, JobMetrics, Phase, TaskOutcome};
use parley_core::intent::{self, IntentKind};
use parley_core::kinematics::Position;
use parley_core::world::{Config, Obstacle};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AssessMode, Engine};
use crate::protocol::ServerBody;

pub const NOT_REPRODUCED: &str = "Job times measured with human operators are not reproduced here. \
This harness replays a scripted operator and checks only the ordering: \
bidirectional total-with-penalty below one-way.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Every proposal is rejected; the task counts as failed.
    Oneway,
    /// Every proposal is accepted.
    Bidirectional,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Oneway => "oneway",
            Policy::Bidirectional => "bidirectional",
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("script parse error: {0}")]
    Parse(String),
    #[error("script event {index}: {message}")]
    Event { index: usize, message: String },
    #[error("engine setup failed: {0}")]
    Engine(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstaclePlacement {
    pub id: String,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dmin: Option<f64>,
    #[serde(default = "yes")]
    pub relaxable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub say: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place_obstacle: Option<ObstaclePlacement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remove_obstacle: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default = "default_delay")]
    pub answer_delay_s: f64,
    #[serde(default = "default_max_time")]
    pub max_time_s: f64,
    #[serde(default)]
    pub events: Vec<ScriptEvent>,
}

fn default_delay() -> f64 {
    1.0
}

fn default_max_time() -> f64 {
    600.0
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// Checks event shape, ordering and every station an utterance names.
    pub fn validate(&self, config: &Config) -> Result<(), ScenarioError> {
        let bad = |index, message: String| ScenarioError::Event { index, message };
        if !(self.answer_delay_s >= 0.0 && self.answer_delay_s.is_finite()) {
            return Err(ScenarioError::Parse("answer_delay_s must be a non-negative number".into()));
        }
        if !(self.max_time_s > 0.0 && self.max_time_s.is_finite()) {
            return Err(ScenarioError::Parse("max_time_s must be positive".into()));
        }
        let mut last = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.t >= last && e.t.is_finite()) {
                return Err(bad(i, format!("time {} is negative or earlier than the previous event", e.t)));
            }
            last = e.t;
            let n = [e.say.is_some(), e.place_obstacle.is_some(), e.remove_obstacle.is_some()].iter().filter(|b| **b).count();
            if n != 1 {
                return Err(bad(i, "needs exactly one of say, place_obstacle, remove_obstacle".into()));
            }
            if let Some(text) = &e.say {
                // unparseable lines are allowed; they exercise the error path
                if let Ok(intent) = intent::parse(text) {
                    if let Some(st) = intent.kind.station() {
                        if config.scene.station(st.as_str()).is_none() {
                            return Err(bad(i, format!("unknown station {:?}", st.as_str())));
                        }
                    }
                }
            }
            if let Some(p) = &e.place_obstacle {
                if !p.position.iter().all(|v| v.is_finite()) || p.dmin.is_some_and(|d| !(d > 0.0 && d.is_finite())) {
                    return Err(bad(i, format!("obstacle {:?} needs a finite position and a positive dmin", p.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub policy: Policy,
    /// The job reached its end before `max_time_s`.
    pub job_finished: bool,
    pub sim_time_s: f64,
    pub ticks: u64,
    pub proposals_offered: usize,
    pub proposals_accepted: usize,
    pub proposals_rejected: usize,
    pub metrics: JobMetrics,
    pub note: String,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let m = &self.metrics;
        let _ = writeln!(s, "policy: {}  (job finished: {})", self.policy.name(), self.job_finished);
        let _ = writeln!(s, "{:<4} {:<20} {:<10} {:>9} {:>10}", "id", "task", "origin", "start s", "duration s");
        for t in &m.tasks {
            let origin = match t.origin {
                parley_core::decision::TaskOrigin::Operator => "operator".to_string(),
                parley_core::decision::TaskOrigin::Job(i) => format!("step {}", i + 1),
                parley_core::decision::TaskOrigin::Homing => "homing".to_string(),
            };
            let outcome = match t.outcome {
                TaskOutcome::Completed => "",
                TaskOutcome::Failed => "  FAILED",
                TaskOutcome::Stopped => "  stopped",
            };
            let _ = writeln!(s, "{:<4} {:<20} {:<10} {:>9.2} {:>10.2}{outcome}", t.task_id, t.label, origin, t.start_s, t.duration_s);
        }
        let _ = writeln!(s, "completed {}  failed {}", m.completed, m.failed);
        for (label, tm) in &m.t_m {
            let _ = writeln!(s, "t_m[{label}] = {tm:.2} s");
        }
        let _ = writeln!(s, "total {:.2} s  penalty {:.2} s (kappa {:.2})  total with penalty {:.2} s", m.total_s, m.penalty_s, m.kappa, m.total_with_penalty_s);
        s
    }
}

/// A finished run: the report plus the raw log it was computed from.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub log: ExecutionLog,
}

fn obstacle(p: &ObstaclePlacement) -> Obstacle {
    let mut o = Obstacle::fixed(p.id.clone(), Position::from(p.position));
    o.dmin = p.dmin;
    o.relaxable = p.relaxable;
    o
}

/// Runs `script` against `config` on simulated time. Metrics use this run
/// alone as the run set; see [`compare`] for a shared one.
pub fn run_scenario(config: &Config, script: &Script, policy: Policy) -> Result<ScenarioRun, ScenarioError> {
    script.validate(config)?;
    let mut engine = Engine::new(config, AssessMode::Inline).map_err(|e| ScenarioError::Engine(e.to_string()))?;
    let mut next_event = 0;
    // pending scripted-operator lines: (due time, intent, proposal id)
    let mut replies: Vec<(f64, IntentKind, Option<u64>)> = Vec::new();
    let (mut offered, mut accepted, mut rejected) = (0, 0, 0);
    let mut resume_due: Option<f64> = None;

    loop {
        let t = engine.t();
        while next_event < script.events.len() && script.events[next_event].t <= t + 1e-9 {
            let e = &script.events[next_event];
            if let Some(text) = &e.say {
                engine.submit_utterance(text);
            } else if let Some(p) = &e.place_obstacle {
                engine.place_obstacle(obstacle(p));
            } else if let Some(id) = &e.remove_obstacle {
                engine.remove_obstacle(id);
            }
            next_event += 1;
        }
        let mut i = 0;
        while i < replies.len() {
            if replies[i].0 <= t + 1e-9 {
                let (_, kind, id) = replies.remove(i);
                engine.submit_intent(kind, id);
            } else {
                i += 1;
            }
        }

        let d = engine.decision();
        let paused = d.phase == Phase::Idle && d.job.started && !d.job.running && d.job.cursor < d.script.steps.len() && d.queue.is_empty();
        match (paused, resume_due) {
            (true, None) => resume_due = Some(t + script.answer_delay_s),
            (true, Some(due)) if due <= t + 1e-9 => {
                resume_due = None;
                engine.submit_utterance("start job");
            }
            (false, _) => resume_due = None,
            _ => {}
        }

        let d = engine.decision();
        let script_done = next_event >= script.events.len() && replies.is_empty();
        if script_done && d.phase == Phase::JobDone && d.queue.is_empty() {
            break;
        }
        if t >= script.max_time_s {
            break;
        }

        engine.step();
        for out in engine.drain_outbox() {
            match out.body {
                ServerBody::ProposalOffer { id, .. } => {
                    offered += 1;
                    let kind = match policy {
                        Policy::Bidirectional => {
                            accepted += 1;
                            IntentKind::Accept
                        }
                        Policy::Oneway => {
                            rejected += 1;
                            IntentKind::Reject
                        }
                    };
                    replies.push((out.t + script.answer_delay_s, kind, Some(id)));
                }
                ServerBody::ProposalResolved { id, .. } => replies.retain(|r| r.2 != Some(id)),
                _ => {}
            }
        }
    }

    let log = engine.log().clone();
    let metrics = job_metrics(&log, &[&log], config.params.kappa);
    let report = ScenarioReport {
        policy,
        job_finished: engine.decision().phase == Phase::JobDone,
        sim_time_s: engine.t(),
        ticks: engine.tick_count(),
        proposals_offered: offered,
        proposals_accepted: accepted,
        proposals_rejected: rejected,
        metrics,
        note: NOT_REPRODUCED.to_string(),
    };
    Ok(ScenarioRun { report, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub oneway: ScenarioReport,
    pub bidirectional: ScenarioReport,
    /// Bidirectional total-with-penalty strictly below one-way.
    pub bidirectional_better: bool,
    pub note: String,
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.oneway.table());
        s.push('\n');
        s.push_str(&self.bidirectional.table());
        let _ = writeln!(
            s,
            "\n{:<14} {:>10} {:>8} {:>11} {:>12}",
            "policy", "total s", "failed", "penalty s", "with pen. s"
        );
        for r in [&self.oneway, &self.bidirectional] {
            let m = &r.metrics;
            let _ = writeln!(s, "{:<14} {:>10.2} {:>8} {:>11.2} {:>12.2}", r.policy.name(), m.total_s, m.failed, m.penalty_s, m.total_with_penalty_s);
        }
        let _ = writeln!(s, "bidirectional better: {}", self.bidirectional_better);
        let _ = writeln!(s, "\n{}", self.note);
        s
    }
}

/// Runs both policies on the same script; `t_m` is taken over both runs so
/// a task class that only ever failed under one policy still gets a mean.
pub fn compare(config: &Config, script: &Script) -> Result<Comparison, ScenarioError> {
    let one = run_scenario(config, script, Policy::Oneway)?;
    let bi = run_scenario(config, script, Policy::Bidirectional)?;
    let set = [&one.log, &bi.log];
    let mut oneway = one.report;
    let mut bidirectional = bi.report;
    oneway.metrics = job_metrics(&one.log, &set, config.params.kappa);
    bidirectional.metrics = job_metrics(&bi.log, &set, config.params.kappa);
    let better = bidirectional.metrics.total_with_penalty_s < oneway.metrics.total_with_penalty_s;
    Ok(Comparison { oneway, bidirectional, bidirectional_better: better, note: NOT_REPRODUCED.to_string() })
}

/// Metrics recomputed from a saved log.
pub fn replay(log: &ExecutionLog, kappa: f64) -> JobMetrics {
    job_metrics(log, &[log], kappa)
}
