//! Append-only execution log and the job metrics computed from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{OperatorMessage, Resolution, TaskOrigin, TaskOutcome};
use crate::predictor::Verdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Utterance { text: String },
    Intent { phrase: String },
    ParseError { message: String },
    Message { message: OperatorMessage },
    Prediction { task_id: u64, verdict: Verdict, rollout_id: u64 },
    ProposalOffered { id: u64, task_id: u64 },
    ProposalResolved { id: u64, resolution: Resolution },
    TaskStarted { task_id: u64, label: String, origin: TaskOrigin },
    TaskFinished { task_id: u64, label: String, outcome: TaskOutcome },
    SceneChanged { fingerprint: u64 },
    JobStarted,
    JobFinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Simulated time, s.
    pub t: f64,
    #[serde(flatten)]
    pub event: LogEvent,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub entries: Vec<LogEntry>,
}

impl ExecutionLog {
    pub fn push(&mut self, t: f64, event: LogEvent) {
        self.entries.push(LogEntry { t, event });
    }

    /// One JSON document per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task_id: u64,
    pub label: String,
    pub origin: TaskOrigin,
    pub start_s: f64,
    pub duration_s: f64,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JobMetrics {
    pub tasks: Vec<TaskMetric>,
    pub completed: usize,
    pub failed: usize,
    /// Job start to job end (or to the last finished task).
    pub total_s: f64,
    /// `t_m` used for each failed task class.
    pub t_m: BTreeMap<String, f64>,
    pub kappa: f64,
    pub penalty_s: f64,
    pub total_with_penalty_s: f64,
}

/// Tasks with a start and a finish record, in start order.
pub fn task_durations(log: &ExecutionLog) -> Vec<TaskMetric> {
    let mut open: BTreeMap<u64, (String, TaskOrigin, f64)> = BTreeMap::new();
    let mut done = Vec::new();
    for e in &log.entries {
        match &e.event {
            LogEvent::TaskStarted { task_id, label, origin } => {
                open.insert(*task_id, (label.clone(), *origin, e.t));
            }
            LogEvent::TaskFinished { task_id, outcome, .. } => {
                if let Some((label, origin, start)) = open.remove(task_id) {
                    done.push(TaskMetric { task_id: *task_id, label, origin, start_s: start, duration_s: e.t - start, outcome: *outcome });
                }
            }
            _ => {}
        }
    }
    done.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.task_id.cmp(&b.task_id)));
    done
}

/// Metrics of `log`. Each failed task adds `κ·t_m`, where `t_m` is the mean
/// duration of completed tasks with the same label across `run_set`, or the
/// mean of all completed tasks in `run_set` when that label never completed.
pub fn job_metrics(log: &ExecutionLog, run_set: &[&ExecutionLog], kappa: f64) -> JobMetrics {
    if log.entries.is_empty() {
        return JobMetrics { kappa, ..JobMetrics::default() };
    }
    let tasks = task_durations(log);
    let mut by_class: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut all = (0.0, 0usize);
    for run in run_set.iter().copied().chain(std::iter::once(log).filter(|_| run_set.is_empty())) {
        for t in task_durations(run) {
            if t.outcome == TaskOutcome::Completed && t.origin != TaskOrigin::Homing {
                let e = by_class.entry(t.label.clone()).or_insert((0.0, 0));
                e.0 += t.duration_s;
                e.1 += 1;
                all.0 += t.duration_s;
                all.1 += 1;
            }
        }
    }
    let mean_all = if all.1 > 0 { all.0 / all.1 as f64 } else { 0.0 };

    let mut t_m = BTreeMap::new();
    let mut penalty = 0.0;
    let mut failed = 0;
    for t in tasks.iter().filter(|t| t.outcome == TaskOutcome::Failed) {
        failed += 1;
        let m = by_class.get(&t.label).map_or(mean_all, |(sum, n)| sum / *n as f64);
        t_m.insert(t.label.clone(), m);
        penalty += kappa * m;
    }

    let start = log
        .entries
        .iter()
        .find(|e| matches!(e.event, LogEvent::JobStarted))
        .map_or_else(|| tasks.first().map_or(0.0, |t| t.start_s), |e| e.t);
    let end = log
        .entries
        .iter()
        .rev()
        .find(|e| matches!(e.event, LogEvent::JobFinished))
        .map(|e| e.t)
        .or_else(|| tasks.iter().map(|t| t.start_s + t.duration_s).reduce(f64::max))
        .unwrap_or(start);
    let total = end - start;
    JobMetrics {
        completed: tasks.iter().filter(|t| t.outcome == TaskOutcome::Completed).count(),
        failed,
        tasks,
        total_s: total,
        t_m,
        kappa,
        penalty_s: penalty,
        total_with_penalty_s: total + penalty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(log: &mut ExecutionLog, id: u64, label: &str, t0: f64, t1: f64, outcome: TaskOutcome) {
        log.push(t0, LogEvent::TaskStarted { task_id: id, label: label.into(), origin: TaskOrigin::Job(0) });
        log.push(t1, LogEvent::TaskFinished { task_id: id, label: label.into(), outcome });
    }

    #[test]
    fn empty_log_has_empty_metrics() {
        let m = job_metrics(&ExecutionLog::default(), &[], 1.5);
        assert!(m.tasks.is_empty());
        assert_eq!(m.total_with_penalty_s, 0.0);
    }

    #[test]
    fn no_failures_no_penalty() {
        let mut log = ExecutionLog::default();
        log.push(0.0, LogEvent::JobStarted);
        task(&mut log, 1, "pick A", 0.0, 10.0, TaskOutcome::Completed);
        log.push(10.0, LogEvent::JobFinished);
        let m = job_metrics(&log, &[], 1.5);
        assert_eq!(m.penalty_s, 0.0);
        assert_eq!(m.total_with_penalty_s, m.total_s);
        assert_eq!(m.total_s, 10.0);
    }

    #[test]
    fn penalty_uses_class_mean_across_runs() {
        let mut ok = ExecutionLog::default();
        task(&mut ok, 1, "move to B", 0.0, 20.0, TaskOutcome::Completed);
        let mut bad = ExecutionLog::default();
        bad.push(0.0, LogEvent::JobStarted);
        task(&mut bad, 1, "move to B", 0.0, 1.0, TaskOutcome::Failed);
        task(&mut bad, 2, "pick A", 1.0, 5.0, TaskOutcome::Completed);
        bad.push(5.0, LogEvent::JobFinished);
        let m = job_metrics(&bad, &[&ok, &bad], 1.5);
        assert_eq!(m.t_m["move to B"], 20.0);
        assert_eq!(m.penalty_s, 30.0);
        assert_eq!(m.total_with_penalty_s, 35.0);
    }

    #[test]
    fn unseen_class_falls_back_to_overall_mean() {
        let mut log = ExecutionLog::default();
        task(&mut log, 1, "pick A", 0.0, 4.0, TaskOutcome::Completed);
        task(&mut log, 2, "pick C", 4.0, 12.0, TaskOutcome::Completed);
        task(&mut log, 3, "place Z", 12.0, 13.0, TaskOutcome::Failed);
        let m = job_metrics(&log, &[], 1.5);
        assert_eq!(m.t_m["place Z"], 6.0);
        assert_eq!(m.penalty_s, 9.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = ExecutionLog::default();
        log.push(0.5, LogEvent::Utterance { text: "move to A".into() });
        task(&mut log, 1, "move to A", 0.5, 2.0, TaskOutcome::Completed);
        assert_eq!(ExecutionLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
