//! TOML configuration: robot chain, scene, job script and tuning parameters.
//!
//! The normative layout is documented in `docs/config.md`. Unknown keys are
//! rejected so typos surface as errors instead of silently using defaults.

use std::collections::BTreeMap;

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Bounds, Obstacle, Scene, Waypoint};
use crate::kinematics::{Joint, JointVector, Position, RobotModel};

#[derive(Debug, Error, Clone, PartialEq, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Semantic { key: String, message: String },
}

impl ConfigError {
    fn semantic(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Semantic { key: key.into(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"error\":\"unknown\",\"message\":{:?}}}", self.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskAction {
    Move,
    Pick,
    Place,
}

impl TaskAction {
    pub fn verb(&self) -> &'static str {
        match self {
            TaskAction::Move => "move to",
            TaskAction::Pick => "pick",
            TaskAction::Place => "place",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStep {
    pub action: TaskAction,
    pub station: String,
    pub speed_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobScript {
    pub home: String,
    pub steps: Vec<JobStep>,
}

/// Tuning parameters. Missing keys take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub rho_p: f64,
    pub rho_s: f64,
    pub rho_l: f64,
    /// Slack weight for skills.
    pub l: f64,
    /// Slack weight for relaxable limits in the relaxed problem.
    pub l_eta: f64,
    pub epsilon: f64,
    pub dmin: f64,
    pub dmin_floor: f64,
    pub dt: f64,
    pub horizon_s: f64,
    pub kappa: f64,
    pub v_max_scale: f64,
    pub relax_margin: f64,
    pub drop_threshold: f64,
    pub relaxed_speed_scale: f64,
    pub infeasible_timeout_s: f64,
    pub telemetry_every: u32,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            rho_p: crate::cbf::DEFAULT_RHO_POSITION,
            rho_s: crate::cbf::DEFAULT_RHO_SAFETY,
            rho_l: crate::cbf::DEFAULT_RHO_LIMIT,
            l: 100.0,
            l_eta: 0.01,
            epsilon: 0.01,
            dmin: 0.5,
            dmin_floor: 0.15,
            dt: 0.01,
            horizon_s: 15.0,
            kappa: 1.5,
            v_max_scale: 1.0,
            relax_margin: 0.10,
            drop_threshold: 1e-4,
            relaxed_speed_scale: 0.5,
            infeasible_timeout_s: 2.0,
            telemetry_every: 5,
        }
    }
}

impl Params {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("params.rho_p", self.rho_p),
            ("params.rho_s", self.rho_s),
            ("params.rho_l", self.rho_l),
            ("params.epsilon", self.epsilon),
            ("params.dmin", self.dmin),
            ("params.dt", self.dt),
            ("params.horizon_s", self.horizon_s),
            ("params.infeasible_timeout_s", self.infeasible_timeout_s),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::semantic(key, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("params.l", self.l),
            ("params.l_eta", self.l_eta),
            ("params.kappa", self.kappa),
            ("params.relax_margin", self.relax_margin),
            ("params.drop_threshold", self.drop_threshold),
            ("params.dmin_floor", self.dmin_floor),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::semantic(key, format!("must be non-negative, got {v}")));
            }
        }
        if self.dmin_floor > self.dmin {
            return Err(ConfigError::semantic("params.dmin_floor", "must not exceed params.dmin"));
        }
        for (key, v) in [("params.v_max_scale", self.v_max_scale), ("params.relaxed_speed_scale", self.relaxed_speed_scale)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::semantic(key, format!("must lie in (0, 1], got {v}")));
            }
        }
        if self.telemetry_every == 0 {
            return Err(ConfigError::semantic("params.telemetry_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Sets a parameter by its config key.
    pub fn set(&mut self, key: &str, value: f64) -> Result<(), ConfigError> {
        let mut next = self.clone();
        let slot = match key {
            "rho_p" => &mut next.rho_p,
            "rho_s" => &mut next.rho_s,
            "rho_l" => &mut next.rho_l,
            "l" => &mut next.l,
            "l_eta" => &mut next.l_eta,
            "epsilon" => &mut next.epsilon,
            "dmin" => &mut next.dmin,
            "dmin_floor" => &mut next.dmin_floor,
            "horizon_s" => &mut next.horizon_s,
            "kappa" => &mut next.kappa,
            "v_max_scale" => &mut next.v_max_scale,
            "relax_margin" => &mut next.relax_margin,
            "relaxed_speed_scale" => &mut next.relaxed_speed_scale,
            _ => return Err(ConfigError::semantic(format!("params.{key}"), "unknown or read-only parameter")),
        };
        *slot = value;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub robot: RobotModel,
    pub q_init: JointVector,
    pub scene: Scene,
    pub job: JobScript,
    pub params: Params,
}

// ---- file layout ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    robot: RobotFile,
    #[serde(default)]
    scene: SceneFile,
    job: JobFile,
    #[serde(default)]
    params: Params,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_init: Option<Vec<f64>>,
    joints: Vec<JointFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    length_m: f64,
    q_min_rad: f64,
    q_max_rad: f64,
    v_max_rad_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction: Option<[f64; 3]>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<BoundsFile>,
    #[serde(default)]
    stations: BTreeMap<String, [f64; 3]>,
    #[serde(default)]
    obstacles: Vec<ObstacleFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleFile {
    id: String,
    position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dmin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dmin_floor: Option<f64>,
    #[serde(default = "yes")]
    relaxable: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    waypoints: Vec<WaypointFile>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointFile {
    t: f64,
    position: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobFile {
    home: String,
    steps: Vec<StepFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepFile {
    action: TaskAction,
    station: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speed: Option<f64>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let prefix = &text[..offset.min(text.len())];
    let line = prefix.matches('\n').count() + 1;
    let column = prefix.rfind('\n').map_or(prefix.len(), |nl| prefix.len() - nl - 1) + 1;
    (line, column)
}

fn unit(key: &str, v: [f64; 3]) -> Result<Unit<Vector3<f64>>, ConfigError> {
    let v = Vector3::from(v);
    if !v.iter().all(|c| c.is_finite()) || v.norm() < 1e-9 {
        return Err(ConfigError::semantic(key, "must be a finite non-zero vector"));
    }
    Ok(Unit::new_normalize(v))
}

fn finite3(key: &str, v: [f64; 3]) -> Result<Position, ConfigError> {
    if !v.iter().all(|c| c.is_finite()) {
        return Err(ConfigError::semantic(key, "must be finite"));
    }
    Ok(Position::from(v))
}

/// Parses and validates a configuration document.
pub fn load_config(text: &str) -> Result<Config, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })?;
    file.params.validate()?;

    let mut joints = Vec::with_capacity(file.robot.joints.len());
    for (i, j) in file.robot.joints.iter().enumerate() {
        let key = format!("robot.joints[{i}]");
        joints.push(Joint {
            length_m: j.length_m,
            q_min_rad: j.q_min_rad,
            q_max_rad: j.q_max_rad,
            v_max_rad_s: j.v_max_rad_s,
            axis: unit(&format!("{key}.axis"), j.axis.unwrap_or([0.0, 0.0, 1.0]))?,
            direction: unit(&format!("{key}.direction"), j.direction.unwrap_or([1.0, 0.0, 0.0]))?,
        });
    }
    let base = finite3("robot.base", file.robot.base.unwrap_or([0.0; 3]))?;
    let robot = RobotModel::new(joints, base).map_err(|e| ConfigError::semantic("robot.joints", e.to_string()))?;

    let q_init = match file.robot.q_init {
        Some(q) => {
            if q.len() != robot.dof() {
                return Err(ConfigError::semantic("robot.q_init", format!("expected {} values, got {}", robot.dof(), q.len())));
            }
            JointVector::from_vec(q)
        }
        None => JointVector::zeros(robot.dof()),
    };
    for (i, (qi, j)) in q_init.iter().zip(robot.joints()).enumerate() {
        if !(*qi >= j.q_min_rad && *qi <= j.q_max_rad) {
            return Err(ConfigError::semantic(format!("robot.q_init[{i}]"), format!("{qi} lies outside the joint limits")));
        }
    }

    let bounds = match file.scene.bounds {
        Some(b) => {
            let bounds = Bounds { min: finite3("scene.bounds.min", b.min)?, max: finite3("scene.bounds.max", b.max)? };
            if (0..3).any(|i| bounds.min[i] >= bounds.max[i]) {
                return Err(ConfigError::semantic("scene.bounds", "min must be below max on every axis"));
            }
            bounds
        }
        None => Bounds::default(),
    };
    let mut stations = BTreeMap::new();
    for (name, p) in file.scene.stations {
        let p = finite3(&format!("scene.stations.{name}"), p)?;
        stations.insert(name, p);
    }
    let mut obstacles = Vec::new();
    for (i, o) in file.scene.obstacles.into_iter().enumerate() {
        let key = format!("scene.obstacles[{i}]");
        for (k, v) in [("dmin", o.dmin), ("dmin_floor", o.dmin_floor)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(ConfigError::semantic(format!("{key}.{k}"), "must be a non-negative number"));
                }
            }
        }
        let dmin = o.dmin.unwrap_or(file.params.dmin);
        if dmin <= 0.0 || o.dmin_floor.unwrap_or(file.params.dmin_floor.min(dmin)) > dmin {
            return Err(ConfigError::semantic(format!("{key}.dmin_floor"), "floor must not exceed dmin, and dmin must be positive"));
        }
        let mut waypoints = Vec::new();
        for (k, w) in o.waypoints.into_iter().enumerate() {
            waypoints.push(Waypoint { t: w.t, position: finite3(&format!("{key}.waypoints[{k}].position"), w.position)? });
        }
        obstacles.push(Obstacle {
            id: o.id,
            position: finite3(&format!("{key}.position"), o.position)?,
            waypoints,
            dmin: o.dmin,
            dmin_floor: o.dmin_floor,
            relaxable: o.relaxable,
        });
    }
    let scene = Scene { obstacles, stations, bounds };
    scene.validate().map_err(|m| ConfigError::semantic("scene", m))?;

    let home = scene
        .station(&file.job.home)
        .map(|(k, _)| k.to_string())
        .ok_or_else(|| ConfigError::semantic("job.home", format!("undefined station {:?}", file.job.home)))?;
    if file.job.steps.is_empty() {
        return Err(ConfigError::semantic("job.steps", "a job needs at least one step"));
    }
    let mut steps = Vec::new();
    for (i, s) in file.job.steps.into_iter().enumerate() {
        let key = format!("job.steps[{i}]");
        let station = scene
            .station(&s.station)
            .map(|(k, _)| k.to_string())
            .ok_or_else(|| ConfigError::semantic(format!("{key}.station"), format!("undefined station {:?}", s.station)))?;
        if let Some(v) = s.speed {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::semantic(format!("{key}.speed"), format!("must lie in (0, 1], got {v}")));
            }
        }
        steps.push(JobStep { action: s.action, station, speed_scale: s.speed });
    }

    Ok(Config { robot, q_init, scene, job: JobScript { home, steps }, params: file.params })
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

impl Config {
    /// Serializes back to the documented TOML layout.
    pub fn to_toml(&self) -> String {
        let file = ConfigFile {
            robot: RobotFile {
                base: Some(arr(&self.robot.base())),
                q_init: Some(self.q_init.iter().copied().collect()),
                joints: self
                    .robot
                    .joints()
                    .iter()
                    .map(|j| JointFile {
                        length_m: j.length_m,
                        q_min_rad: j.q_min_rad,
                        q_max_rad: j.q_max_rad,
                        v_max_rad_s: j.v_max_rad_s,
                        axis: Some(arr(&j.axis)),
                        direction: Some(arr(&j.direction)),
                    })
                    .collect(),
            },
            scene: SceneFile {
                bounds: Some(BoundsFile { min: arr(&self.scene.bounds.min), max: arr(&self.scene.bounds.max) }),
                stations: self.scene.stations.iter().map(|(k, v)| (k.clone(), arr(v))).collect(),
                obstacles: self
                    .scene
                    .obstacles
                    .iter()
                    .map(|o| ObstacleFile {
                        id: o.id.clone(),
                        position: arr(&o.position),
                        dmin: o.dmin,
                        dmin_floor: o.dmin_floor,
                        relaxable: o.relaxable,
                        waypoints: o.waypoints.iter().map(|w| WaypointFile { t: w.t, position: arr(&w.position) }).collect(),
                    })
                    .collect(),
            },
            job: JobFile {
                home: self.job.home.clone(),
                steps: self
                    .job
                    .steps
                    .iter()
                    .map(|s| StepFile { action: s.action, station: s.station.clone(), speed: s.speed_scale })
                    .collect(),
            },
            params: self.params.clone(),
        };
        toml::to_string(&file).expect("config is always representable as TOML")
    }

    /// Margin and floor for an obstacle, falling back to the global defaults.
    pub fn obstacle_margins(&self, o: &Obstacle) -> (f64, f64) {
        margins(&self.params, o)
    }
}

pub fn margins(params: &Params, o: &Obstacle) -> (f64, f64) {
    let dmin = o.dmin.unwrap_or(params.dmin);
    let floor = o.dmin_floor.unwrap_or(params.dmin_floor).min(dmin);
    (dmin, floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[robot]
joints = [{ length_m = 1.0, q_min_rad = -3.0, q_max_rad = 3.0, v_max_rad_s = 1.0 }]

[scene.stations]
A = [1.0, 0.0, 0.0]

[job]
home = "A"
steps = [{ action = "move", station = "A" }]
"#;

    #[test]
    fn minimal_document_loads_with_defaults() {
        let c = load_config(MINIMAL).unwrap();
        assert_eq!(c.robot.dof(), 1);
        assert_eq!(c.params, Params::default());
        assert!(c.scene.obstacles.is_empty());
        assert_eq!(c.q_init, JointVector::zeros(1));
        assert_eq!(c.params.rho_s, 10.0);
        assert_eq!(c.params.kappa, 1.5);
    }

    #[test]
    fn undefined_station_is_named() {
        let doc = MINIMAL.replace(r#"steps = [{ action = "move", station = "A" }]"#, r#"steps = [{ action = "pick", station = "B" }]"#);
        match load_config(&doc).unwrap_err() {
            ConfigError::Semantic { key, message } => {
                assert_eq!(key, "job.steps[0].station");
                assert!(message.contains("\"B\""));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        let doc = MINIMAL.replace("q_max_rad = 3.0", "q_max_rad = ");
        match load_config(&doc).unwrap_err() {
            ConfigError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let json = load_config("robot = 3").unwrap_err().to_json();
        assert!(json.contains("\"error\""));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = format!("{MINIMAL}\n[params]\nrho_x = 3.0\n");
        assert!(matches!(load_config(&doc), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn params_are_validated() {
        let doc = format!("{MINIMAL}\n[params]\nepsilon = -1.0\n");
        assert!(matches!(load_config(&doc), Err(ConfigError::Semantic { key, .. }) if key == "params.epsilon"));
        let mut p = Params::default();
        assert!(p.set("epsilon", 0.02).is_ok());
        assert_eq!(p.epsilon, 0.02);
        assert!(p.set("epsilon", 0.0).is_err());
        assert_eq!(p.epsilon, 0.02);
        assert!(p.set("nonsense", 1.0).is_err());
    }

    #[test]
    fn round_trip_minimal() {
        let c = load_config(MINIMAL).unwrap();
        let again = load_config(&c.to_toml()).unwrap();
        assert_eq!(c, again);
    }
}
