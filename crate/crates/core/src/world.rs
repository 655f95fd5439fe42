//! Ground-truth scene: point obstacles, named stations and the workspace box.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kinematics::Position;

pub mod config;

pub use config::{load_config, Config, ConfigError, JobScript, JobStep, Params, TaskAction};

/// Obstacle jumps to `position` at time `t` and stays there until the next
/// waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: String,
    pub position: Position,
    pub waypoints: Vec<Waypoint>,
    /// Protective radius; falls back to the global default when absent.
    pub dmin: Option<f64>,
    pub dmin_floor: Option<f64>,
    pub relaxable: bool,
}

impl Obstacle {
    pub fn fixed(id: impl Into<String>, position: Position) -> Self {
        Self { id: id.into(), position, waypoints: Vec::new(), dmin: None, dmin_floor: None, relaxable: true }
    }

    /// Piecewise-constant position: the initial position before the first
    /// waypoint, then the most recent waypoint.
    pub fn position_at(&self, t: f64) -> Position {
        self.waypoints
            .iter()
            .take_while(|w| w.t <= t)
            .last()
            .map_or(self.position, |w| w.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Position,
    pub max: Position,
}

impl Bounds {
    pub fn contains(&self, p: &Position) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self { min: Position::repeat(-10.0), max: Position::repeat(10.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub obstacles: Vec<Obstacle>,
    pub stations: BTreeMap<String, Position>,
    pub bounds: Bounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestObstacle {
    pub id: String,
    pub position: Position,
    pub distance: f64,
}

fn normalize_station(name: &str) -> String {
    let lower = name.trim().to_ascii_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    match words.as_slice() {
        ["station", rest @ ..] if !rest.is_empty() => rest.join(" "),
        _ => words.join(" "),
    }
}

impl Scene {
    pub fn with_obstacles(obstacles: Vec<Obstacle>) -> Self {
        Self { obstacles, ..Self::default() }
    }

    /// Checks station-name uniqueness (case-insensitive), obstacle-id
    /// uniqueness, finiteness and waypoint ordering.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, p) in &self.stations {
            if !seen.insert(normalize_station(name)) {
                return Err(format!("duplicate station name {name:?}"));
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(format!("station {name:?} has a non-finite position"));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.obstacles {
            if !ids.insert(o.id.as_str()) {
                return Err(format!("duplicate obstacle id {:?}", o.id));
            }
            if !o.position.iter().all(|v| v.is_finite()) {
                return Err(format!("obstacle {:?} has a non-finite position", o.id));
            }
            for pair in o.waypoints.windows(2) {
                if pair[1].t <= pair[0].t {
                    return Err(format!("obstacle {:?}: waypoint times must be strictly increasing", o.id));
                }
            }
            if o.waypoints.iter().any(|w| !w.t.is_finite() || !w.position.iter().all(|v| v.is_finite())) {
                return Err(format!("obstacle {:?} has a non-finite waypoint", o.id));
            }
        }
        Ok(())
    }

    /// Case-insensitive lookup; a leading "station" word is optional, so
    /// "station A", "a" and "A" all name the station `A`.
    pub fn station(&self, name: &str) -> Option<(&str, Position)> {
        let wanted = normalize_station(name);
        self.stations
            .iter()
            .find(|(k, _)| normalize_station(k) == wanted)
            .map(|(k, p)| (k.as_str(), *p))
    }

    pub fn obstacle(&self, id: &str) -> Option<&Obstacle> {
        self.obstacles.iter().find(|o| o.id == id)
    }

    pub fn obstacle_position(&self, id: &str, t: f64) -> Option<Position> {
        self.obstacle(id).map(|o| o.position_at(t))
    }

    /// Adds the obstacle or moves an existing one (dropping its script).
    pub fn place_obstacle(&mut self, id: &str, position: Position) {
        match self.obstacles.iter_mut().find(|o| o.id == id) {
            Some(o) => {
                o.position = position;
                o.waypoints.clear();
            }
            None => self.obstacles.push(Obstacle::fixed(id, position)),
        }
    }

    pub fn remove_obstacle(&mut self, id: &str) -> bool {
        let before = self.obstacles.len();
        self.obstacles.retain(|o| o.id != id);
        before != self.obstacles.len()
    }

    /// Identity of the obstacle configuration at `t`. Two scenes with the
    /// same ids at bitwise-identical positions share a fingerprint.
    pub fn fingerprint(&self, t: f64) -> u64 {
        let mut hash = Fnv::new();
        for o in &self.obstacles {
            hash.bytes(o.id.as_bytes());
            hash.bytes(&[0xff]);
            for v in o.position_at(t).iter() {
                hash.f64(*v);
            }
        }
        hash.finish()
    }
}

/// FNV-1a, used for scene fingerprints and rollout ids.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_bits().to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

/// Closest obstacle to `x` at time `t`; ties go to the lowest id.
pub fn nearest_obstacle(scene: &Scene, x: &Position, t: f64) -> Option<NearestObstacle> {
    scene
        .obstacles
        .iter()
        .map(|o| {
            let p = o.position_at(t);
            NearestObstacle { id: o.id.clone(), position: p, distance: (x - p).norm() }
        })
        .min_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)))
}

/// Immutable copy with every scripted obstacle frozen at its position at `t`.
pub fn snapshot(scene: &Scene, t: f64) -> Scene {
    let mut frozen = scene.clone();
    for o in &mut frozen.obstacles {
        o.position = o.position_at(t);
        o.waypoints.clear();
    }
    frozen
}
