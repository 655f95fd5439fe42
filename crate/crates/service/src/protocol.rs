//! Wire protocol: one JSON document per WebSocket text frame.
//!
//! Every frame is an envelope `{"seq": u64, "t_sim": f64, "body": {...}}`.
//! `seq` counts frames per connection and direction, starting at 0. Bodies
//! are tagged by `type`.

use std::collections::BTreeMap;

use parley_core::decision::{OperatorMessage, Phase, Resolution};
use parley_core::intent::IntentKind;
use parley_core::kinematics::Position;
use parley_core::predictor::Relaxation;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage<B> {
    pub seq: u64,
    pub t_sim: f64,
    pub body: B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientBody {
    /// Free text, parsed with the command grammar.
    Utterance { text: String },
    /// A structured intent. `proposal_id` binds an accept/reject to one offer.
    Intent {
        intent: IntentKind,
        #[serde(default)]
        proposal_id: Option<u64>,
    },
    SnapshotRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub tick: u64,
    pub q: Vec<f64>,
    pub x: [f64; 3],
    pub h: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
    pub eta: BTreeMap<String, f64>,
    pub phase: Phase,
    pub speed_scale: f64,
    /// The last tick applied zero velocity because the QP had no solution.
    pub flagged: bool,
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleView {
    pub id: String,
    pub position: [f64; 3],
    pub dmin: f64,
    /// Margin currently enforced, below `dmin` while a relaxation is granted.
    pub effective_dmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub obstacles: Vec<ObstacleView>,
    pub stations: BTreeMap<String, [f64; 3]>,
    pub bounds: ([f64; 3], [f64; 3]),
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    Telemetry(TelemetryFrame),
    OperatorMessage(OperatorMessage),
    SceneUpdate(SceneView),
    ProposalOffer {
        id: u64,
        task: String,
        relaxations: Vec<Relaxation>,
        speed_scale: Option<f64>,
        predicted_completion_s: f64,
        /// Scene fingerprint; the offer expires when the scene changes.
        expiry: u64,
    },
    ProposalResolved { id: u64, resolution: Resolution },
    Error { message: String },
}

pub fn arr(p: &Position) -> [f64; 3] {
    [p[0], p[1], p[2]]
}

/// Assigns consecutive sequence numbers to outgoing frames.
#[derive(Debug, Default)]
pub struct Sequencer(u64);

impl Sequencer {
    pub fn wrap<B>(&mut self, t_sim: f64, body: B) -> WireMessage<B> {
        let seq = self.0;
        self.0 += 1;
        WireMessage { seq, t_sim, body }
    }
}

pub fn decode_client(text: &str) -> Result<WireMessage<ClientBody>, serde_json::Error> {
    serde_json::from_str(text)
}
