use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use parley::protocol::{ServerBody, WireMessage};
use parley::server::{self, Pacing};
use parley_core::decision::MessageKind;
use parley_core::world::load_config;
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn demo() -> parley_core::world::Config {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../config/demo.toml")).unwrap();
    load_config(&text).unwrap()
}

async fn connect(addr: std::net::SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next_frame(ws: &mut Ws) -> Option<WireMessage<ServerBody>> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.ok()??.ok()?;
        match msg {
            Message::Text(t) => return Some(serde_json::from_str(&t).expect("server frames decode")),
            Message::Close(_) => return None,
            _ => continue,
        }
    }
}

async fn send(ws: &mut Ws, body: serde_json::Value) {
    let frame = serde_json::json!({"seq": 0, "t_sim": 0.0, "body": body});
    ws.send(Message::Text(frame.to_string().into())).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn status_returns_job_status() {
    let srv = server::start(&demo(), "127.0.0.1:0".parse().unwrap(), Pacing::Unpaced).await.unwrap();
    let mut ws = connect(srv.addr).await;
    send(&mut ws, serde_json::json!({"type": "utterance", "text": "status"})).await;
    let mut last_seq = None;
    let found = loop {
        let Some(f) = next_frame(&mut ws).await else { break false };
        if let Some(prev) = last_seq {
            assert_eq!(f.seq, prev + 1, "no sequence gaps");
        }
        last_seq = Some(f.seq);
        if let ServerBody::OperatorMessage(m) = &f.body {
            if m.kind == MessageKind::JobStatus {
                break true;
            }
        }
    };
    assert!(found);
    srv.shutdown();
}

async fn telemetry(ws: &mut Ws, n: usize) -> std::collections::BTreeMap<u64, String> {
    let mut out = std::collections::BTreeMap::new();
    while out.len() < n {
        let f = next_frame(ws).await.expect("stream stays open");
        if let ServerBody::Telemetry(t) = f.body {
            out.insert(t.tick, serde_json::to_string(&t).unwrap());
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn clients_see_the_same_telemetry() {
    let srv = server::start(&demo(), "127.0.0.1:0".parse().unwrap(), Pacing::WallClock).await.unwrap();
    let mut a = connect(srv.addr).await;
    let mut b = connect(srv.addr).await;
    send(&mut a, serde_json::json!({"type": "utterance", "text": "move to A"})).await;

    let (ta, tb) = tokio::join!(telemetry(&mut a, 40), telemetry(&mut b, 40));
    let common: Vec<_> = ta.keys().filter(|k| tb.contains_key(k)).collect();
    assert!(common.len() >= 20, "clients overlap on {} ticks", common.len());
    for k in common {
        assert_eq!(ta[k], tb[k], "tick {k}");
    }
    srv.shutdown();
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_frame_closes_only_that_connection() {
    let srv = server::start(&demo(), "127.0.0.1:0".parse().unwrap(), Pacing::Unpaced).await.unwrap();
    let mut bad = connect(srv.addr).await;
    let mut good = connect(srv.addr).await;
    bad.send(Message::Text("{\"seq\": 0, \"body\": {\"type\": \"launch\"}}".into())).await.unwrap();
    let mut saw_error = false;
    while let Some(f) = next_frame(&mut bad).await {
        if matches!(f.body, ServerBody::Error { .. }) {
            saw_error = true;
        }
    }
    assert!(saw_error, "an Error frame precedes the close");

    send(&mut good, serde_json::json!({"type": "snapshot_request"})).await;
    let mut saw_scene = false;
    for _ in 0..200 {
        let f = next_frame(&mut good).await.expect("the other client stays connected");
        if let ServerBody::SceneUpdate(v) = f.body {
            assert_eq!(v.obstacles.len(), 1);
            saw_scene = true;
            break;
        }
    }
    assert!(saw_scene);
    srv.shutdown();
}
