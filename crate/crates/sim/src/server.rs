//! Live operator server.
//!
//! The simulation runs on one task that owns it outright. WebSocket
//! sessions and HTTP handlers talk to it only through a control channel;
//! telemetry leaves as already-encoded text.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Json, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use ursula_core::harness::{SessionId, Simulation};
use ursula_core::modes::ModeState;
use ursula_core::replay::ReplayLog;
use ursula_core::scenario::{Scenario, ScenarioError};

/// Wall-clock pacing of the live loop.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    /// JSON-lines replay log of the current run.
    pub log: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { speed: 1.0, log: None }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Status {
    pub scenario: String,
    pub t: f64,
    pub mode: ModeState,
    pub finished: bool,
    pub sessions: usize,
    pub fault: Option<String>,
}

type ClientId = u64;

enum Control {
    Open { client: ClientId, tx: mpsc::UnboundedSender<String> },
    Close(ClientId),
    Inbound(ClientId, Vec<u8>),
    Load(Box<Scenario>, oneshot::Sender<Result<(), String>>),
}

#[derive(Clone)]
struct AppState {
    control: mpsc::UnboundedSender<Control>,
    status: watch::Receiver<Status>,
    scenario: watch::Receiver<Scenario>,
    next_client: std::sync::Arc<std::sync::atomic::AtomicU64>,
}

struct Client {
    session: SessionId,
    tx: mpsc::UnboundedSender<String>,
}

struct Runner {
    sim: Simulation,
    clients: BTreeMap<ClientId, Client>,
    log: Option<BufWriter<File>>,
    log_path: Option<PathBuf>,
    replay: ReplayLog,
    fault: Option<String>,
}

impl Runner {
    fn new(scenario: Scenario, log_path: Option<PathBuf>) -> anyhow::Result<Self> {
        let sim = Simulation::new(scenario)?;
        let log = match &log_path {
            Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
            None => None,
        };
        Ok(Self { sim, clients: BTreeMap::new(), log, log_path, replay: ReplayLog::new(), fault: None })
    }

    fn reload(&mut self, scenario: Scenario) -> anyhow::Result<()> {
        let mut fresh = Runner::new(scenario, self.log_path.clone())?;
        for (id, c) in std::mem::take(&mut self.clients) {
            let session = fresh.sim.open_session();
            fresh.clients.insert(id, Client { session, tx: c.tx });
        }
        *self = fresh;
        Ok(())
    }

    fn status(&self) -> Status {
        Status {
            scenario: self.sim.scenario().name.clone(),
            t: self.sim.time(),
            mode: self.sim.mode(),
            finished: self.sim.finished(),
            sessions: self.clients.len(),
            fault: self.fault.clone(),
        }
    }

    fn control(&mut self, msg: Control) {
        match msg {
            Control::Open { client, tx } => {
                let session = self.sim.open_session();
                self.clients.insert(client, Client { session, tx });
            }
            Control::Close(client) => {
                if let Some(c) = self.clients.remove(&client) {
                    self.sim.close_session(c.session);
                }
            }
            Control::Inbound(client, bytes) => {
                if let Some(c) = self.clients.get(&client) {
                    let _ = self.sim.receive(c.session, &bytes);
                }
            }
            Control::Load(..) => unreachable!("handled by the loop"),
        }
    }

    fn tick(&mut self) {
        if self.sim.finished() || self.fault.is_some() {
            return;
        }
        match self.sim.step() {
            Ok(out) => {
                for (session, text) in out.outbound {
                    if let Some(c) = self.clients.values().find(|c| c.session == session) {
                        let _ = c.tx.send(text);
                    }
                }
                if let Some(record) = out.record {
                    if let Some(w) = self.log.as_mut() {
                        if let Err(e) = writeln!(w, "{}", ReplayLog::line(&record)) {
                            self.fault = Some(format!("writing log: {e}"));
                        }
                    }
                    if let Err(e) = self.replay.push(record) {
                        self.fault = Some(e.to_string());
                    }
                }
                if self.sim.finished() {
                    if let Some(w) = self.log.as_mut() {
                        let _ = w.flush();
                    }
                    log::info!("run finished, digest {}", self.replay.digest());
                }
            }
            Err(e) => {
                log::error!("simulation fault: {e}");
                self.fault = Some(e.to_string());
            }
        }
    }
}

async fn run_loop(
    mut runner: Runner,
    mut control: mpsc::UnboundedReceiver<Control>,
    status: watch::Sender<Status>,
    scenario: watch::Sender<Scenario>,
    speed: f64,
) {
    let period = |r: &Runner| Duration::from_secs_f64(r.sim.scenario().dt / speed);
    let mut interval = tokio::time::interval(period(&runner));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            msg = control.recv() => match msg {
                None => break,
                Some(Control::Load(sc, done)) => {
                    let name = sc.name.clone();
                    let result = runner.reload(*sc.clone()).map_err(|e| format!("{e:#}"));
                    if result.is_ok() {
                        log::info!("loaded scenario {name}");
                        scenario.send_replace(*sc);
                        interval = tokio::time::interval(period(&runner));
                        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                    }
                    status.send_replace(runner.status());
                    let _ = done.send(result);
                }
                Some(other) => runner.control(other),
            },
            _ = interval.tick() => runner.tick(),
        }
        status.send_replace(runner.status());
    }
}

pub struct Server {
    pub addr: SocketAddr,
    pub handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

/// Bind and serve until the returned task is dropped or aborted.
pub async fn serve(listener: TcpListener, scenario: Scenario, options: ServeOptions) -> anyhow::Result<Server> {
    anyhow::ensure!(options.speed.is_finite() && options.speed > 0.0, "speed must be positive");
    let runner = Runner::new(scenario.clone(), options.log.clone())?;
    let (control_tx, control_rx) = mpsc::unbounded_channel();
    let (status_tx, status_rx) = watch::channel(runner.status());
    let (scenario_tx, scenario_rx) = watch::channel(scenario);
    tokio::spawn(run_loop(runner, control_rx, status_tx, scenario_tx, options.speed));

    let state = AppState {
        control: control_tx,
        status: status_rx,
        scenario: scenario_rx,
        next_client: Default::default(),
    };
    let app = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/health", get(health))
        .route("/scenario", get(get_scenario).post(post_scenario))
        .with_state(state);
    let addr = listener.local_addr()?;
    log::info!("serving on {addr}");
    let handle = tokio::spawn(async move { axum::serve(listener, app).await });
    Ok(Server { addr, handle })
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let st = s.status.borrow().clone();
    Json(json!({ "status": if st.fault.is_some() { "fault" } else { "ok" }, "sim": st }))
}

async fn get_scenario(State(s): State<AppState>) -> Json<Scenario> {
    Json(s.scenario.borrow().clone())
}

fn violations_response(e: ScenarioError) -> Response {
    let errors: Vec<_> = e.violations().into_iter().map(|v| json!({ "path": v.path, "message": v.message })).collect();
    (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response()
}

async fn post_scenario(State(s): State<AppState>, headers: HeaderMap, body: String) -> Response {
    let toml = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("toml"));
    let parsed = if toml { Scenario::from_toml(&body) } else { Scenario::from_json(&body) };
    let scenario = match parsed {
        Ok(sc) => sc,
        Err(e) => return violations_response(e),
    };
    let name = scenario.name.clone();
    let (done_tx, done_rx) = oneshot::channel();
    let result = match s.control.send(Control::Load(Box::new(scenario), done_tx)) {
        Ok(()) => done_rx.await.unwrap_or_else(|_| Err("simulation stopped".into())),
        Err(_) => Err("simulation stopped".into()),
    };
    match result {
        Ok(()) => Json(json!({ "status": "loaded", "scenario": name })).into_response(),
        Err(f) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "errors": [{ "path": ".", "message": f }] })))
            .into_response(),
    }
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(s): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, s))
}

async fn client(socket: WebSocket, s: AppState) {
    let id = s.next_client.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    if s.control.send(Control::Open { client: id, tx }).is_err() {
        return;
    }
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(WsMessage::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        let bytes = match msg {
            WsMessage::Text(t) => t.as_bytes().to_vec(),
            WsMessage::Binary(b) => b.to_vec(),
            WsMessage::Close(_) => break,
            _ => continue,
        };
        if s.control.send(Control::Inbound(id, bytes)).is_err() {
            break;
        }
    }
    let _ = s.control.send(Control::Close(id));
    writer.abort();
}
