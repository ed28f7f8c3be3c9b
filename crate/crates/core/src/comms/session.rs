//! One operator session: link-shaped queues in both directions.
//!
//! Time is kept in integer microseconds so latencies are exact. Each
//! direction has a sender queue throttled by a token bucket, followed by an
//! in-flight queue released when `ready_at <= now`. Stream messages
//! (telemetry, haptics) waiting in the sender queue are dropped oldest-first
//! past their queue capacity; commands are never dropped. An emergency stop
//! skips both queues and is delivered in the tick it arrives.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::modes::{ModeState, NavMode, OpMode, ReasonCode, Rejection};
use crate::propulsion::FinId;

use super::link::LinkQuality;
use super::protocol::{decode, encode, salvage_command_id, Ack, Body, Command, CommandKind, Message, ProtocolError, Reject};

pub const US_PER_S: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Telemetry frames allowed to wait for bandwidth.
    pub telemetry_queue: usize,
    /// Haptic frames allowed to wait for bandwidth.
    pub haptic_queue: usize,
    /// Token bucket depth in seconds of link capacity.
    pub burst_s: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { telemetry_queue: 1, haptic_queue: 1, burst_s: 0.05 }
    }
}

/// Deficit token bucket: a message may leave whenever the balance is
/// non-negative, which keeps the long-run rate exact for any message size.
#[derive(Debug, Clone, Default)]
struct TokenBucket {
    bits: f64,
}

impl TokenBucket {
    fn refill(&mut self, rate_bps: f64, dt_s: f64, burst_s: f64) {
        let cap = (rate_bps * burst_s).max(0.0);
        self.bits = (self.bits + rate_bps * dt_s).min(cap);
    }

    fn take(&mut self, bits: f64) -> bool {
        if self.bits >= 0.0 {
            self.bits -= bits;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
struct Queued<T> {
    item: T,
    bits: f64,
    /// Telemetry / haptic stream tag for drop-oldest, `None` for reliable.
    stream: Option<u8>,
    seq: u64,
}

#[derive(Debug, Clone)]
struct InFlight<T> {
    item: T,
    ready_at: u64,
}

#[derive(Debug, Default)]
struct Direction<T> {
    bucket: TokenBucket,
    pending: VecDeque<Queued<T>>,
    in_flight: VecDeque<InFlight<T>>,
    last_ready: u64,
}

impl<T> Direction<T> {
    fn new() -> Self {
        Self { bucket: TokenBucket::default(), pending: VecDeque::new(), in_flight: VecDeque::new(), last_ready: 0 }
    }

    /// Move what the bucket allows onto the wire, then release arrivals.
    fn advance(&mut self, link: &LinkQuality, now: u64, dt_us: u64, burst_s: f64) -> Vec<T> {
        if link.available {
            let rate = link.bandwidth_kbps * 1e3;
            self.bucket.refill(rate, dt_us as f64 / US_PER_S as f64, burst_s);
            let latency = (link.latency_ms * 1e3).round() as u64;
            while let Some(head) = self.pending.front() {
                if !self.bucket.take(head.bits) {
                    break;
                }
                let q = self.pending.pop_front().expect("head exists");
                let ready_at = (now + latency).max(self.last_ready);
                self.last_ready = ready_at;
                self.in_flight.push_back(InFlight { item: q.item, ready_at });
            }
        }
        let mut out = Vec::new();
        while self.in_flight.front().is_some_and(|f| f.ready_at <= now) {
            out.push(self.in_flight.pop_front().expect("front exists").item);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Commands accepted by the handler, in delivery order.
    pub delivered: Vec<Command>,
    pub rejected: Vec<Reject>,
    /// Encoded messages reaching the operator this tick.
    pub transmitted: Vec<String>,
    /// Sequence numbers of stream messages dropped this tick.
    pub dropped: Vec<u64>,
}

#[derive(Debug)]
pub struct Session {
    config: SessionConfig,
    now_us: u64,
    next_seq: u64,
    urgent: Vec<Command>,
    up: Direction<Command>,
    down: Direction<String>,
    dropped: Vec<u64>,
}

impl Session {
    pub fn new(config: SessionConfig) -> Self {
        Self {
            config,
            now_us: 0,
            next_seq: 1,
            urgent: Vec::new(),
            up: Direction::new(),
            down: Direction::new(),
            dropped: Vec::new(),
        }
    }

    /// Start the session clock at `now_us` (joining a running simulation).
    pub fn starting_at(config: SessionConfig, now_us: u64) -> Self {
        Self { now_us, ..Self::new(config) }
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    /// Queue a robot-to-operator message stamped with the session clock.
    pub fn send(&mut self, body: Body) -> Result<u64, ProtocolError> {
        let seq = self.next_seq;
        let msg = Message { seq, t: self.now_us as f64 / US_PER_S as f64, body };
        let bytes = encode(&msg)?;
        self.next_seq += 1;
        let stream = match msg.body {
            Body::Telemetry(_) => Some(0),
            Body::Haptic(_) => Some(1),
            _ => None,
        };
        if let Some(tag) = stream {
            let cap = if tag == 0 { self.config.telemetry_queue } else { self.config.haptic_queue };
            while self.down.pending.iter().filter(|q| q.stream == Some(tag)).count() >= cap.max(1) {
                let idx = self.down.pending.iter().position(|q| q.stream == Some(tag)).expect("counted above");
                let q = self.down.pending.remove(idx).expect("index valid");
                self.dropped.push(q.seq);
            }
        }
        let bits = 8.0 * bytes.len() as f64;
        self.down.pending.push_back(Queued { item: bytes, bits, stream, seq });
        Ok(seq)
    }

    fn reply_reject(&mut self, command_id: Option<u64>, rej: &Rejection) -> Reject {
        let reject = Reject { command_id, code: rej.code, message: rej.message.clone() };
        // rejects carry only finite data, so encoding cannot fail
        let _ = self.send(Body::Reject(reject.clone()));
        reject
    }

    /// Bytes from the operator arriving at the current tick.
    pub fn receive(&mut self, bytes: &[u8]) -> Option<Reject> {
        let cmd = match decode(bytes) {
            Ok(Message { body: Body::Command(cmd), .. }) => cmd,
            Ok(other) => {
                let rej = Rejection::new(
                    ReasonCode::MalformedMessage,
                    format!("operator may only send commands, got {:?}", other.body.message_type()),
                );
                return Some(self.reply_reject(None, &rej));
            }
            Err(e) => return Some(self.reply_reject(salvage_command_id(bytes), &e.rejection())),
        };
        if cmd.is_emergency_stop() {
            self.urgent.push(cmd);
        } else {
            let bits = 8.0 * bytes.len() as f64;
            let seq = cmd.id;
            self.up.pending.push_back(Queued { item: cmd, bits, stream: None, seq });
        }
        None
    }

    fn dispatch<F>(&mut self, cmd: Command, handler: &mut F, report: &mut StepReport)
    where
        F: FnMut(&Command) -> Result<(), Rejection>,
    {
        match handler(&cmd) {
            Ok(()) => {
                let _ = self.send(Body::Ack(Ack { command_id: cmd.id }));
                report.delivered.push(cmd);
            }
            Err(rej) => {
                let r = self.reply_reject(Some(cmd.id), &rej);
                report.rejected.push(r);
            }
        }
    }

    /// Advance one tick of `dt_us`. `handler` applies each arriving command
    /// in order and decides its ack or reject.
    pub fn step<F>(&mut self, link: &LinkQuality, dt_us: u64, mut handler: F) -> StepReport
    where
        F: FnMut(&Command) -> Result<(), Rejection>,
    {
        let now = self.now_us;
        let mut report = StepReport::default();
        for cmd in std::mem::take(&mut self.urgent) {
            self.dispatch(cmd, &mut handler, &mut report);
        }
        let burst = self.config.burst_s;
        for cmd in self.up.advance(link, now, dt_us, burst) {
            self.dispatch(cmd, &mut handler, &mut report);
        }
        report.transmitted = self.down.advance(link, now, dt_us, burst);
        report.dropped = std::mem::take(&mut self.dropped);
        self.now_us = now + dt_us;
        report
    }

    /// Commands accepted from the operator but not yet delivered.
    pub fn commands_in_transit(&self) -> usize {
        self.up.pending.len() + self.up.in_flight.len() + self.urgent.len()
    }
}

/// Convenience wrapper: queue `outgoing`, ingest `incoming`, advance one tick.
pub fn session_step<F>(
    session: &mut Session,
    outgoing: Vec<Body>,
    incoming: &[Vec<u8>],
    link: &LinkQuality,
    dt_us: u64,
    handler: F,
) -> Result<StepReport, ProtocolError>
where
    F: FnMut(&Command) -> Result<(), Rejection>,
{
    for body in outgoing {
        session.send(body)?;
    }
    let mut early = Vec::new();
    for bytes in incoming {
        if let Some(r) = session.receive(bytes) {
            early.push(r);
        }
    }
    let mut report = session.step(link, dt_us, handler);
    early.append(&mut report.rejected);
    report.rejected = early;
    Ok(report)
}

fn reject(code: ReasonCode, message: impl Into<String>) -> Result<(), Rejection> {
    Err(Rejection::new(code, message))
}

/// Mode and payload checks applied to every command before it is executed.
/// Transition legality itself is left to the mode machine.
pub fn validate_command(mode: ModeState, cmd: &Command) -> Result<(), Rejection> {
    let manual = mode.op == OpMode::Int && mode.nav == NavMode::Mancon;
    match &cmd.kind {
        CommandKind::ModeTransition { .. } | CommandKind::EmergencyStop {} => Ok(()),
        CommandKind::WaypointUpload { plan } => {
            plan.validate().map_err(|e| Rejection::new(ReasonCode::InvalidPayload, e.to_string()))
        }
        CommandKind::FinOverride { fins } => {
            if !manual {
                return reject(ReasonCode::ModeForbidsCommand, format!("fin override requires INT + MANCON, mode is {mode}"));
            }
            let mut seen: HashSet<FinId> = HashSet::new();
            if fins.is_empty() || !fins.iter().all(|f| seen.insert(f.id)) {
                return reject(ReasonCode::InvalidPayload, "fins must be non-empty with distinct ids");
            }
            let finite = fins
                .iter()
                .all(|f| [f.swivel, f.amplitude, f.frequency, f.phase].iter().all(|v| v.is_finite()));
            if !finite || fins.iter().any(|f| f.amplitude < 0.0 || f.frequency < 0.0) {
                return reject(ReasonCode::InvalidPayload, "fin parameters must be finite and non-negative");
            }
            Ok(())
        }
        CommandKind::LimbMaster { limb, command } => {
            if !mode.permits_limbs() {
                return reject(ReasonCode::ModeForbidsCommand, format!("limb commands not permitted in {mode}"));
            }
            if !limb.is_commandable() {
                return reject(ReasonCode::UnknownTarget, "the light tentacle follows the camera limb");
            }
            command.validate().map_err(|e| Rejection::new(ReasonCode::InvalidPayload, e.to_string()))
        }
        CommandKind::JetFire { pump, nozzle_angle, .. } => {
            if !manual {
                return reject(ReasonCode::ModeForbidsCommand, format!("jet firing requires INT + MANCON, mode is {mode}"));
            }
            if !(pump.is_finite() && *pump >= 0.0 && nozzle_angle.is_finite()) {
                return reject(ReasonCode::InvalidPayload, "pump must be finite and non-negative");
            }
            Ok(())
        }
    }
}
