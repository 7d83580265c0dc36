//! Operator bridge.
//!
//! Line protocol over TCP. Clients send plain-text commands:
//!
//! ```text
//! mode off|adaptive|manual
//! ref <P kW> <Q kvar>
//! gains p|q <k_p> <k_i> <k_d>
//! ```
//!
//! and receive one JSON object per line, tagged by `"type"`: `telemetry`
//! once per controller tick, `ack` or `error` in reply to each command.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use mgrid_core::control::{Controller, LoopTuning, Mode, TickReport, TickStatus};
use serde::{Deserialize, Serialize};

use crate::record::status_name;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BridgeCommand {
    Mode(Mode),
    Ref { p: f64, q: f64 },
    Gains { channel: usize, k_p: f64, k_i: f64, k_d: f64 },
}

fn number(tok: Option<&str>, what: &str) -> Result<f64, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    let v: f64 = tok.parse().map_err(|_| format!("{what}: {tok:?} is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{what} must be finite"))
    }
}

pub fn parse_command(line: &str) -> Result<BridgeCommand, String> {
    let mut toks = line.split_whitespace();
    let cmd = match toks.next() {
        Some("mode") => {
            let m = toks.next().ok_or("missing mode")?;
            BridgeCommand::Mode(m.parse().map_err(|_| format!("unknown mode {m:?}"))?)
        }
        Some("ref") => BridgeCommand::Ref { p: number(toks.next(), "P")?, q: number(toks.next(), "Q")? },
        Some("gains") => {
            let channel = match toks.next() {
                Some("p") => 0,
                Some("q") => 1,
                other => return Err(format!("gains channel must be p or q, got {other:?}")),
            };
            BridgeCommand::Gains {
                channel,
                k_p: number(toks.next(), "k_p")?,
                k_i: number(toks.next(), "k_i")?,
                k_d: number(toks.next(), "k_d")?,
            }
        }
        Some(other) => return Err(format!("unknown command {other:?}")),
        None => return Err("empty command".into()),
    };
    if toks.next().is_some() {
        return Err("trailing arguments".into());
    }
    Ok(cmd)
}

pub fn apply_command(cmd: BridgeCommand, ctl: &mut Controller<f64>) -> Result<(), String> {
    match cmd {
        BridgeCommand::Mode(m) => ctl.set_mode(m),
        BridgeCommand::Ref { p, q } => {
            let inv = ctl.config().inverter;
            // Same bound the console enforces before sending.
            if p.abs() > inv.p_max || q.abs() > inv.q_max {
                return Err(format!("reference ({p}, {q}) out of range"));
            }
            ctl.set_manual_reference(p, q).map_err(|e| e.to_string())?;
        }
        BridgeCommand::Gains { channel, k_p, k_i, k_d } => {
            let base = if channel == 0 { ctl.config().gains_p } else { ctl.config().gains_q };
            let tuning = LoopTuning { k_p, k_i, k_d, ..base };
            ctl.set_tuning(channel, tuning).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

/// Parses and applies one command line, producing the reply.
pub fn handle_line(line: &str, ctl: &mut Controller<f64>, tick: u64) -> BridgeMessage {
    let line = line.trim();
    match parse_command(line).and_then(|c| apply_command(c, ctl)) {
        Ok(()) => BridgeMessage::Ack { command: line.to_string(), tick },
        Err(message) => BridgeMessage::Error { command: line.to_string(), message },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TelemetryFlags {
    pub recovery: bool,
    pub stale: bool,
    pub failsafe: bool,
    pub saturated_p: bool,
    pub saturated_q: bool,
    pub decouple_fallback: bool,
    pub soc_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub tick: u64,
    pub t: f64,
    pub p_pcc: Option<f64>,
    pub q_pcc: Option<f64>,
    pub soc: Option<f64>,
    pub p_pv: Option<f64>,
    pub p_hat: f64,
    pub q_hat: f64,
    /// Reference components; absent while off or holding.
    pub p_ref: Option<f64>,
    pub p_ref_manual: Option<f64>,
    pub p_ref_demand: Option<f64>,
    pub p_ref_soc: Option<f64>,
    pub q_ref: Option<f64>,
    pub p_err: Option<f64>,
    pub q_err: Option<f64>,
    pub cmd_p: f64,
    pub cmd_q: f64,
    pub mode: Mode,
    pub status: String,
    pub flags: TelemetryFlags,
}

impl Telemetry {
    /// `measured` is (P_PCC, Q_PCC, SoC, P_PV) as the controller last saw it.
    pub fn from_report(r: &TickReport<f64>, t: f64, measured: Option<(f64, f64, f64, f64)>) -> Self {
        let active = matches!(r.status, TickStatus::Tracking | TickStatus::Recovery);
        let some = |v: f64| active.then_some(v);
        Self {
            tick: r.tick,
            t,
            p_pcc: measured.map(|m| m.0),
            q_pcc: measured.map(|m| m.1),
            soc: measured.map(|m| m.2),
            p_pv: measured.map(|m| m.3),
            p_hat: r.demand_estimate[0],
            q_hat: r.demand_estimate[1],
            p_ref: some(r.p_ref.total),
            p_ref_manual: some(r.p_ref.manual),
            p_ref_demand: some(r.p_ref.demand),
            p_ref_soc: some(r.p_ref.soc),
            q_ref: some(r.q_ref.total),
            p_err: some(r.p_ref.error),
            q_err: some(r.q_ref.error),
            cmd_p: r.cmd.p,
            cmd_q: r.cmd.q,
            mode: r.mode,
            status: status_name(r.status).to_string(),
            flags: TelemetryFlags {
                recovery: r.status == TickStatus::Recovery,
                stale: r.status == TickStatus::Held,
                failsafe: r.status == TickStatus::Failsafe,
                saturated_p: r.flags.saturated_p,
                saturated_q: r.flags.saturated_q,
                decouple_fallback: r.flags.decouple_fallback,
                soc_active: r.flags.soc_active,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BridgeMessage {
    Telemetry(Telemetry),
    Ack { command: String, tick: u64 },
    Error { command: String, message: String },
}

impl BridgeMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("bridge messages serialize");
        s.push('\n');
        s
    }
}

const CLIENT_QUEUE: usize = 256;

type Outbox = SyncSender<String>;

/// A command line from a client, with the client's outbox for the reply.
pub struct PendingCommand {
    pub line: String,
    reply: Outbox,
}

impl PendingCommand {
    pub fn reply(&self, msg: &BridgeMessage) {
        let _ = self.reply.try_send(msg.to_line());
    }
}

/// TCP endpoint. The controller loop polls it for commands and pushes
/// telemetry; slow clients lose telemetry lines rather than stall the loop.
pub struct BridgeServer {
    addr: SocketAddr,
    clients: Arc<Mutex<Vec<Outbox>>>,
    commands: Receiver<PendingCommand>,
    stop: Arc<AtomicBool>,
}

impl BridgeServer {
    pub fn bind(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let clients: Arc<Mutex<Vec<Outbox>>> = Arc::default();
        let (cmd_tx, commands) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        {
            let clients = clients.clone();
            let stop = stop.clone();
            thread::Builder::new().name("bridge-accept".into()).spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            log::info!("operator bridge client {peer}");
                            if let Err(e) = serve_client(stream, &clients, cmd_tx.clone()) {
                                log::warn!("bridge client {peer}: {e}");
                            }
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            thread::sleep(Duration::from_millis(20));
                        }
                        Err(e) => log::warn!("bridge accept: {e}"),
                    }
                }
            })?;
        }
        Ok(Self { addr, clients, commands, stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn poll_commands(&self) -> Vec<PendingCommand> {
        self.commands.try_iter().collect()
    }

    pub fn broadcast(&self, msg: &BridgeMessage) {
        let line = msg.to_line();
        let mut clients = self.clients.lock().expect("bridge client list");
        clients.retain(|c| !matches!(c.try_send(line.clone()), Err(TrySendError::Disconnected(_))));
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn serve_client(
    stream: TcpStream,
    clients: &Arc<Mutex<Vec<Outbox>>>,
    commands: mpsc::Sender<PendingCommand>,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let (out_tx, out_rx) = mpsc::sync_channel::<String>(CLIENT_QUEUE);
    let mut writer = stream.try_clone()?;
    thread::Builder::new().name("bridge-write".into()).spawn(move || {
        for line in out_rx {
            if writer.write_all(line.as_bytes()).is_err() {
                break;
            }
        }
    })?;
    let reply = out_tx.clone();
    clients.lock().expect("bridge client list").push(out_tx);
    thread::Builder::new().name("bridge-read".into()).spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if commands.send(PendingCommand { line, reply: reply.clone() }).is_err() {
                break;
            }
        }
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_commands() {
        assert_eq!(parse_command("mode manual"), Ok(BridgeCommand::Mode(Mode::Manual)));
        assert_eq!(parse_command(" ref 150 -20.5 "), Ok(BridgeCommand::Ref { p: 150.0, q: -20.5 }));
        assert_eq!(
            parse_command("gains q 0.3 1.5 0"),
            Ok(BridgeCommand::Gains { channel: 1, k_p: 0.3, k_i: 1.5, k_d: 0.0 })
        );
        assert!(parse_command("mode fast").is_err());
        assert!(parse_command("ref 1").is_err());
        assert!(parse_command("ref nan 0").is_err());
        assert!(parse_command("mode off now").is_err());
        assert!(parse_command("").is_err());
    }

    #[test]
    fn messages_are_tagged() {
        let ack = BridgeMessage::Ack { command: "mode off".into(), tick: 3 };
        let line = ack.to_line();
        assert!(line.starts_with(r#"{"type":"ack""#), "{line}");
        let back: BridgeMessage = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, ack);
    }
}
