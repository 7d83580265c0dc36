//! Scenario execution.
//!
//! Accelerated runs use the in-process lockstep; realtime runs start both
//! TCP services on loopback and a driver that issues the schedule through
//! the operator bridge like a person at the console would.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::thread;
use std::time::Duration;

use mgrid_runtime::bridge::BridgeMessage;
use mgrid_runtime::clock::{ClockMode, TickStats};
use mgrid_runtime::record::{read_record, CsvError, RecordWriter};
use mgrid_runtime::services::{CtlEndpoints, CtlService, SimService};
use mgrid_runtime::{run_lockstep, RuntimeError, ScheduledCommand};
use thiserror::Error;

use crate::metrics::{compute_metrics, Limits, Metrics, MetricsOptions};
use crate::scenario::{Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub accelerated: bool,
    pub out_dir: PathBuf,
    /// Realtime only; 0 picks a free port.
    pub c37_port: u16,
    pub modbus_port: u16,
    pub bridge_port: u16,
}

impl RunOptions {
    pub fn accelerated(out_dir: impl Into<PathBuf>) -> Self {
        Self { accelerated: true, out_dir: out_dir.into(), c37_port: 0, modbus_port: 0, bridge_port: 0 }
    }

    pub fn realtime(out_dir: impl Into<PathBuf>) -> Self {
        Self { accelerated: false, ..Self::accelerated(out_dir) }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub record: PathBuf,
    pub metrics: Metrics,
    pub replies: Vec<BridgeMessage>,
    /// Realtime runs only.
    pub sim_clock: Option<TickStats>,
    pub ctl_clock: Option<TickStats>,
    /// Controller telemetry, realtime runs only.
    pub telemetry: Option<PathBuf>,
}

pub const RECORD_FILE: &str = "record.csv";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";

/// Runs `scenario`, writing `<out_dir>/<name>/{record.csv, scenario.toml,
/// metrics.json}`. The record is flushed even when the run fails.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    scenario.validate()?;
    let dir = opts.out_dir.join(&scenario.name);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(SCENARIO_FILE), scenario.to_toml())?;
    let record = dir.join(RECORD_FILE);
    let mut writer = RecordWriter::create(&record)?;

    let mut outcome = RunOutcome {
        dir: dir.clone(),
        record: record.clone(),
        metrics: compute_metrics(&[], &Limits::of(scenario), &MetricsOptions::default()),
        replies: Vec::new(),
        sim_clock: None,
        ctl_clock: None,
        telemetry: None,
    };
    let result = if opts.accelerated {
        run_lockstep(scenario.sim_config(), scenario.ctl_config(), &scenario.commands(), Some(&mut writer), |_, _| {})
            .map(|s| outcome.replies = s.replies)
            .map_err(RunError::from)
    } else {
        run_realtime(scenario, opts, &dir, &mut writer, &mut outcome)
    };
    let rows = writer.rows();
    writer.finish()?;
    result?;
    log::info!("{}: {rows} ticks recorded to {}", scenario.name, record.display());

    let rows = read_record(&record)?;
    outcome.metrics = compute_metrics(&rows, &Limits::of(scenario), &MetricsOptions::default());
    std::fs::write(dir.join(METRICS_FILE), outcome.metrics.to_json())?;
    Ok(outcome)
}

fn loopback(port: u16) -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], port))
}

fn run_realtime(
    scenario: &Scenario,
    opts: &RunOptions,
    dir: &Path,
    writer: &mut RecordWriter,
    outcome: &mut RunOutcome,
) -> Result<(), RunError> {
    let sim = SimService::bind(scenario.sim_config(), loopback(opts.c37_port), loopback(opts.modbus_port))?;
    let mut endpoints = CtlEndpoints::new(sim.c37_addr(), sim.modbus_addr());
    endpoints.bridge = Some(loopback(opts.bridge_port));
    let mut ctl = CtlService::new(scenario.ctl_config(), endpoints)?;
    let bridge = ctl.bridge_addr().expect("bridge enabled");
    let ctl_stop = ctl.stop_flag();
    let telemetry_path = dir.join(TELEMETRY_FILE);
    let telemetry_file = BufWriter::new(File::create(&telemetry_path)?);

    let ctl_thread = thread::Builder::new().name("controller".into()).spawn(move || {
        let mut out = telemetry_file;
        let summary = ctl.run(ClockMode::Realtime, None, |t| {
            let _ = out.write_all(BridgeMessage::Telemetry(t.clone()).to_line().as_bytes());
        });
        let _ = out.flush();
        summary
    })?;
    let commands = scenario.commands();
    let driver = thread::Builder::new().name("schedule".into()).spawn(move || drive_schedule(bridge, &commands))?;

    let mut sim = sim;
    let sim_result = sim.run(ClockMode::Realtime, Some(writer), |_| {});
    drop(sim);
    ctl_stop.store(true, Ordering::Relaxed);
    let ctl_summary = ctl_thread.join().map_err(|_| RunError::Other("controller thread panicked".into()))?;
    outcome.replies = driver.join().map_err(|_| RunError::Other("schedule driver panicked".into()))?;
    outcome.telemetry = Some(telemetry_path);

    let sim_summary = sim_result?;
    let ctl_summary = ctl_summary?;
    log::info!(
        "simulator: {} ticks, {} overruns, mean period {:?}; controller: {} ticks, {} reconnects, {} stale",
        sim_summary.ticks,
        sim_summary.clock.overruns,
        sim_summary.clock.mean_period(),
        ctl_summary.ticks,
        ctl_summary.reconnects,
        ctl_summary.stale_ticks,
    );
    outcome.sim_clock = Some(sim_summary.clock);
    outcome.ctl_clock = Some(ctl_summary.clock);
    Ok(())
}

/// Follows the bridge telemetry and sends each command once the
/// controller's clock reaches its time. Returns the replies.
fn drive_schedule(bridge: SocketAddr, commands: &[ScheduledCommand]) -> Vec<BridgeMessage> {
    let mut replies = Vec::new();
    if commands.is_empty() {
        return replies;
    }
    let stream = match TcpStream::connect(bridge) {
        Ok(s) => s,
        Err(e) => {
            log::error!("schedule driver cannot reach the bridge: {e}");
            return replies;
        }
    };
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let Ok(mut tx) = stream.try_clone() else { return replies };
    let mut next = 0;
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        let Ok(msg) = serde_json::from_str::<BridgeMessage>(&line) else {
            log::warn!("unparseable bridge line {line:?}");
            continue;
        };
        match msg {
            BridgeMessage::Telemetry(t) => {
                while next < commands.len() && commands[next].t <= t.t + 1e-9 {
                    log::info!("t={:.1}: {}", t.t, commands[next].line);
                    if tx.write_all(format!("{}\n", commands[next].line).as_bytes()).is_err() {
                        return replies;
                    }
                    next += 1;
                }
            }
            reply => {
                replies.push(reply);
                if replies.len() == commands.len() {
                    break;
                }
            }
        }
    }
    replies
}
