//! Simulator and controller over loopback TCP with the realtime clock.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::Duration;

use mgrid_core::control::{ControllerConfig, Mode};
use mgrid_core::lti::default_plant_model;
use mgrid_core::plant::{BatteryModel, DemandProfile, InverterModel, PiecewiseLinear, PmuLayout};
use mgrid_runtime::bridge::{BridgeMessage, Telemetry};
use mgrid_runtime::clock::ClockMode;
use mgrid_runtime::record::RecordRow;
use mgrid_runtime::services::{CtlEndpoints, CtlService, SimService};
use mgrid_runtime::{CtlConfig, SimConfig};

const TS: f64 = 0.05;

fn sim_config(duration: f64) -> SimConfig {
    SimConfig {
        ts: TS,
        duration,
        model: default_plant_model(TS),
        inverter: InverterModel::new(250.0, 250.0, 80.0).unwrap(),
        battery: BatteryModel::new(1e5, 85.0).unwrap(),
        demand: DemandProfile::constant(200.0),
        reactive_ratio: 0.3,
        pv: PiecewiseLinear::constant(50.0),
        pmu: PmuLayout::default(),
        epoch: 1_700_000_000,
    }
}

fn ctl_config(mode: Mode) -> CtlConfig {
    CtlConfig {
        controller: ControllerConfig {
            ts: TS,
            mode,
            rate_limit: 50.0,
            inverter: InverterModel::new(250.0, 250.0, 80.0).unwrap(),
            ..ControllerConfig::default()
        },
        model: default_plant_model(TS),
        delay_in: 0,
        delay_out: 0,
    }
}

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn spawn_sim(sim: SimService) -> thread::JoinHandle<Vec<RecordRow>> {
    thread::spawn(move || {
        let mut sim = sim;
        let mut rows = Vec::new();
        sim.run(ClockMode::Realtime, None, |r| rows.push(r.clone())).unwrap();
        rows
    })
}

#[test]
fn controller_drives_simulator_and_answers_the_bridge() {
    let sim = SimService::bind(sim_config(8.0), loopback(), loopback()).unwrap();
    let mut endpoints = CtlEndpoints::new(sim.c37_addr(), sim.modbus_addr());
    endpoints.bridge = Some(loopback());
    let sim = spawn_sim(sim);

    let mut ctl = CtlService::new(ctl_config(Mode::Adaptive), endpoints).unwrap();
    let bridge = ctl.bridge_addr().unwrap();
    let client = thread::spawn(move || {
        thread::sleep(Duration::from_millis(500));
        let stream = TcpStream::connect(bridge).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let mut w = stream.try_clone().unwrap();
        w.write_all(b"mode manual\nref 100 10\nbogus\n").unwrap();
        let mut replies = Vec::new();
        let mut telemetry = Vec::new();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            match serde_json::from_str::<BridgeMessage>(&line).unwrap() {
                BridgeMessage::Telemetry(t) => telemetry.push(t),
                other => replies.push(other),
            }
            let reached = telemetry.last().is_some_and(|t: &Telemetry| t.p_ref_manual == Some(100.0));
            if reached && replies.len() >= 3 {
                break;
            }
        }
        (replies, telemetry)
    });

    let mut seen: Vec<Telemetry> = Vec::new();
    let summary = ctl.run(ClockMode::Realtime, Some(150), |t| seen.push(t.clone())).unwrap();
    let rows = sim.join().unwrap();
    let (replies, telemetry) = client.join().unwrap();

    assert_eq!(summary.ticks, 150);
    assert_eq!(summary.checksum_errors, 0);
    assert_eq!(summary.modbus_errors, 0);
    assert!(summary.clock.overruns <= 2, "{:?}", summary.clock);
    let live = seen.iter().filter(|t| t.status == "tracking").count();
    assert!(live > 100, "only {live} tracking ticks");

    assert!(matches!(&replies[0], BridgeMessage::Ack { command, .. } if command == "mode manual"), "{replies:?}");
    assert!(matches!(&replies[1], BridgeMessage::Ack { .. }));
    assert!(matches!(&replies[2], BridgeMessage::Error { .. }));
    assert!(telemetry.iter().any(|t| t.mode == Mode::Manual && t.p_ref_manual == Some(100.0)));

    // The simulator actually saw the controller's writes.
    let written = rows.iter().filter(|r| r.reg_p != 0.0).count();
    assert!(written > 50, "{written} rows with a nonzero P register");
}

#[test]
fn controller_fails_safe_and_reconnects() {
    let first = SimService::bind(sim_config(3.0), loopback(), loopback()).unwrap();
    let (c37, modbus) = (first.c37_addr(), first.modbus_addr());
    let mut endpoints = CtlEndpoints::new(c37, modbus);
    endpoints.backoff_max = Duration::from_millis(400);

    let restart = thread::spawn(move || {
        let mut sim = first;
        sim.run(ClockMode::Realtime, None, |_| {}).unwrap();
        drop(sim);
        // Dead air long enough for the failsafe, then the same ports again.
        thread::sleep(Duration::from_secs(4));
        // Shorter than the first run: its timestamps never pass the old ones.
        let second = SimService::bind(sim_config(2.5), c37, modbus).unwrap();
        spawn_sim(second).join().unwrap()
    });

    let mut ctl = CtlService::new(ctl_config(Mode::Adaptive), endpoints).unwrap();
    let mut statuses = Vec::new();
    let summary = ctl.run(ClockMode::Realtime, Some(200), |t| statuses.push(t.status.clone())).unwrap();
    restart.join().unwrap();

    let first_failsafe = statuses.iter().position(|s| s == "failsafe").expect("never failed safe");
    let held = statuses[..first_failsafe].iter().filter(|s| *s == "held").count();
    assert!(held >= 40, "held for {held} ticks before failsafe");
    assert!(
        statuses[first_failsafe..].iter().any(|s| s == "tracking"),
        "did not recover after reconnect: {:?}",
        &statuses[statuses.len() - 10..]
    );
    assert!(summary.reconnects >= 4, "{summary:?}");
}
