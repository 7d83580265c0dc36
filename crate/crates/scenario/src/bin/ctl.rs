//! Controller service: reads the simulator's PMU stream and registers,
//! writes inverter references, and serves the operator bridge.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgrid_core::control::ControllerConfig;
use mgrid_core::lti::default_plant_model;
use mgrid_core::model_file;
use mgrid_runtime::bridge::BridgeMessage;
use mgrid_runtime::clock::ClockMode;
use mgrid_runtime::record::RecordWriter;
use mgrid_runtime::services::{CtlEndpoints, CtlService};
use mgrid_runtime::{run_lockstep, CtlConfig};
use mgrid_scenario::Scenario;

#[derive(Parser)]
#[command(name = "ctl", version, about = "Microgrid controller service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Run {
        /// Controller settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plant model file; the built-in model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Simulator host.
        #[arg(long, default_value = "127.0.0.1")]
        sim: String,
        #[arg(long, default_value_t = 4712)]
        c37_port: u16,
        #[arg(long, default_value_t = 1502)]
        modbus_port: u16,
        #[arg(long, default_value_t = 0)]
        delay_in: usize,
        #[arg(long, default_value_t = 0)]
        delay_out: usize,
        /// Operator bridge listen address.
        #[arg(long, default_value = "127.0.0.1:7000")]
        bridge: SocketAddr,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
        /// Run against an in-process plant from --scenario, unpaced, and
        /// write a run record.
        #[arg(long, requires = "scenario")]
        accelerated: bool,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value = "ctl_record.csv")]
        record: PathBuf,
    },
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr, String> {
    (host, port)
        .to_socket_addrs()
        .map_err(|e| format!("{host}: {e}"))?
        .next()
        .ok_or_else(|| format!("{host}: no address"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Cmd::Run { config, model, sim, c37_port, modbus_port, delay_in, delay_out, bridge, ticks, accelerated, scenario, record } =
        Cli::parse().cmd;
    let result = (|| -> Result<(), String> {
        let controller: ControllerConfig<f64> = match &config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => ControllerConfig::default(),
        };
        let model = match &model {
            Some(p) => model_file::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
            None => default_plant_model(controller.ts),
        };
        let cfg = CtlConfig { controller, model, delay_in, delay_out };

        if accelerated {
            let name = scenario.expect("clap enforces --scenario");
            let s = match std::path::Path::new(&name).exists() {
                true => Scenario::load(name.as_ref()).map_err(|e| e.to_string())?,
                false => mgrid_scenario::bundled(&name).ok_or_else(|| format!("{name}: not found"))?,
            };
            let mut writer = RecordWriter::create(&record).map_err(|e| e.to_string())?;
            let result = run_lockstep(s.sim_config(), cfg, &s.commands(), Some(&mut writer), |_, _| {});
            writer.finish().map_err(|e| e.to_string())?;
            let summary = result.map_err(|e| e.to_string())?;
            for r in &summary.replies {
                if let BridgeMessage::Error { command, message } = r {
                    log::warn!("{command}: {message}");
                }
            }
            println!("{} ticks written to {}", summary.ticks, record.display());
            return Ok(());
        }

        let mut endpoints = CtlEndpoints::new(resolve(&sim, c37_port)?, resolve(&sim, modbus_port)?);
        endpoints.bridge = Some(bridge);
        let mut svc = CtlService::new(cfg, endpoints).map_err(|e| e.to_string())?;
        let summary = svc.run(ClockMode::Realtime, ticks, |_| {}).map_err(|e| e.to_string())?;
        println!(
            "{} ticks, {} overruns, {} stale, {} reconnects, {} checksum errors",
            summary.ticks, summary.clock.overruns, summary.stale_ticks, summary.reconnects, summary.checksum_errors
        );
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
