//! Simulator service: the plant, six PMU streams and the inverter's Modbus
//! server.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgrid_runtime::clock::ClockMode;
use mgrid_runtime::record::RecordWriter;
use mgrid_runtime::services::SimService;
use mgrid_scenario::Scenario;

#[derive(Parser)]
#[command(name = "sim", version, about = "Microgrid plant simulator service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Run {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "0.0.0.0")]
        bind: IpAddr,
        #[arg(long, default_value_t = 4712)]
        c37_port: u16,
        #[arg(long, default_value_t = 1502)]
        modbus_port: u16,
        /// Run record CSV.
        #[arg(long, default_value = "sim_record.csv")]
        record: PathBuf,
        /// Step as fast as possible instead of at the scenario rate.
        #[arg(long)]
        accelerated: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Cmd::Run { scenario, bind, c37_port, modbus_port, record, accelerated } = Cli::parse().cmd;
    let result = (|| -> Result<(), String> {
        let s = match std::path::Path::new(&scenario).exists() {
            true => Scenario::load(scenario.as_ref()).map_err(|e| e.to_string())?,
            false => mgrid_scenario::bundled(&scenario).ok_or_else(|| format!("{scenario}: not found"))?,
        };
        let mut sim = SimService::bind(s.sim_config(), SocketAddr::new(bind, c37_port), SocketAddr::new(bind, modbus_port))
            .map_err(|e| e.to_string())?;
        let mut writer = RecordWriter::create(&record).map_err(|e| e.to_string())?;
        let mode = if accelerated { ClockMode::Accelerated } else { ClockMode::Realtime };
        let mut last = None;
        let result = sim.run(mode, Some(&mut writer), |r| last = Some(r.clone()));
        writer.finish().map_err(|e| e.to_string())?;
        let summary = result.map_err(|e| e.to_string())?;
        println!(
            "{} ticks, {} overruns, max lateness {:.1} ms, {} frames dropped, {} Modbus requests",
            summary.ticks,
            summary.clock.overruns,
            summary.clock.max_lateness * 1e3,
            summary.frames_dropped,
            summary.modbus_requests
        );
        if let Some(r) = last {
            println!("final: t={:.1} s P_PCC={:.2} kW Q_PCC={:.2} kvar SoC={:.2} %", r.t, r.p_pcc, r.q_pcc, r.soc);
        }
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
