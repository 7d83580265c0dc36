//! Deterministic single-process run.
//!
//! The simulator and the controller alternate in one thread, exchanging the
//! same encoded frames and Modbus ADUs the TCP services would. Each tick:
//!
//! 1. the simulator publishes the current state (PMU frames, registers);
//! 2. the controller reads SoC and PV, ingests the frames and ticks;
//! 3. its reference write, once through the egress delay, hits the registers;
//! 4. the plant steps with whatever the registers hold.

use mgrid_core::control::TickReport;
use mgrid_proto::modbus::{decode_request, decode_response, encode_request, encode_response, RegisterBank, Request};

use crate::bridge::{handle_line, BridgeMessage};
use crate::error::Result;
use crate::node::{CtlConfig, CtlNode, SimConfig, SimNode};
use crate::record::{RecordRow, RecordWriter};

/// Operator command scheduled at simulation time `t` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledCommand {
    pub t: f64,
    pub line: String,
}

#[derive(Debug, Clone, Default)]
pub struct LockstepSummary {
    pub ticks: u64,
    /// Bridge replies to the scheduled commands, in order.
    pub replies: Vec<BridgeMessage>,
    pub checksum_errors: u64,
    pub modbus_exceptions: u64,
}

/// Passes a request through the wire encoding and the register bank.
fn exchange(bank: &mut RegisterBank, ctl: &mut CtlNode, req: &Request, summary: &mut LockstepSummary) -> Result<()> {
    let req = decode_request(&encode_request(req)?)?;
    let resp = decode_response(&encode_response(&bank.handle(&req))?)?;
    if ctl.ingest_response(&resp).is_err() {
        summary.modbus_exceptions += 1;
    }
    Ok(())
}

pub fn run_lockstep<F>(
    sim_cfg: SimConfig,
    ctl_cfg: CtlConfig,
    schedule: &[ScheduledCommand],
    mut record: Option<&mut RecordWriter>,
    mut observe: F,
) -> Result<LockstepSummary>
where
    F: FnMut(&TickReport<f64>, &RecordRow),
{
    let mut sim = SimNode::new(sim_cfg)?;
    let mut ctl = CtlNode::new(ctl_cfg)?;
    let mut bank = sim.new_bank();
    let mut summary = LockstepSummary::default();
    let mut pending = schedule.to_vec();
    pending.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut pending = pending.into_iter().peekable();
    // Half a tick of slack so a command at t lands on the tick at t.
    let slack = sim.config().ts * 0.5;

    while !sim.finished() {
        let now = sim.time();
        let frames = sim.publish(&mut bank)?;
        let poll = ctl.poll_request();
        exchange(&mut bank, &mut ctl, &poll, &mut summary)?;
        ctl.ingest_stream(&frames);

        while let Some(cmd) = pending.next_if(|c| c.t <= now + slack) {
            let tick = sim.tick();
            summary.replies.push(handle_line(&cmd.line, ctl.controller_mut(), tick));
        }

        let (report, write) = ctl.tick();
        if let Some(req) = write {
            exchange(&mut bank, &mut ctl, &req, &mut summary)?;
        }
        let row = sim.step(&bank)?.with_controller(&report);
        if let Some(w) = record.as_deref_mut() {
            w.write(&row)?;
        }
        observe(&report, &row);
        summary.ticks += 1;
    }
    summary.checksum_errors = ctl.checksum_errors();
    Ok(summary)
}
