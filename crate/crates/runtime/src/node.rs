//! Simulator and controller endpoints, independent of transport.
//!
//! Both sides only exchange encoded bytes: synchrophasor frames from the
//! simulator, Modbus requests from the controller. The lockstep runner
//! shuttles them in memory, the services over TCP.

use mgrid_core::control::{Controller, ControllerConfig, Measurements, TickReport};
use mgrid_core::lti::LtiModel;
use mgrid_core::plant::{sample_pmu, BatteryModel, DemandProfile, InverterModel, PiecewiseLinear, Plant, PmuLayout, PMU_COUNT};
use mgrid_proto::c37::{encode_data_frame, DataFrame, Frame, FrameReader, Phasor, PhasorSample, Timestamp};
use mgrid_proto::modbus::{self, reference_write, Request, RegisterBank, Response, ResponsePdu};

use crate::delay::DelayLine;
use crate::error::{Result, RuntimeError};
use crate::record::RecordRow;

pub const MODBUS_UNIT: u8 = 1;
/// Register counts per kW on the reference registers.
pub const REFERENCE_RESOLUTION: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub ts: f64,
    pub duration: f64,
    pub model: LtiModel<f64>,
    pub inverter: InverterModel<f64>,
    pub battery: BatteryModel<f64>,
    pub demand: DemandProfile<f64>,
    /// Reactive demand as a fraction of active demand.
    pub reactive_ratio: f64,
    pub pv: PiecewiseLinear<f64>,
    pub pmu: PmuLayout<f64>,
    /// Synchrophasor SOC of simulation time zero.
    pub epoch: u32,
}

impl SimConfig {
    pub fn n_ticks(&self) -> u64 {
        (self.duration / self.ts).round().max(0.0) as u64
    }
}

/// The plant plus everything it publishes.
pub struct SimNode {
    cfg: SimConfig,
    plant: Plant<f64>,
    tick: u64,
}

impl SimNode {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let mut plant = Plant::new(cfg.model.clone(), cfg.inverter, cfg.battery)?;
        let (p, q, _) = demand_at(&cfg, 0.0);
        plant.prime(p, q, cfg.pv.value(0.0))?;
        Ok(Self { cfg, plant, tick: 0 })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn plant(&self) -> &Plant<f64> {
        &self.plant
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn finished(&self) -> bool {
        self.tick >= self.cfg.n_ticks()
    }

    pub fn time(&self) -> f64 {
        self.plant.state().t
    }

    pub fn new_bank(&self) -> RegisterBank {
        RegisterBank::new(self.cfg.inverter.p_max, self.cfg.inverter.q_max)
    }

    /// Refreshes the readable registers and encodes the six PMU frames for
    /// the current state.
    pub fn publish(&self, bank: &mut RegisterBank) -> Result<Vec<u8>> {
        let s = self.plant.state();
        bank.set_soc(s.battery.soc);
        bank.set_pv(s.p_pv);
        bank.bump_heartbeat();
        let ts = Timestamp::from_secs_f64(f64::from(self.cfg.epoch) + s.t);
        let mut out = Vec::with_capacity(usize::from(PMU_COUNT) * mgrid_proto::c37::DATA_FRAME_LEN);
        for id in 1..=PMU_COUNT {
            let r = sample_pmu(s, id, &self.cfg.pmu)?;
            let sample = PhasorSample {
                voltage: Phasor::from_polar(r.v_mag, r.v_ang),
                current: Phasor::from_polar(r.i_mag, r.i_ang),
                freq_dev: (r.freq - self.cfg.pmu.nominal_freq) as f32,
                dfreq: r.dfreq as f32,
                p_kw: r.p as f32,
                q_kvar: r.q as f32,
            };
            let frame = DataFrame { idcode: u16::from(id), timestamp: ts, stat: 0, sample };
            out.extend_from_slice(&encode_data_frame(&frame)?);
        }
        Ok(out)
    }

    /// Advances the plant one step with the references held in `bank`.
    pub fn step(&mut self, bank: &RegisterBank) -> Result<RecordRow> {
        let t = self.plant.state().t;
        let (p, q, event) = demand_at(&self.cfg, t);
        let pv = self.cfg.pv.value(t);
        let refs = bank.references();
        let s = self.plant.step(refs.0, refs.1, p, q, pv)?;
        self.tick += 1;
        Ok(RecordRow::from_plant(self.tick, s, event, refs))
    }
}

fn demand_at(cfg: &SimConfig, t: f64) -> (f64, f64, f64) {
    let p = cfg.demand.value(t);
    // Recorded without inrush so event edges are clean steps.
    let switched = cfg.demand.events.iter().filter(|e| e.is_on(t)).map(|e| e.magnitude).sum();
    (p, p * cfg.reactive_ratio, switched)
}

#[derive(Debug, Clone)]
pub struct CtlConfig {
    pub controller: ControllerConfig<f64>,
    /// The controller's plant model, usually identified.
    pub model: LtiModel<f64>,
    pub delay_in: usize,
    pub delay_out: usize,
}

/// The controller endpoint: ingests frames and register reads, ticks the
/// controller through the delay lines and produces reference writes.
pub struct CtlNode {
    ctl: Controller<f64>,
    ingress: DelayLine<Measurements<f64>>,
    egress: DelayLine<[f64; 2]>,
    reader: FrameReader,
    pcc: Option<(Timestamp, f64, f64)>,
    fresh: bool,
    soc_pv: Option<(f64, f64)>,
    seen: Option<Measurements<f64>>,
    txn: u16,
}

impl CtlNode {
    pub fn new(cfg: CtlConfig) -> Result<Self> {
        let mut c = cfg.controller;
        c.estimator_lag = cfg.delay_in + cfg.delay_out;
        c.command_resolution = REFERENCE_RESOLUTION;
        Ok(Self {
            ctl: Controller::new(c, cfg.model)?,
            ingress: DelayLine::new(cfg.delay_in),
            egress: DelayLine::new(cfg.delay_out),
            reader: FrameReader::new(),
            pcc: None,
            fresh: false,
            soc_pv: None,
            seen: None,
            txn: 0,
        })
    }

    pub fn controller(&self) -> &Controller<f64> {
        &self.ctl
    }

    pub fn controller_mut(&mut self) -> &mut Controller<f64> {
        &mut self.ctl
    }

    /// Frames dropped for bad checksums so far.
    pub fn checksum_errors(&self) -> u64 {
        self.reader.checksum_errors
    }

    /// Latest measurement that reached the controller, after the ingress
    /// delay: (P_PCC, Q_PCC, SoC, P_PV).
    pub fn last_seen(&self) -> Option<(f64, f64, f64, f64)> {
        self.seen.map(|m| (m.p_pcc, m.q_pcc, m.soc, m.p_pv))
    }

    /// Feeds raw synchrophasor stream bytes. Only the PCC PMU (idcode 1)
    /// drives the controller; older timestamps are ignored.
    pub fn ingest_stream(&mut self, bytes: &[u8]) {
        self.reader.push(bytes);
        while let Some(frame) = self.reader.next_frame() {
            let Frame::Data(d) = frame else { continue };
            if d.idcode != 1 {
                continue;
            }
            if self.pcc.is_some_and(|(ts, _, _)| d.timestamp <= ts) {
                continue;
            }
            self.pcc = Some((d.timestamp, f64::from(d.sample.p_kw), f64::from(d.sample.q_kvar)));
            self.fresh = true;
        }
    }

    /// Forgets partial frames and the last timestamp; call on a new stream
    /// connection, since a restarted simulator counts time from zero again.
    pub fn reset_stream(&mut self) {
        let errors = (self.reader.checksum_errors, self.reader.framing_errors);
        self.reader = FrameReader::new();
        (self.reader.checksum_errors, self.reader.framing_errors) = errors;
        self.pcc = None;
        self.fresh = false;
    }

    fn next_txn(&mut self) -> u16 {
        self.txn = self.txn.wrapping_add(1);
        self.txn
    }

    /// Read of SoC and PV.
    pub fn poll_request(&mut self) -> Request {
        let txn = self.next_txn();
        Request::read(txn, MODBUS_UNIT, modbus::reg::SOC, 2)
    }

    pub fn ingest_response(&mut self, resp: &Response) -> Result<()> {
        match &resp.pdu {
            ResponsePdu::ReadHolding { values } if values.len() == 2 => {
                self.soc_pv = Some((modbus::reg_to_soc(values[0]), modbus::reg_to_pv(values[1])));
                Ok(())
            }
            ResponsePdu::WriteMultiple { .. } => Ok(()),
            ResponsePdu::Exception { function, code } => {
                Err(RuntimeError::Protocol(format!("Modbus exception {code:?} on function {function:#04x}")))
            }
            other => Err(RuntimeError::Protocol(format!("unexpected Modbus response {other:?}"))),
        }
    }

    /// One controller tick. Returns the report and, once the egress delay
    /// has filled, the reference write to send.
    pub fn tick(&mut self) -> (TickReport<f64>, Option<Request>) {
        let fresh = match (self.fresh, self.pcc, self.soc_pv) {
            (true, Some((_, p, q)), Some((soc, pv))) => Some(Measurements { p_pcc: p, q_pcc: q, soc, p_pv: pv }),
            _ => None,
        };
        self.fresh = false;
        let delayed = self.ingress.push(fresh);
        if delayed.is_some() {
            self.seen = delayed;
        }
        let report = self.ctl.tick(delayed);
        let out = self.egress.push(Some([report.cmd.p, report.cmd.q]));
        let request = out.map(|[p, q]| {
            let txn = self.next_txn();
            reference_write(txn, MODBUS_UNIT, p, q)
        });
        (report, request)
    }
}
