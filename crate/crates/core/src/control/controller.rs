//! The cascaded supervisor: one call per sample turns measurements into an
//! inverter command.
//!
//! Order within a sample: demand estimate, mode bookkeeping, SoC recovery
//! override, otherwise reference update, SoC compensation, P/Q errors, the
//! two PID steps, decoupling, inverter limits with anti-windup.
//!
//! The PID outputs are desired changes of PCC import. Injection lowers the
//! import, so the inverter command is `-G(1)^-1` times the loop outputs,
//! with `G(1)` the DC gain of the controller's model.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use super::decouple::{couple, decouple};
use super::pid::{back_calculate, capture_bumpless, control_law, pid_step, PidGains, PidState};
use super::reference::{
    compute_power_error, compute_reactive_error, rate_limit_reference, DemandEstimator, Mode, PowerReference,
    ReferenceState,
};
use super::soc::{soc_compensation, soc_recovery_override, SocBands, SocPolicy};
use crate::error::{CoreError, Result};
use crate::lti::LtiModel;
use crate::plant::InverterModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct LoopTuning<T> {
    pub k_p: T,
    pub k_i: T,
    pub k_d: T,
    pub derivative_filter_pole: T,
}

impl<T: Scalar> Default for LoopTuning<T> {
    fn default() -> Self {
        Self { k_p: T::lit(0.8), k_i: T::lit(0.4), k_d: T::zero(), derivative_filter_pole: T::lit(0.8) }
    }
}

impl<T: Scalar> LoopTuning<T> {
    fn gains(&self, ts: T) -> Result<PidGains<T>> {
        let mut g = PidGains::new(self.k_p, self.k_i, self.k_d, ts)?;
        g.derivative_filter_pole = self.derivative_filter_pole;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct SocTuning<T> {
    pub bands: SocBands<T>,
    pub k_p: T,
    pub k_i: T,
    pub windup_limit: T,
    pub pv_gain: T,
}

impl<T: Scalar> Default for SocTuning<T> {
    fn default() -> Self {
        Self { bands: SocBands::default(), k_p: T::lit(2.0), k_i: T::lit(0.05), windup_limit: T::lit(50.0), pv_gain: T::zero() }
    }
}

/// Everything needed to build a [`Controller`] apart from its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ControllerConfig<T: Scalar> {
    pub ts: T,
    pub mode: Mode,
    pub gains_p: LoopTuning<T>,
    pub gains_q: LoopTuning<T>,
    pub soc: SocTuning<T>,
    /// Reference rate limit R, kW/s.
    pub rate_limit: T,
    pub manual_ref_p: T,
    pub manual_ref_q: T,
    pub inverter: InverterModel<T>,
    /// Known transport delay between issuing a command and seeing its
    /// effect, in samples, beyond the one-sample model delay.
    pub estimator_lag: usize,
    /// Counts per kW of the command channel; the estimator replays commands
    /// at this resolution. Zero keeps full precision.
    pub command_resolution: T,
    pub decoupling: bool,
    /// Samples without fresh data before the last command is held.
    pub stale_hold_after: u32,
    /// Samples without fresh data before ramping to zero.
    pub failsafe_after: u32,
}

impl<T: Scalar> Default for ControllerConfig<T> {
    fn default() -> Self {
        Self {
            ts: T::lit(0.1),
            mode: Mode::Off,
            gains_p: LoopTuning::default(),
            gains_q: LoopTuning::default(),
            soc: SocTuning::default(),
            rate_limit: T::one(),
            manual_ref_p: T::zero(),
            manual_ref_q: T::zero(),
            inverter: InverterModel::default(),
            estimator_lag: 0,
            command_resolution: T::zero(),
            decoupling: true,
            stale_hold_after: 3,
            failsafe_after: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurements<T> {
    pub p_pcc: T,
    pub q_pcc: T,
    pub soc: T,
    pub p_pv: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InverterCommand<T> {
    pub p: T,
    pub q: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TickStatus {
    Off,
    Tracking,
    Recovery,
    /// Measurements stale; last command repeated.
    Held,
    /// Measurements stale for too long; ramping to zero.
    Failsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TickFlags {
    pub decouple_fallback: bool,
    pub windup_unhandled: bool,
    pub saturated_p: bool,
    pub saturated_q: bool,
    pub soc_active: bool,
}

/// What happened in one sample, with enough state to audit the control law.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReport<T> {
    pub tick: u64,
    pub mode: Mode,
    pub status: TickStatus,
    pub staleness: u32,
    pub cmd: InverterCommand<T>,
    pub demand_estimate: [T; 2],
    pub p_ref: PowerReference<T>,
    pub q_ref: PowerReference<T>,
    /// Loop outputs before limiting.
    pub raw_output: [T; 2],
    /// Loop outputs consistent with the emitted command.
    pub loop_output: [T; 2],
    pub pid: [PidState<T>; 2],
    pub gains: [PidGains<T>; 2],
    pub flags: TickFlags,
}

impl<T: Scalar> TickReport<T> {
    /// Whether evaluating the control law on the reported states reproduces
    /// the reported loop outputs, to a relative tolerance.
    pub fn control_law_residual(&self) -> [T; 2] {
        let mut r = [T::zero(); 2];
        for i in 0..2 {
            let g = &self.gains[i];
            let s = &self.pid[i];
            let v = control_law(g, s.last_error, s.x_i, s.x_d);
            let p = g.k_p * (s.last_error - g.p_pb);
            let scale = [self.loop_output[i].abs(), p.abs(), (g.k_i * s.x_i).abs(), T::one()]
                .into_iter()
                .fold(T::zero(), |a, b| if b > a { b } else { a });
            r[i] = (v - self.loop_output[i]).abs() / scale;
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct Controller<T: Scalar> {
    config: ControllerConfig<T>,
    gains: [PidGains<T>; 2],
    pid: [PidState<T>; 2],
    soc: SocPolicy<T>,
    reference: ReferenceState<T>,
    estimator: DemandEstimator<T>,
    dc_gain: Matrix2<T>,
    recovery_active: bool,
    capture_pending: bool,
    prev_mode: Mode,
    last_cmd: [T; 2],
    last_meas: Option<Measurements<T>>,
    staleness: u32,
    tick: u64,
}

impl<T: Scalar> Controller<T> {
    pub fn new(config: ControllerConfig<T>, model: LtiModel<T>) -> Result<Self> {
        let ts = config.ts;
        if !(ts > T::zero()) {
            return Err(CoreError::InvalidParameter("sample time must be positive".into()));
        }
        config.inverter.validate()?;
        let g = model.dc_gain()?;
        if g.shape() != (2, 2) {
            return Err(CoreError::Dimension("controller model must be 2x2".into()));
        }
        let dc_gain = if config.decoupling {
            Matrix2::new(g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)])
        } else {
            Matrix2::new(g[(0, 0)], T::zero(), T::zero(), g[(1, 1)])
        };
        let mut soc = SocPolicy::new(config.soc.k_p, config.soc.k_i, config.soc.windup_limit, ts)?;
        soc.bands = config.soc.bands;
        soc.pv_gain = config.soc.pv_gain;
        soc.validate()?;
        let mut reference = ReferenceState::new(config.mode, config.rate_limit)?;
        reference.manual_ref_p = config.manual_ref_p;
        reference.manual_ref_q = config.manual_ref_q;
        Ok(Self {
            gains: [config.gains_p.gains(ts)?, config.gains_q.gains(ts)?],
            pid: [PidState::default(); 2],
            soc,
            reference,
            estimator: DemandEstimator::new(model, config.estimator_lag)?,
            dc_gain,
            recovery_active: false,
            capture_pending: true,
            prev_mode: Mode::Off,
            last_cmd: [T::zero(); 2],
            last_meas: None,
            staleness: 0,
            tick: 0,
            config,
        })
    }

    pub fn config(&self) -> &ControllerConfig<T> {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.reference.mode
    }

    pub fn reference(&self) -> &ReferenceState<T> {
        &self.reference
    }

    pub fn recovery_active(&self) -> bool {
        self.recovery_active
    }

    pub fn last_command(&self) -> InverterCommand<T> {
        InverterCommand { p: self.last_cmd[0], q: self.last_cmd[1] }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.reference.mode = mode;
    }

    pub fn set_manual_reference(&mut self, p: T, q: T) -> Result<()> {
        if !(p.is_finite_value() && q.is_finite_value()) {
            return Err(CoreError::NonFinite("manual reference"));
        }
        self.reference.manual_ref_p = p;
        self.reference.manual_ref_q = q;
        Ok(())
    }

    /// Replaces the tuning of one loop (0 = P, 1 = Q) and re-captures so the
    /// output continues without a jump.
    pub fn set_tuning(&mut self, channel: usize, tuning: LoopTuning<T>) -> Result<()> {
        let mut g = tuning.gains(self.config.ts)?;
        g.p_pb = self.gains[channel].p_pb;
        g.p_db = self.gains[channel].p_db;
        self.gains[channel] = g;
        if channel == 0 {
            self.config.gains_p = tuning;
        } else {
            self.config.gains_q = tuning;
        }
        self.capture_pending = true;
        Ok(())
    }

    fn limited(&self, target: [T; 2]) -> [T; 2] {
        self.config.inverter.limit(target, self.last_cmd, self.config.ts)
    }

    fn quantized(&self, cmd: [T; 2]) -> [T; 2] {
        let res = self.config.command_resolution;
        if res > T::zero() {
            cmd.map(|v| (v * res).round() / res)
        } else {
            cmd
        }
    }

    /// Loop-output space to inverter command.
    fn to_command(&self, v: [T; 2]) -> ([T; 2], bool) {
        let d = decouple(v, &self.dc_gain);
        (d.cmd.map(|c| -c), d.fallback)
    }

    /// Inverter command to loop-output space.
    fn to_loop_output(&self, cmd: [T; 2], fallback: bool) -> [T; 2] {
        if fallback {
            cmd.map(|c| -c)
        } else {
            couple(cmd, &self.dc_gain).map(|c| -c)
        }
    }

    fn enter_mode(&mut self, meas: &Measurements<T>, estimate: [T; 2]) {
        let mode = self.reference.mode;
        let r = &mut self.reference;
        match (self.prev_mode, mode) {
            (Mode::Adaptive, Mode::Manual) => {
                r.p_ref_bar = r.p_dem_bar;
                r.q_ref_bar = r.q_dem_bar;
            }
            (Mode::Manual, Mode::Adaptive) => {
                r.p_dem_bar = r.p_ref_bar;
                r.q_dem_bar = r.q_ref_bar;
            }
            (Mode::Off, Mode::Manual) => {
                r.p_ref_bar = meas.p_pcc;
                r.q_ref_bar = meas.q_pcc;
            }
            (Mode::Off, Mode::Adaptive) => {
                r.p_dem_bar = estimate[0];
                r.q_dem_bar = estimate[1];
            }
            _ => {}
        }
        self.capture_pending = true;
        self.prev_mode = mode;
    }

    fn update_reference(&mut self, meas: &Measurements<T>, estimate: [T; 2]) {
        let ts = self.config.ts;
        let r = &mut self.reference;
        let rate = r.rate_limit;
        match r.mode {
            Mode::Adaptive => {
                r.p_dem_bar = rate_limit_reference(estimate[0], r.p_dem_bar, rate, ts);
                r.q_dem_bar = rate_limit_reference(estimate[1], r.q_dem_bar, rate, ts);
            }
            Mode::Manual => {
                r.p_ref_bar = rate_limit_reference(r.manual_ref_p, r.p_ref_bar, rate, ts);
                r.q_ref_bar = rate_limit_reference(r.manual_ref_q, r.q_ref_bar, rate, ts);
            }
            Mode::Off => {
                r.p_dem_bar = estimate[0];
                r.q_dem_bar = estimate[1];
                r.p_ref_bar = meas.p_pcc;
                r.q_ref_bar = meas.q_pcc;
            }
        }
    }

    /// One control sample. `None` means no fresh measurement arrived.
    pub fn tick(&mut self, fresh: Option<Measurements<T>>) -> TickReport<T> {
        self.tick += 1;
        match fresh {
            Some(m) => {
                self.staleness = 0;
                self.last_meas = Some(m);
            }
            None => self.staleness = self.staleness.saturating_add(1),
        }
        let meas = self.last_meas;
        let mut report = TickReport {
            tick: self.tick,
            mode: self.reference.mode,
            status: TickStatus::Held,
            staleness: self.staleness,
            cmd: self.last_command(),
            demand_estimate: [T::zero(); 2],
            p_ref: PowerReference::default(),
            q_ref: PowerReference::default(),
            raw_output: [T::zero(); 2],
            loop_output: [T::zero(); 2],
            pid: self.pid,
            gains: self.gains,
            flags: TickFlags::default(),
        };

        let Some(meas) = meas else {
            // Nothing ever received: stay at rest.
            let cmd = self.limited([T::zero(); 2]);
            return self.finish(report, cmd, TickStatus::Held);
        };
        let estimate = self.estimator.estimate(meas.p_pcc, meas.q_pcc);
        report.demand_estimate = estimate;

        if self.staleness >= self.config.failsafe_after {
            self.capture_pending = true;
            let cmd = self.limited([T::zero(); 2]);
            return self.finish(report, cmd, TickStatus::Failsafe);
        }
        if self.staleness >= self.config.stale_hold_after {
            let cmd = self.last_cmd;
            return self.finish(report, cmd, TickStatus::Held);
        }

        if self.reference.mode != self.prev_mode {
            self.enter_mode(&meas, estimate);
        }
        self.update_reference(&meas, estimate);

        if self.reference.mode == Mode::Off {
            self.pid = [PidState::default(); 2];
            self.recovery_active = false;
            self.capture_pending = true;
            let cmd = self.limited([T::zero(); 2]);
            return self.finish(report, cmd, TickStatus::Off);
        }

        let decision =
            soc_recovery_override(meas.soc, &self.soc.bands, self.recovery_active, self.config.inverter.p_max);
        self.recovery_active = decision.active;
        if let Some(target) = decision.target_p {
            self.capture_pending = true;
            report.p_ref = compute_power_error(meas.p_pcc, &self.reference, T::zero()).unwrap_or_default();
            report.q_ref = compute_reactive_error(meas.q_pcc, &self.reference).unwrap_or_default();
            let cmd = self.limited([target, T::zero()]);
            return self.finish(report, cmd, TickStatus::Recovery);
        }

        let (p_soc, soc_next) = soc_compensation(meas.soc, meas.p_pv, &self.soc);
        self.soc = soc_next;
        report.flags.soc_active = !self.soc.bands.in_dead_zone(meas.soc);
        let (Some(p_ref), Some(q_ref)) = (
            compute_power_error(meas.p_pcc, &self.reference, p_soc),
            compute_reactive_error(meas.q_pcc, &self.reference),
        ) else {
            unreachable!("mode is not off");
        };
        report.p_ref = p_ref;
        report.q_ref = q_ref;

        let errors = [p_ref.error, q_ref.error];
        let mut v = [T::zero(); 2];
        for i in 0..2 {
            let (raw, next) = pid_step(&self.pid[i], &self.gains[i], errors[i]);
            self.pid[i] = next;
            v[i] = raw;
        }
        if self.capture_pending {
            let (_, fallback) = self.to_command(v);
            let target = self.to_loop_output(self.last_cmd, fallback);
            for i in 0..2 {
                capture_bumpless(&mut self.gains[i], &mut self.pid[i], target[i]);
                v[i] = self.pid[i].last_output;
            }
            self.capture_pending = false;
        }
        report.raw_output = v;

        let (unlimited, fallback) = self.to_command(v);
        report.flags.decouple_fallback = fallback;
        let cmd = self.limited(unlimited);
        report.flags.saturated_p = cmd[0] != unlimited[0];
        report.flags.saturated_q = cmd[1] != unlimited[1];
        if report.flags.saturated_p || report.flags.saturated_q {
            let achieved = self.to_loop_output(cmd, fallback);
            for i in 0..2 {
                if achieved[i] == v[i] {
                    continue;
                }
                let s = &mut self.pid[i];
                match back_calculate(&self.gains[i], s.last_error, s.x_d, achieved[i]) {
                    Some(x_i) => s.x_i = x_i,
                    None => report.flags.windup_unhandled = true,
                }
                s.last_output = achieved[i];
            }
        }
        self.finish(report, cmd, TickStatus::Tracking)
    }

    fn finish(&mut self, mut report: TickReport<T>, cmd: [T; 2], status: TickStatus) -> TickReport<T> {
        self.estimator.record(self.quantized(cmd));
        self.last_cmd = cmd;
        report.status = status;
        report.mode = self.reference.mode;
        report.cmd = InverterCommand { p: cmd[0], q: cmd[1] };
        report.pid = self.pid;
        report.gains = self.gains;
        report.loop_output = [self.pid[0].last_output, self.pid[1].last_output];
        report
    }
}
