//! Behavioral microgrid plant: demand, PV, battery/inverter and the coupling
//! from inverter injection to the power flow at the point of common coupling.
//!
//! Sign convention: powers at the PCC are imports (grid to microgrid).
//! Positive inverter power is injection into the microgrid and lowers the
//! import, `p_pcc = demand - y` with `y` the coupling model output.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lti::LtiModel;
use crate::scalar::{clamp, limit_amplitude_rate, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterModel<T> {
    /// kW
    pub p_max: T,
    /// kvar
    pub q_max: T,
    /// kW/s, applied to both channels
    pub ramp_limit: T,
    /// Extra actuation delay in samples before the limiter.
    #[serde(default)]
    pub input_delay_steps: usize,
}

impl<T: Scalar> InverterModel<T> {
    pub fn new(p_max: T, q_max: T, ramp_limit: T) -> Result<Self> {
        let m = Self { p_max, q_max, ramp_limit, input_delay_steps: 0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_max", self.p_max), ("q_max", self.q_max), ("ramp_limit", self.ramp_limit)] {
            if !(v > T::zero()) {
                return Err(CoreError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Amplitude then rate limit a (P, Q) command against the previous one.
    pub fn limit(&self, cmd: [T; 2], prev: [T; 2], ts: T) -> [T; 2] {
        [
            limit_amplitude_rate(cmd[0], prev[0], self.p_max, self.ramp_limit, ts),
            limit_amplitude_rate(cmd[1], prev[1], self.q_max, self.ramp_limit, ts),
        ]
    }
}

impl<T: Scalar> Default for InverterModel<T> {
    fn default() -> Self {
        Self { p_max: T::lit(250.0), q_max: T::lit(250.0), ramp_limit: T::lit(80.0), input_delay_steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryModel<T> {
    /// kWh
    pub capacity: T,
    /// percent
    pub soc: T,
    pub soc_init: T,
}

impl<T: Scalar> BatteryModel<T> {
    pub fn new(capacity: T, soc_init: T) -> Result<Self> {
        if !(capacity > T::zero()) {
            return Err(CoreError::InvalidParameter("battery capacity must be positive".into()));
        }
        if soc_init < T::zero() || soc_init > T::lit(100.0) {
            return Err(CoreError::InvalidParameter("initial SoC must be within [0, 100]".into()));
        }
        Ok(Self { capacity, soc: soc_init, soc_init })
    }
}

/// Integrates net battery power `p_inv - p_pv` over one sample.
///
/// Returns the updated battery and whether the SoC hit a clamp.
pub fn battery_update<T: Scalar>(battery: &BatteryModel<T>, p_inv: T, p_pv: T, ts: T) -> (BatteryModel<T>, bool) {
    let hundred = T::lit(100.0);
    let delta = hundred * (p_inv - p_pv) * (ts / T::lit(3600.0)) / battery.capacity;
    let raw = battery.soc - delta;
    let soc = clamp(raw, T::zero(), hundred);
    (BatteryModel { soc, ..*battery }, soc != raw)
}

/// Switched load, e.g. a motor with an inrush spike after switch-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEvent<T> {
    pub t_on: T,
    pub t_off: T,
    /// kW while on
    pub magnitude: T,
    /// kW added on top of `magnitude` during the spike
    #[serde(default)]
    pub transient_spike: T,
    #[serde(default)]
    pub spike_duration: T,
}

impl<T: Scalar> LoadEvent<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_off > self.t_on) {
            return Err(CoreError::InvalidParameter("load event t_off must follow t_on".into()));
        }
        if self.magnitude < T::zero() {
            return Err(CoreError::InvalidParameter("load event magnitude must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_on(&self, t: T) -> bool {
        t >= self.t_on && t < self.t_off
    }

    /// Contribution at time `t`, spike included.
    pub fn power(&self, t: T) -> T {
        if !self.is_on(t) {
            return T::zero();
        }
        if t < self.t_on + self.spike_duration {
            self.magnitude + self.transient_spike
        } else {
            self.magnitude
        }
    }
}

/// One component of the band-limited noise sum.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tone<T> {
    amplitude: T,
    freq_hz: T,
    phase: T,
}

const NOISE_TONES: usize = 8;
const NOISE_BAND_HZ: (f64, f64) = (0.005, 0.2);

/// Active demand as a deterministic function of time.
///
/// `base + sine_amplitude * sin(2 pi t / sine_period) + noise(t) + events(t)`,
/// clamped at zero. The noise is a sum of seeded sinusoids in a low frequency
/// band whose total standard deviation equals `noise_std`, so evaluation at
/// any `t` is reproducible without stepping through earlier times.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile<T> {
    pub base: T,
    pub sine_amplitude: T,
    pub sine_period: T,
    pub events: Vec<LoadEvent<T>>,
    tones: Vec<Tone<T>>,
}

impl<T: Scalar> DemandProfile<T> {
    pub fn new(base: T, sine_amplitude: T, sine_period: T, noise_std: T, seed: u64, events: Vec<LoadEvent<T>>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tones = if noise_std > T::zero() {
            let amp = noise_std * T::lit((2.0 / NOISE_TONES as f64).sqrt());
            (0..NOISE_TONES)
                .map(|_| Tone {
                    amplitude: amp,
                    freq_hz: T::lit(rng.random_range(NOISE_BAND_HZ.0..NOISE_BAND_HZ.1)),
                    phase: T::lit(rng.random_range(0.0..std::f64::consts::TAU)),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { base, sine_amplitude, sine_period, events, tones }
    }

    /// Constant demand with no variation or events.
    pub fn constant(base: T) -> Self {
        Self::new(base, T::zero(), T::one(), T::zero(), 0, Vec::new())
    }

    /// Base plus the slow sinusoid.
    pub fn background(&self, t: T) -> T {
        let mut v = self.base;
        if self.sine_amplitude != T::zero() && self.sine_period > T::zero() {
            v += self.sine_amplitude * (T::two_pi() * t / self.sine_period).sin();
        }
        v
    }

    pub fn noise(&self, t: T) -> T {
        self.tones
            .iter()
            .fold(T::zero(), |acc, tone| acc + tone.amplitude * (T::two_pi() * tone.freq_hz * t + tone.phase).sin())
    }

    /// Sum of switched-in event magnitudes, spikes excluded.
    pub fn event_load(&self, t: T) -> T {
        self.events.iter().filter(|e| e.is_on(t)).fold(T::zero(), |acc, e| acc + e.magnitude)
    }

    pub fn value(&self, t: T) -> T {
        let events = self.events.iter().fold(T::zero(), |acc, e| acc + e.power(t));
        let v = self.background(t) + self.noise(t) + events;
        if v < T::zero() {
            T::zero()
        } else {
            v
        }
    }
}

/// Piecewise-linear profile through `(t, value)` points, held flat outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear<T> {
    points: Vec<(T, T)>,
}

impl<T: Scalar> PiecewiseLinear<T> {
    pub fn new(points: Vec<(T, T)>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(CoreError::InvalidParameter("profile times must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn constant(v: T) -> Self {
        Self { points: vec![(T::zero(), v)] }
    }

    pub fn points(&self) -> &[(T, T)] {
        &self.points
    }

    pub fn value(&self, t: T) -> T {
        let Some(first) = self.points.first() else {
            return T::zero();
        };
        if t <= first.0 {
            return first.1;
        }
        for w in self.points.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        self.points[self.points.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState<T: Scalar> {
    /// Time at the start of the next step, seconds.
    pub t: T,
    pub lti_state: DVector<T>,
    pub p_pcc: T,
    pub q_pcc: T,
    pub p_dem: T,
    pub q_dem: T,
    pub p_pv: T,
    pub p_inv_applied: T,
    pub q_inv_applied: T,
    pub battery: BatteryModel<T>,
    /// Set when a step was rejected for non-finite input.
    pub fault: bool,
    /// Number of steps on which the SoC clamp engaged.
    pub soc_saturations: u64,
}

/// The plant: coupling model, inverter limits and the evolving state.
///
/// Exactly one owner advances it; readers take clones of [`Plant::state`].
#[derive(Debug, Clone)]
pub struct Plant<T: Scalar> {
    model: LtiModel<T>,
    inverter: InverterModel<T>,
    state: PlantState<T>,
    pending: VecDeque<[T; 2]>,
}

impl<T: Scalar> Plant<T> {
    pub fn new(model: LtiModel<T>, inverter: InverterModel<T>, battery: BatteryModel<T>) -> Result<Self> {
        if model.n_inputs() != 2 || model.n_outputs() != 2 {
            return Err(CoreError::Dimension("plant model must be 2x2".into()));
        }
        if !model.is_stable() {
            return Err(CoreError::Unstable(model.spectral_radius().as_f64()));
        }
        inverter.validate()?;
        let state = PlantState {
            t: T::zero(),
            lti_state: DVector::zeros(model.n_states()),
            p_pcc: T::zero(),
            q_pcc: T::zero(),
            p_dem: T::zero(),
            q_dem: T::zero(),
            p_pv: T::zero(),
            p_inv_applied: T::zero(),
            q_inv_applied: T::zero(),
            battery,
            fault: false,
            soc_saturations: 0,
        };
        let pending = std::iter::repeat_n([T::zero(); 2], inverter.input_delay_steps).collect();
        Ok(Self { model, inverter, state, pending })
    }

    pub fn state(&self) -> &PlantState<T> {
        &self.state
    }

    pub fn model(&self) -> &LtiModel<T> {
        &self.model
    }

    pub fn inverter(&self) -> &InverterModel<T> {
        &self.inverter
    }

    pub fn ts(&self) -> T {
        self.model.ts()
    }

    /// Sets the exogenous inputs without stepping, so a plant at rest with
    /// zero injection reports `demand` at the PCC from the first sample on.
    pub fn prime(&mut self, demand_p: T, demand_q: T, pv: T) -> Result<()> {
        if ![demand_p, demand_q, pv].iter().all(|v| v.is_finite_value()) {
            return Err(CoreError::NonFinite("plant inputs"));
        }
        let u = DVector::from_column_slice(&[self.state.p_inv_applied, self.state.q_inv_applied]);
        let y = self.model.c() * &self.state.lti_state + self.model.d() * u;
        let s = &mut self.state;
        s.p_dem = demand_p;
        s.q_dem = demand_q;
        s.p_pv = pv;
        s.p_pcc = demand_p - y[0];
        s.q_pcc = demand_q - y[1];
        Ok(())
    }

    /// Advances one sample.
    ///
    /// The command passes the actuation delay, then the amplitude and rate
    /// limits against the previously applied power. PCC flow is
    /// `demand - y` where `y` is the coupling model output for the applied
    /// power. On non-finite input the state is left unchanged apart from the
    /// fault flag.
    pub fn step(&mut self, cmd_p: T, cmd_q: T, demand_p: T, demand_q: T, pv: T) -> Result<&PlantState<T>> {
        if ![cmd_p, cmd_q, demand_p, demand_q, pv].iter().all(|v| v.is_finite_value()) {
            self.state.fault = true;
            return Err(CoreError::NonFinite("plant step input"));
        }
        let ts = self.ts();
        let cmd = match self.pending.pop_front() {
            Some(delayed) => {
                self.pending.push_back([cmd_p, cmd_q]);
                delayed
            }
            None => [cmd_p, cmd_q],
        };
        let prev = [self.state.p_inv_applied, self.state.q_inv_applied];
        let [p_inv, q_inv] = self.inverter.limit(cmd, prev, ts);

        let u = DVector::from_column_slice(&[p_inv, q_inv]);
        let m = &self.model;
        let y = m.c() * &self.state.lti_state + m.d() * &u;
        let next_x = m.a() * &self.state.lti_state + m.b() * &u;

        let (battery, saturated) = battery_update(&self.state.battery, p_inv, pv, ts);
        let s = &mut self.state;
        s.lti_state = next_x;
        s.p_pcc = demand_p - y[0];
        s.q_pcc = demand_q - y[1];
        s.p_dem = demand_p;
        s.q_dem = demand_q;
        s.p_pv = pv;
        s.p_inv_applied = p_inv;
        s.q_inv_applied = q_inv;
        s.battery = battery;
        s.fault = false;
        if saturated {
            s.soc_saturations += 1;
        }
        s.t += ts;
        Ok(&self.state)
    }
}

/// Electrical quantities reported by one PMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmuReading<T> {
    /// Per-phase volts RMS.
    pub v_mag: T,
    /// Radians.
    pub v_ang: T,
    /// Amperes RMS.
    pub i_mag: T,
    pub i_ang: T,
    /// Hz.
    pub freq: T,
    /// Hz/s.
    pub dfreq: T,
    /// kW
    pub p: T,
    /// kvar
    pub q: T,
}

/// Where the six PMUs sit and how their decorative quantities are formed.
///
/// 1: PCC, 2: non-emergency loads, 3: emergency loads, 4: inverter,
/// 5: PV array, 6: battery (inverter minus PV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmuLayout<T> {
    pub emergency_share: T,
    pub nominal_voltage: T,
    pub nominal_freq: T,
    pub freq_jitter: T,
}

impl<T: Scalar> Default for PmuLayout<T> {
    fn default() -> Self {
        Self {
            emergency_share: T::lit(0.2),
            nominal_voltage: T::lit(277.0),
            nominal_freq: T::lit(60.0),
            freq_jitter: T::lit(0.002),
        }
    }
}

pub const PMU_COUNT: u8 = 6;

pub fn sample_pmu<T: Scalar>(state: &PlantState<T>, pmu_id: u8, layout: &PmuLayout<T>) -> Result<PmuReading<T>> {
    let (p, q) = match pmu_id {
        1 => (state.p_pcc, state.q_pcc),
        2 => {
            let share = T::one() - layout.emergency_share;
            (state.p_dem * share, state.q_dem * share)
        }
        3 => (state.p_dem * layout.emergency_share, state.q_dem * layout.emergency_share),
        4 => (state.p_inv_applied, state.q_inv_applied),
        5 => (state.p_pv, T::zero()),
        6 => (state.p_inv_applied - state.p_pv, T::zero()),
        other => return Err(CoreError::UnknownPmu(other)),
    };
    // Deterministic jitter, a function of time and position only.
    let phase = T::from_count(pmu_id as usize) * T::lit(1.7);
    let wobble = (T::lit(2.3) * state.t + phase).sin();
    let freq = layout.nominal_freq + layout.freq_jitter * wobble;
    let dfreq = layout.freq_jitter * T::lit(2.3) * (T::lit(2.3) * state.t + phase).cos();
    let v_mag = layout.nominal_voltage * (T::one() + T::lit(0.001) * wobble);
    let v_ang = T::zero();
    // Three-phase power, per-phase current: S = 3 V I*.
    let s_va = (p * p + q * q).sqrt() * T::lit(1000.0);
    let i_mag = s_va / (T::lit(3.0) * v_mag);
    let i_ang = if s_va > T::zero() { v_ang - q.atan2(p) } else { T::zero() };
    Ok(PmuReading { v_mag, v_ang, i_mag, i_ang, freq, dfreq, p, q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::default_plant_model;
    use approx::assert_relative_eq;

    fn plant(ramp: f64) -> Plant<f64> {
        Plant::new(
            default_plant_model(0.1),
            InverterModel::new(250.0, 250.0, ramp).unwrap(),
            BatteryModel::new(1000.0, 50.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_injection_passes_demand_through() {
        let mut p = plant(8.0);
        let s = p.step(0.0, 0.0, 200.0, 0.0, 0.0).unwrap();
        assert_eq!(s.p_pcc, 200.0);
        assert_eq!(s.q_pcc, 0.0);
    }

    #[test]
    fn amplitude_limit() {
        let mut p = plant(1e6);
        let s = p.step(300.0, -400.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(s.p_inv_applied, 250.0);
        assert_eq!(s.q_inv_applied, -250.0);
    }

    #[test]
    fn rate_limit() {
        let mut p = plant(8.0);
        let s = p.step(250.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(s.p_inv_applied, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_step_is_rejected() {
        let mut p = plant(8.0);
        p.step(10.0, 0.0, 100.0, 0.0, 0.0).unwrap();
        let before = p.state().clone();
        assert!(p.step(f64::NAN, 0.0, 100.0, 0.0, 0.0).is_err());
        let after = p.state();
        assert!(after.fault);
        assert_eq!(after.t, before.t);
        assert_eq!(after.lti_state, before.lti_state);
        assert_eq!(after.p_inv_applied, before.p_inv_applied);
    }

    #[test]
    fn input_delay_postpones_application() {
        let mut inv = InverterModel::new(250.0, 250.0, 1e6).unwrap();
        inv.input_delay_steps = 2;
        let mut p = Plant::new(default_plant_model(0.1), inv, BatteryModel::new(1000.0, 50.0).unwrap()).unwrap();
        let applied: Vec<f64> =
            (0..4).map(|_| p.step(10.0, 0.0, 0.0, 0.0, 0.0).unwrap().p_inv_applied).collect();
        assert_eq!(applied, vec![0.0, 0.0, 10.0, 10.0]);
    }

    #[test]
    fn pcc_converges_to_demand_minus_dc_gain() {
        let mut p = plant(1e6);
        for _ in 0..300 {
            p.step(50.0, 20.0, 200.0, 60.0, 0.0).unwrap();
        }
        let s = p.state();
        assert!((s.p_pcc - (200.0 - 50.0 - 0.1 * 20.0)).abs() < 0.1);
        assert!((s.q_pcc - (60.0 - 5.0 - 20.0)).abs() < 0.1);
    }

    #[test]
    fn battery_balanced_power_keeps_soc() {
        let b = BatteryModel::new(1000.0, 50.0).unwrap();
        let (b2, sat) = battery_update(&b, 80.0, 80.0, 0.1);
        assert_eq!(b2.soc, 50.0);
        assert!(!sat);
    }

    #[test]
    fn battery_full_discharge_step() {
        let b = BatteryModel::new(1000.0, 50.0).unwrap();
        let (b2, _) = battery_update(&b, 250.0, 0.0, 0.1);
        assert_relative_eq!(b2.soc - 50.0, -6.944_444_444e-4, epsilon = 1e-12);
    }

    #[test]
    fn battery_floor_clamps_and_flags() {
        let b = BatteryModel::new(1000.0, 0.0).unwrap();
        let (b2, sat) = battery_update(&b, 100.0, 0.0, 0.1);
        assert_eq!(b2.soc, 0.0);
        assert!(sat);
    }

    #[test]
    fn demand_without_noise_is_base_plus_sine() {
        let d = DemandProfile::new(200.0, 10.0, 600.0, 0.0, 1, vec![]);
        let t = 123.4;
        assert_eq!(d.value(t), 200.0 + 10.0 * (std::f64::consts::TAU * t / 600.0).sin());
    }

    #[test]
    fn demand_event_with_spike() {
        let ev = LoadEvent { t_on: 10.0, t_off: 50.0, magnitude: 100.0, transient_spike: 40.0, spike_duration: 0.3 };
        let d = DemandProfile::new(200.0, 5.0, 300.0, 0.0, 1, vec![ev]);
        assert_relative_eq!(d.value(10.1), d.background(10.1) + 140.0, epsilon = 1e-12);
        assert_relative_eq!(d.value(10.5), d.background(10.5) + 100.0, epsilon = 1e-12);
        assert_eq!(d.value(50.0 + 1e-9), d.background(50.0 + 1e-9));
        assert_eq!(d.event_load(10.1), 100.0);
    }

    #[test]
    fn demand_is_seed_reproducible() {
        let a = DemandProfile::new(200.0, 5.0, 300.0, 3.0, 42, vec![]);
        let b = DemandProfile::new(200.0, 5.0, 300.0, 3.0, 42, vec![]);
        let c = DemandProfile::new(200.0, 5.0, 300.0, 3.0, 43, vec![]);
        for k in 0..100 {
            let t = k as f64 * 0.37;
            assert_eq!(a.value(t).to_bits(), b.value(t).to_bits());
        }
        assert_ne!(a.value(7.0), c.value(7.0));
    }

    #[test]
    fn demand_never_negative() {
        let d = DemandProfile::new(1.0, 50.0, 10.0, 5.0, 3, vec![]);
        assert!((0..1000).all(|k| d.value(k as f64 * 0.05) >= 0.0));
    }

    #[test]
    fn piecewise_linear_interpolates_and_holds() {
        let pv = PiecewiseLinear::new(vec![(0.0, 0.0), (10.0, 100.0), (20.0, 50.0)]).unwrap();
        assert_eq!(pv.value(-1.0), 0.0);
        assert_eq!(pv.value(5.0), 50.0);
        assert_eq!(pv.value(15.0), 75.0);
        assert_eq!(pv.value(99.0), 50.0);
        assert!(PiecewiseLinear::new(vec![(1.0, 0.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn pmu_readings() {
        let mut p = plant(1e6);
        p.step(0.0, 0.0, 200.0, 50.0, 30.0).unwrap();
        let layout = PmuLayout::default();
        let pcc = sample_pmu(p.state(), 1, &layout).unwrap();
        assert_eq!(pcc.p, 200.0);
        let loads: f64 = [2, 3].iter().map(|&id| sample_pmu(p.state(), id, &layout).unwrap().p).sum();
        assert_relative_eq!(loads, 200.0, epsilon = 1e-12);
        assert_eq!(sample_pmu(p.state(), 5, &layout).unwrap().p, 30.0);
        assert!(matches!(sample_pmu(p.state(), 7, &layout), Err(CoreError::UnknownPmu(7))));
        assert!(matches!(sample_pmu(p.state(), 0, &layout), Err(CoreError::UnknownPmu(0))));
    }

    #[test]
    fn pmu_zero_flow_reads_zero() {
        let mut p = plant(1e6);
        p.step(0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        for id in 1..=PMU_COUNT {
            let r = sample_pmu(p.state(), id, &PmuLayout::default()).unwrap();
            assert_eq!((r.p, r.q, r.i_mag), (0.0, 0.0, 0.0));
        }
    }
}
