//! Reference scheduling: demand estimation, rate limiting and the composed
//! power reference.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lti::{LtiModel, LtiRunner};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Off,
    Adaptive,
    Manual,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Off => "off",
            Mode::Adaptive => "adaptive",
            Mode::Manual => "manual",
        })
    }
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Mode::Off),
            "adaptive" => Ok(Mode::Adaptive),
            "manual" => Ok(Mode::Manual),
            other => Err(CoreError::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceState<T> {
    pub mode: Mode,
    /// Operator targets, kW / kvar.
    pub manual_ref_p: T,
    pub manual_ref_q: T,
    /// kW/s (kvar/s for Q).
    pub rate_limit: T,
    /// Rate-limited demand estimate.
    pub p_dem_bar: T,
    pub q_dem_bar: T,
    /// Operator targets after the same rate limiter.
    pub p_ref_bar: T,
    pub q_ref_bar: T,
}

impl<T: Scalar> ReferenceState<T> {
    pub fn new(mode: Mode, rate_limit: T) -> Result<Self> {
        if !(rate_limit > T::zero()) {
            return Err(CoreError::InvalidParameter("reference rate limit must be positive".into()));
        }
        let z = T::zero();
        Ok(Self {
            mode,
            manual_ref_p: z,
            manual_ref_q: z,
            rate_limit,
            p_dem_bar: z,
            q_dem_bar: z,
            p_ref_bar: z,
            q_ref_bar: z,
        })
    }
}

/// Limits the change of `target` relative to `prev` to `rate * ts`.
pub fn rate_limit_reference<T: Scalar>(target: T, prev: T, rate: T, ts: T) -> T {
    let r = (target - prev) / ts;
    if r > rate {
        prev + ts * rate
    } else if r < -rate {
        prev - ts * rate
    } else {
        target
    }
}

/// The composed reference and its parts, as used for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerReference<T> {
    pub manual: T,
    pub demand: T,
    pub soc: T,
    pub total: T,
    pub error: T,
}

fn compose<T: Scalar>(measured: T, mode: Mode, manual: T, demand: T, soc: T) -> Option<PowerReference<T>> {
    let (manual, demand) = match mode {
        Mode::Off => return None,
        Mode::Adaptive => (T::zero(), demand),
        Mode::Manual => (manual, T::zero()),
    };
    let total = manual + demand + soc;
    Some(PowerReference { manual, demand, soc, total, error: total - measured })
}

/// `P_ref = P_ref_bar + P_dem_bar + P_soc_bar` and `P_err = P_ref - P_PCC`.
///
/// Only the component belonging to the active mode contributes; `None` when
/// the controller is off.
pub fn compute_power_error<T: Scalar>(p_pcc: T, reference: &ReferenceState<T>, p_soc_bar: T) -> Option<PowerReference<T>> {
    compose(p_pcc, reference.mode, reference.p_ref_bar, reference.p_dem_bar, p_soc_bar)
}

/// Reactive counterpart of [`compute_power_error`] (no SoC term).
pub fn compute_reactive_error<T: Scalar>(q_pcc: T, reference: &ReferenceState<T>) -> Option<PowerReference<T>> {
    compose(q_pcc, reference.mode, reference.q_ref_bar, reference.q_dem_bar, T::zero())
}

/// Recursive demand estimator.
///
/// Runs a copy of the coupling model on the inverter commands the controller
/// has issued, delayed by one sample plus `lag` samples of known transport
/// delay, and adds its output to the measured PCC flow:
/// `P_dem_hat(k) = P_PCC(k) + [G11 P_inv + G12 Q_inv](k - 1 - lag)`.
#[derive(Debug, Clone)]
pub struct DemandEstimator<T: Scalar> {
    runner: LtiRunner<T>,
    history: VecDeque<[T; 2]>,
    lag: usize,
}

impl<T: Scalar> DemandEstimator<T> {
    pub fn new(model: LtiModel<T>, lag: usize) -> Result<Self> {
        if model.n_inputs() != 2 || model.n_outputs() != 2 {
            return Err(CoreError::Dimension("estimator model must be 2x2".into()));
        }
        Ok(Self { runner: LtiRunner::new(model), history: VecDeque::with_capacity(lag + 1), lag })
    }

    pub fn model(&self) -> &LtiModel<T> {
        self.runner.model()
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    /// Estimate for the current sample; advances the model copy.
    pub fn estimate(&mut self, p_pcc: T, q_pcc: T) -> [T; 2] {
        let u = if self.history.len() > self.lag { self.history[0] } else { [T::zero(); 2] };
        let y = self.runner.step(&DVector::from_column_slice(&u));
        [p_pcc + y[0], q_pcc + y[1]]
    }

    /// Records the command issued this sample.
    pub fn record(&mut self, cmd: [T; 2]) {
        self.history.push_back(cmd);
        while self.history.len() > self.lag + 1 {
            self.history.pop_front();
        }
    }
}

/// Batch form of [`DemandEstimator`]: replays the whole command history.
///
/// `history[i]` is the command issued at sample `i`; the estimate is for
/// sample `history.len()`. With fewer than `lag + 1` commands the model sees
/// only zeros and the estimate equals the measurement.
pub fn estimate_demand<T: Scalar>(p_pcc: T, q_pcc: T, history: &[[T; 2]], model: &LtiModel<T>, lag: usize) -> [T; 2] {
    let k = history.len();
    let mut runner = LtiRunner::new(model.clone());
    let mut y = DVector::zeros(2);
    for i in 0..=k {
        let u = if i > lag { history[i - 1 - lag] } else { [T::zero(); 2] };
        y = runner.step(&DVector::from_column_slice(&u));
    }
    [p_pcc + y[0], q_pcc + y[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::default_plant_model;
    use approx::assert_relative_eq;

    fn state(mode: Mode) -> ReferenceState<f64> {
        ReferenceState::new(mode, 8.0).unwrap()
    }

    #[test]
    fn manual_error() {
        let mut r = state(Mode::Manual);
        r.p_ref_bar = 150.0;
        r.p_dem_bar = 999.0;
        assert_eq!(compute_power_error(150.0, &r, 0.0).unwrap().error, 0.0);
    }

    #[test]
    fn adaptive_error_with_soc() {
        let mut r = state(Mode::Adaptive);
        r.p_dem_bar = 200.0;
        r.p_ref_bar = 999.0;
        assert_eq!(compute_power_error(180.0, &r, -10.0).unwrap().error, 10.0);
        assert_eq!(compute_power_error(250.0, &r, 0.0).unwrap().error, -50.0);
    }

    #[test]
    fn off_has_no_error() {
        assert!(compute_power_error(1.0, &state(Mode::Off), 0.0).is_none());
    }

    #[test]
    fn rate_limiter_cases() {
        assert_relative_eq!(rate_limit_reference(100.5, 100.0, 8.0, 0.1), 100.5);
        assert_relative_eq!(rate_limit_reference(110.0, 100.0, 8.0, 0.1), 100.8, epsilon = 1e-12);
        assert_relative_eq!(rate_limit_reference(90.0, 100.0, 8.0, 0.1), 99.2, epsilon = 1e-12);
    }

    #[test]
    fn cold_start_returns_measurement() {
        let mut e = DemandEstimator::new(default_plant_model(0.1), 0).unwrap();
        assert_eq!(e.estimate(123.0, 4.0), [123.0, 4.0]);
        assert_eq!(estimate_demand(123.0, 4.0, &[], &default_plant_model(0.1), 0), [123.0, 4.0]);
    }

    #[test]
    fn zero_history_is_measurement() {
        let hist = vec![[0.0, 0.0]; 30];
        assert_eq!(estimate_demand(77.0, 1.0, &hist, &default_plant_model(0.1), 0), [77.0, 1.0]);
    }

    #[test]
    fn steady_command_adds_dc_gain() {
        let model = default_plant_model(0.1);
        let hist = vec![[50.0, 0.0]; 400];
        let [p, q] = estimate_demand(200.0, 10.0, &hist, &model, 0);
        assert_relative_eq!(p, 250.0, epsilon = 1e-9);
        assert_relative_eq!(q, 15.0, epsilon = 1e-9);
    }

    #[test]
    fn mode_text_round_trip() {
        for m in [Mode::Off, Mode::Adaptive, Mode::Manual] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("auto".parse::<Mode>().is_err());
    }
}
