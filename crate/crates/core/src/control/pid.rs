//! Power-loop PID with bias terms and back-calculation anti-windup.
//!
//! The control law is
//!
//! ```text
//! u(k) = K_P (e(k) - P_PB) + K_I x_I(k) + K_D (x_D(k) - P_DB)
//! x_I(k) = T_s e(k) + x_I(k-1)
//! ```
//!
//! When the output has to be limited, `x_I` is recomputed so the law
//! evaluates exactly to the limited value.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::{limit_amplitude_rate, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains<T> {
    pub k_p: T,
    pub k_i: T,
    pub k_d: T,
    /// Proportional bias, kW.
    #[serde(default)]
    pub p_pb: T,
    /// Derivative bias, kW/s.
    #[serde(default)]
    pub p_db: T,
    pub ts: T,
    /// Pole of the first-order filter on the derivative, in [0, 1).
    pub derivative_filter_pole: T,
}

impl<T: Scalar> PidGains<T> {
    pub fn new(k_p: T, k_i: T, k_d: T, ts: T) -> Result<Self> {
        let g = Self { k_p, k_i, k_d, p_pb: T::zero(), p_db: T::zero(), ts, derivative_filter_pole: T::lit(0.8) };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_i < T::zero() {
            return Err(CoreError::InvalidParameter("k_i must be non-negative".into()));
        }
        if !(self.ts > T::zero()) {
            return Err(CoreError::InvalidParameter("sample time must be positive".into()));
        }
        if self.derivative_filter_pole < T::zero() || self.derivative_filter_pole >= T::one() {
            return Err(CoreError::InvalidParameter("derivative filter pole must be in [0, 1)".into()));
        }
        let all = [self.k_p, self.k_i, self.k_d, self.p_pb, self.p_db];
        if !all.iter().all(|v| v.is_finite_value()) {
            return Err(CoreError::NonFinite("PID gains"));
        }
        Ok(())
    }

    /// k_p = 0.8, k_i = 0.4, k_d = 0.
    pub fn default_power_loop(ts: T) -> Self {
        Self::new(T::lit(0.8), T::lit(0.4), T::zero(), ts).expect("valid defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState<T> {
    /// kW s
    pub x_i: T,
    /// kW/s
    pub x_d: T,
    pub last_error: T,
    pub last_output: T,
}

/// Evaluates the control law for given states.
pub fn control_law<T: Scalar>(gains: &PidGains<T>, err: T, x_i: T, x_d: T) -> T {
    gains.k_p * (err - gains.p_pb) + gains.k_i * x_i + gains.k_d * (x_d - gains.p_db)
}

/// One controller sample: integrate, filter the derivative, evaluate the law.
pub fn pid_step<T: Scalar>(state: &PidState<T>, gains: &PidGains<T>, err: T) -> (T, PidState<T>) {
    let alpha = gains.derivative_filter_pole;
    let x_i = gains.ts * err + state.x_i;
    let x_d = alpha * state.x_d + (T::one() - alpha) * (err - state.last_error) / gains.ts;
    let raw = control_law(gains, err, x_i, x_d);
    (raw, PidState { x_i, x_d, last_error: err, last_output: raw })
}

/// Integrator value that makes the law produce `target`, if `k_i > 0`.
pub fn back_calculate<T: Scalar>(gains: &PidGains<T>, err: T, x_d: T, target: T) -> Option<T> {
    if gains.k_i > T::zero() {
        Some((target - gains.k_p * (err - gains.p_pb) - gains.k_d * (x_d - gains.p_db)) / gains.k_i)
    } else {
        None
    }
}

/// Amplitude and rate bound for one inverter channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelLimit<T> {
    pub max: T,
    /// per second
    pub ramp: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Saturation<T> {
    pub cmd: T,
    pub state: PidState<T>,
    pub saturated: bool,
    /// Saturated with `k_i = 0`: the output was clamped but there was no
    /// integrator to correct.
    pub windup_unhandled: bool,
}

/// Limits `raw` and, if it changed, back-calculates the integrator.
///
/// `state` is the post-step state from [`pid_step`]; its `last_error` is the
/// error the raw output was computed from.
pub fn saturate_and_antiwindup<T: Scalar>(
    raw: T,
    state: &PidState<T>,
    gains: &PidGains<T>,
    limit: ChannelLimit<T>,
    prev_cmd: T,
) -> Saturation<T> {
    let cmd = limit_amplitude_rate(raw, prev_cmd, limit.max, limit.ramp, gains.ts);
    if cmd == raw {
        return Saturation { cmd, state: *state, saturated: false, windup_unhandled: false };
    }
    let mut out = *state;
    out.last_output = cmd;
    match back_calculate(gains, state.last_error, state.x_d, cmd) {
        Some(x_i) => {
            out.x_i = x_i;
            Saturation { cmd, state: out, saturated: true, windup_unhandled: false }
        }
        None => Saturation { cmd, state: out, saturated: true, windup_unhandled: true },
    }
}

/// Captures bias terms so the next output continues from `target`.
///
/// Afterwards the proportional and derivative terms read zero for the
/// current error and derivative state, and the integrator carries `target`.
pub fn capture_bumpless<T: Scalar>(gains: &mut PidGains<T>, state: &mut PidState<T>, target: T) {
    gains.p_pb = state.last_error;
    gains.p_db = state.x_d;
    if let Some(x_i) = back_calculate(gains, state.last_error, state.x_d, target) {
        state.x_i = x_i;
    }
    state.last_output = control_law(gains, state.last_error, state.x_i, state.x_d);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gains(k_p: f64, k_i: f64, k_d: f64) -> PidGains<f64> {
        PidGains::new(k_p, k_i, k_d, 0.1).unwrap()
    }

    #[test]
    fn pure_proportional() {
        let (raw, _) = pid_step(&PidState::default(), &gains(1.0, 0.0, 0.0), 10.0);
        assert_eq!(raw, 10.0);
    }

    #[test]
    fn proportional_plus_integral_arithmetic() {
        let (raw, s) = pid_step(&PidState::default(), &gains(0.5, 0.2, 0.0), 10.0);
        assert_relative_eq!(s.x_i, 1.0, epsilon = 1e-15);
        assert_relative_eq!(raw, 5.2, epsilon = 1e-12);
    }

    #[test]
    fn zero_error_zero_output() {
        let (raw, _) = pid_step(&PidState::default(), &gains(0.8, 0.4, 0.3), 0.0);
        assert_eq!(raw, 0.0);
    }

    #[test]
    fn filtered_derivative() {
        let g = gains(0.0, 0.0, 1.0);
        let (raw, s) = pid_step(&PidState::default(), &g, 1.0);
        // (1 - 0.8) * (1 - 0) / 0.1
        assert_relative_eq!(raw, 2.0, epsilon = 1e-12);
        let (raw2, _) = pid_step(&s, &g, 1.0);
        assert_relative_eq!(raw2, 1.6, epsilon = 1e-12);
    }

    #[test]
    fn within_limits_passes_through() {
        let g = gains(0.8, 0.4, 0.0);
        let (raw, s) = pid_step(&PidState::default(), &g, 5.0);
        let sat = saturate_and_antiwindup(raw, &s, &g, ChannelLimit { max: 250.0, ramp: 80.0 }, 0.0);
        assert_eq!(sat.cmd, raw);
        assert!(!sat.saturated);
        assert_eq!(sat.state, s);
    }

    #[test]
    fn amplitude_back_calculation() {
        let g = gains(1.0, 0.5, 0.0);
        let (raw, s) = pid_step(&PidState::default(), &g, 300.0);
        assert!(raw > 250.0);
        let sat = saturate_and_antiwindup(raw, &s, &g, ChannelLimit { max: 250.0, ramp: 1e9 }, 250.0);
        assert_eq!(sat.cmd, 250.0);
        assert_relative_eq!(sat.state.x_i, (250.0 - 300.0) / 0.5, epsilon = 1e-12);
        assert_relative_eq!(control_law(&g, 300.0, sat.state.x_i, sat.state.x_d), 250.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_clamp() {
        let g = gains(1.0, 0.5, 0.0);
        let s = PidState { last_error: 100.0, ..Default::default() };
        let sat = saturate_and_antiwindup(100.0, &s, &g, ChannelLimit { max: 250.0, ramp: 8.0 }, 0.0);
        assert_relative_eq!(sat.cmd, 0.8, epsilon = 1e-12);
        assert_relative_eq!(control_law(&g, 100.0, sat.state.x_i, 0.0), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_integral_gain_only_clamps() {
        let g = gains(2.0, 0.0, 0.0);
        let (raw, s) = pid_step(&PidState::default(), &g, 200.0);
        let sat = saturate_and_antiwindup(raw, &s, &g, ChannelLimit { max: 250.0, ramp: 1e9 }, 0.0);
        assert_eq!(sat.cmd, 250.0);
        assert!(sat.windup_unhandled);
        assert_eq!(sat.state.x_i, s.x_i);
    }

    #[test]
    fn capture_continues_from_target() {
        let mut g = gains(0.8, 0.4, 0.2);
        let (_, mut s) = pid_step(&PidState::default(), &g, 37.0);
        capture_bumpless(&mut g, &mut s, 120.0);
        assert_relative_eq!(control_law(&g, 37.0, s.x_i, s.x_d), 120.0, epsilon = 1e-12);
        assert_eq!(g.p_pb, 37.0);
    }

    #[test]
    fn rejects_negative_integral_gain() {
        assert!(PidGains::new(1.0, -0.1, 0.0, 0.1).is_err());
        assert!(PidGains::new(1.0, 0.1, 0.0, 0.0).is_err());
    }
}
