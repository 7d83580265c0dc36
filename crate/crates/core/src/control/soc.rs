//! Event-triggered state-of-charge loop and absolute-limit recovery.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::{clamp, Scalar};

/// SoC thresholds in percent, `lo_abs < lo_dz < hi_dz < hi_abs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct SocBands<T> {
    pub lo_abs: T,
    pub lo_dz: T,
    pub hi_dz: T,
    pub hi_abs: T,
}

impl<T: Scalar> Default for SocBands<T> {
    fn default() -> Self {
        Self { lo_abs: T::lit(20.0), lo_dz: T::lit(30.0), hi_dz: T::lit(80.0), hi_abs: T::lit(90.0) }
    }
}

impl<T: Scalar> SocBands<T> {
    pub fn validate(&self) -> Result<()> {
        let ordered = T::zero() <= self.lo_abs
            && self.lo_abs < self.lo_dz
            && self.lo_dz < self.hi_dz
            && self.hi_dz < self.hi_abs
            && self.hi_abs <= T::lit(100.0);
        if ordered {
            Ok(())
        } else {
            Err(CoreError::InvalidParameter("SoC bands must satisfy 0 <= lo_abs < lo_dz < hi_dz < hi_abs <= 100".into()))
        }
    }

    pub fn in_dead_zone(&self, soc: T) -> bool {
        soc >= self.lo_dz && soc <= self.hi_dz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct SocPolicy<T> {
    pub bands: SocBands<T>,
    pub k_p_soc: T,
    pub k_i_soc: T,
    /// Bound on both the integrator state and the output (kW).
    pub windup_limit: T,
    /// Feedforward gain on PV output, zero disables it.
    #[serde(default)]
    pub pv_gain: T,
    pub ts: T,
    #[serde(default)]
    pub x_i_soc: T,
}

impl<T: Scalar> SocPolicy<T> {
    pub fn new(k_p_soc: T, k_i_soc: T, windup_limit: T, ts: T) -> Result<Self> {
        let p = Self {
            bands: SocBands::default(),
            k_p_soc,
            k_i_soc,
            windup_limit,
            pv_gain: T::zero(),
            ts,
            x_i_soc: T::zero(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.bands.validate()?;
        if !(self.windup_limit > T::zero()) {
            return Err(CoreError::InvalidParameter("SoC windup limit must be positive".into()));
        }
        if !(self.ts > T::zero()) {
            return Err(CoreError::InvalidParameter("sample time must be positive".into()));
        }
        Ok(())
    }

    /// k_p = 2, k_i = 0.05, windup limit 50 kW.
    pub fn default_policy(ts: T) -> Self {
        Self::new(T::lit(2.0), T::lit(0.05), T::lit(50.0), ts).expect("valid defaults")
    }
}

/// Reference correction from the SoC loop.
///
/// Zero inside the dead zone with the integrator frozen. In the bands it is
/// PI action on the distance to the nearest dead-zone edge: positive below
/// the dead zone (raises the PCC reference, so the battery charges) and
/// negative above it. The output uses the integrator value from before this
/// sample's update.
pub fn soc_compensation<T: Scalar>(soc: T, p_pv: T, policy: &SocPolicy<T>) -> (T, SocPolicy<T>) {
    let b = &policy.bands;
    if b.in_dead_zone(soc) {
        return (T::zero(), *policy);
    }
    let e = if soc < b.lo_dz { b.lo_dz - soc } else { b.hi_dz - soc };
    let lim = policy.windup_limit;
    let feedforward = -policy.pv_gain * p_pv;
    let out = clamp(policy.k_p_soc * e + policy.k_i_soc * policy.x_i_soc + feedforward, -lim, lim);
    let mut next = *policy;
    next.x_i_soc = clamp(policy.x_i_soc + policy.ts * e, -lim, lim);
    (out, next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryDecision<T> {
    pub active: bool,
    /// Full-power inverter P target while active.
    pub target_p: Option<T>,
}

/// Full-power recovery once the SoC leaves the absolute band.
///
/// Engages above `hi_abs` (discharge, `+p_max`) or below `lo_abs` (charge,
/// `-p_max`) and stays engaged until the SoC is back inside the dead zone.
pub fn soc_recovery_override<T: Scalar>(soc: T, bands: &SocBands<T>, active: bool, p_max: T) -> RecoveryDecision<T> {
    let engaged = soc > bands.hi_abs || soc < bands.lo_abs || (active && !bands.in_dead_zone(soc));
    if !engaged {
        return RecoveryDecision { active: false, target_p: None };
    }
    let target = if soc > bands.hi_dz { p_max } else { -p_max };
    RecoveryDecision { active: true, target_p: Some(target) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn policy() -> SocPolicy<f64> {
        SocPolicy::new(2.0, 0.5, 50.0, 0.1).unwrap()
    }

    #[test]
    fn dead_zone_is_silent() {
        let p = SocPolicy { x_i_soc: 3.0, ..policy() };
        let (f, next) = soc_compensation(50.0, 100.0, &p);
        assert_eq!(f, 0.0);
        assert_eq!(next.x_i_soc, 3.0);
        assert_eq!(soc_compensation(30.0, 0.0, &p).0, 0.0);
        assert_eq!(soc_compensation(80.0, 0.0, &p).0, 0.0);
    }

    #[test]
    fn high_band_lowers_reference() {
        let (f, next) = soc_compensation(85.0, 0.0, &policy());
        assert_relative_eq!(f, -10.0, epsilon = 1e-12);
        assert_relative_eq!(next.x_i_soc, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn low_band_sign_is_opposite() {
        let (f, _) = soc_compensation(25.0, 0.0, &policy());
        assert_relative_eq!(f, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn output_and_integrator_clamped() {
        let mut p = SocPolicy { k_p_soc: 20.0, ..policy() };
        let mut f = 0.0;
        for _ in 0..100_000 {
            (f, p) = soc_compensation(89.0, 0.0, &p);
        }
        assert_eq!(f, -50.0);
        assert_eq!(p.x_i_soc, -50.0);
    }

    #[test]
    fn bands_must_be_ordered() {
        let mut p = policy();
        p.bands.lo_dz = 85.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn recovery_engages_and_holds_until_dead_zone() {
        let b = SocBands::default();
        let d = soc_recovery_override(95.0, &b, false, 250.0);
        assert_eq!(d, RecoveryDecision { active: true, target_p: Some(250.0) });
        let d = soc_recovery_override(85.0, &b, true, 250.0);
        assert_eq!(d.target_p, Some(250.0));
        let d = soc_recovery_override(85.0, &b, false, 250.0);
        assert!(!d.active);
        let d = soc_recovery_override(79.9, &b, true, 250.0);
        assert!(!d.active);
        let d = soc_recovery_override(50.0, &b, false, 250.0);
        assert_eq!(d.target_p, None);
    }

    #[test]
    fn low_recovery_charges() {
        let b = SocBands::default();
        assert_eq!(soc_recovery_override(15.0, &b, false, 250.0).target_p, Some(-250.0));
        assert_eq!(soc_recovery_override(25.0, &b, true, 250.0).target_p, Some(-250.0));
        assert!(!soc_recovery_override(30.0, &b, true, 250.0).active);
    }
}
