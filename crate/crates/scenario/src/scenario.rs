//! Scenario files.
//!
//! TOML with fixed sections; unknown keys are rejected. Example:
//!
//! ```toml
//! name = "load_switch_slow"
//! duration = 420.0
//!
//! [demand]
//! base = 200.0
//! noise_std = 1.0
//!
//! [[demand.events]]
//! t_on = 60.0
//! t_off = 120.0
//! magnitude = 50.0
//!
//! [pv]
//! points = [[0.0, 40.0]]
//!
//! [battery]
//! capacity = 500.0
//! soc_init = 60.0
//!
//! [inverter]
//! ramp_limit = 8.0
//!
//! [delays]
//! in = 1
//! out = 1
//!
//! [[schedule]]
//! t = 1.0
//! mode = "manual"
//! p_ref = 150.0
//! q_ref = 45.0
//! ```

use std::fmt;
use std::path::Path;

use mgrid_core::control::{ControllerConfig, LoopTuning, Mode, SocTuning};
use mgrid_core::lti::{default_plant_model, LtiModel};
use mgrid_core::plant::{BatteryModel, DemandProfile, InverterModel, LoadEvent, PiecewiseLinear, PmuLayout};
use mgrid_runtime::{CtlConfig, ScheduledCommand, SimConfig};
use serde::{Deserialize, Serialize};
use toml::de::{DeTable, DeValue};

/// Synchrophasor SOC of every scenario's time zero (2024-01-01T00:00:00Z).
pub const SCENARIO_EPOCH: u32 = 1_704_067_200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Seconds.
    pub duration: f64,
    #[serde(default = "default_ts")]
    pub ts: f64,
    /// Seeds the demand noise.
    #[serde(default)]
    pub seed: u64,
    pub demand: DemandSpec,
    pub pv: PvSpec,
    pub battery: BatterySpec,
    #[serde(default)]
    pub inverter: InverterSpec,
    #[serde(default)]
    pub delays: Delays,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
}

fn default_ts() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    /// kW
    pub base: f64,
    /// Standard deviation of the slow demand noise, kW.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub sine_amplitude: f64,
    #[serde(default = "default_sine_period")]
    pub sine_period: f64,
    /// Q demand as a fraction of P demand.
    #[serde(default = "default_reactive_ratio")]
    pub reactive_ratio: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<LoadEvent<f64>>,
}

fn default_sine_period() -> f64 {
    1800.0
}

fn default_reactive_ratio() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvSpec {
    /// (t seconds, kW), linear in between, held outside.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatterySpec {
    /// kWh
    pub capacity: f64,
    /// percent
    pub soc_init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverterSpec {
    pub p_max: f64,
    pub q_max: f64,
    /// kW/s
    pub ramp_limit: f64,
}

impl Default for InverterSpec {
    fn default() -> Self {
        Self { p_max: 250.0, q_max: 250.0, ramp_limit: 8.0 }
    }
}

/// Step delays on the controller side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Delays {
    #[serde(rename = "in")]
    pub ingress: usize,
    #[serde(rename = "out")]
    pub egress: usize,
}

/// Controller tunables a scenario may override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSpec {
    /// Reference rate limit R, kW/s.
    pub rate_limit: f64,
    pub gains_p: LoopTuning<f64>,
    pub gains_q: LoopTuning<f64>,
    pub soc: SocTuning<f64>,
    pub decoupling: bool,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let c = ControllerConfig::<f64>::default();
        Self { rate_limit: c.rate_limit, gains_p: c.gains_p, gains_q: c.gains_q, soc: c.soc, decoupling: c.decoupling }
    }
}

/// An operator action at time `t`: a mode switch, a manual reference, or
/// both. References are sent before the mode switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_ref: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError {
    /// Dotted path of the offending field, when known.
    pub field: Option<String>,
    /// 1-based line in the source text.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ScenarioError {}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError { field: Some(field.into()), line: None, message: message.into() }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Finds the source line of a dotted field path such as `schedule.2.t`.
fn locate(text: &str, path: &str) -> Option<usize> {
    let root = DeTable::parse(text).ok()?;
    let mut span = root.span();
    let mut table = Some(root.get_ref());
    let mut value: Option<&DeValue<'_>> = None;
    for part in path.split('.') {
        let next = match (table, value, part.parse::<usize>()) {
            (Some(t), _, _) => t.get(part),
            (None, Some(v), Ok(i)) => v.get(i),
            (None, Some(v), Err(_)) => v.get(part),
            _ => None,
        }?;
        span = next.span();
        value = Some(next.get_ref());
        table = None;
    }
    Some(line_of(text, span.start))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError {
            field: None,
            line: e.span().map(|r| line_of(text, r.start)),
            message: e.message().to_string(),
        })?;
        s.validate().map_err(|mut e| {
            if let Some(field) = &e.field {
                e.line = locate(text, field);
            }
            e
        })?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError { field: None, line: None, message: format!("{}: {e}", path.display()) })?;
        Self::parse(&text).map_err(|mut e| {
            e.message = format!("{}: {}", path.display(), e.message);
            e
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(invalid("duration", "must be a non-negative number of seconds"));
        }
        if !finite_pos(self.ts) {
            return Err(invalid("ts", "must be positive"));
        }
        let d = &self.demand;
        if !(d.base.is_finite() && d.base >= 0.0) {
            return Err(invalid("demand.base", "must be non-negative"));
        }
        if !(d.noise_std.is_finite() && d.noise_std >= 0.0) {
            return Err(invalid("demand.noise_std", "must be non-negative"));
        }
        if !d.sine_amplitude.is_finite() {
            return Err(invalid("demand.sine_amplitude", "must be finite"));
        }
        if !finite_pos(d.sine_period) {
            return Err(invalid("demand.sine_period", "must be positive"));
        }
        if !d.reactive_ratio.is_finite() {
            return Err(invalid("demand.reactive_ratio", "must be finite"));
        }
        for (i, e) in d.events.iter().enumerate() {
            e.validate().map_err(|err| invalid(format!("demand.events.{i}"), err.to_string()))?;
        }
        if self.pv.points.is_empty() {
            return Err(invalid("pv.points", "needs at least one point"));
        }
        PiecewiseLinear::new(self.pv_points()).map_err(|e| invalid("pv.points", e.to_string()))?;
        BatteryModel::new(self.battery.capacity, self.battery.soc_init).map_err(|e| invalid("battery", e.to_string()))?;
        let inv = &self.inverter;
        InverterModel::new(inv.p_max, inv.q_max, inv.ramp_limit).map_err(|e| invalid("inverter", e.to_string()))?;
        if !finite_pos(self.controller.rate_limit) {
            return Err(invalid("controller.rate_limit", "must be positive"));
        }
        let mut prev: Option<f64> = None;
        for (i, e) in self.schedule.iter().enumerate() {
            let field = |k: &str| format!("schedule.{i}.{k}");
            if !(e.t.is_finite() && e.t >= 0.0 && e.t <= self.duration) {
                return Err(invalid(field("t"), format!("{} is outside [0, duration]", e.t)));
            }
            if prev.is_some_and(|p| e.t <= p) {
                return Err(invalid(field("t"), "schedule times must be strictly increasing"));
            }
            prev = Some(e.t);
            match (e.p_ref, e.q_ref) {
                (Some(p), Some(q)) => {
                    if !(p.abs() <= inv.p_max) {
                        return Err(invalid(field("p_ref"), format!("{p} kW exceeds the inverter rating")));
                    }
                    if !(q.abs() <= inv.q_max) {
                        return Err(invalid(field("q_ref"), format!("{q} kvar exceeds the inverter rating")));
                    }
                }
                (None, None) if e.mode.is_none() => {
                    return Err(invalid(format!("schedule.{i}"), "entry sets neither a mode nor a reference"))
                }
                (None, None) => {}
                (Some(_), None) => return Err(invalid(field("p_ref"), "p_ref needs q_ref")),
                (None, Some(_)) => return Err(invalid(field("q_ref"), "q_ref needs p_ref")),
            }
        }
        self.controller_config().map_err(|e| invalid("controller", e))?;
        Ok(())
    }

    fn pv_points(&self) -> Vec<(f64, f64)> {
        self.pv.points.iter().map(|p| (p[0], p[1])).collect()
    }

    pub fn inverter_model(&self) -> InverterModel<f64> {
        InverterModel::new(self.inverter.p_max, self.inverter.q_max, self.inverter.ramp_limit)
            .expect("validated inverter")
    }

    /// The plant (and controller) model. Scenarios use the built-in
    /// coupling model sampled at `ts`.
    pub fn model(&self) -> LtiModel<f64> {
        default_plant_model(self.ts)
    }

    pub fn sim_config(&self) -> SimConfig {
        let d = &self.demand;
        SimConfig {
            ts: self.ts,
            duration: self.duration,
            model: self.model(),
            inverter: self.inverter_model(),
            battery: BatteryModel::new(self.battery.capacity, self.battery.soc_init).expect("validated battery"),
            demand: DemandProfile::new(d.base, d.sine_amplitude, d.sine_period, d.noise_std, self.seed, d.events.clone()),
            reactive_ratio: d.reactive_ratio,
            pv: PiecewiseLinear::new(self.pv_points()).expect("validated PV profile"),
            pmu: PmuLayout::default(),
            epoch: SCENARIO_EPOCH,
        }
    }

    fn controller_config(&self) -> Result<ControllerConfig<f64>, String> {
        let c = &self.controller;
        let cfg = ControllerConfig {
            ts: self.ts,
            mode: Mode::Off,
            gains_p: c.gains_p,
            gains_q: c.gains_q,
            soc: c.soc,
            rate_limit: c.rate_limit,
            inverter: InverterModel::new(self.inverter.p_max, self.inverter.q_max, self.inverter.ramp_limit)
                .map_err(|e| e.to_string())?,
            decoupling: c.decoupling,
            ..ControllerConfig::default()
        };
        // Building a controller runs every parameter check.
        mgrid_core::control::Controller::new(cfg.clone(), self.model()).map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn ctl_config(&self) -> CtlConfig {
        CtlConfig {
            controller: self.controller_config().expect("validated controller"),
            model: self.model(),
            delay_in: self.delays.ingress,
            delay_out: self.delays.egress,
        }
    }

    /// The schedule as operator bridge command lines.
    pub fn commands(&self) -> Vec<ScheduledCommand> {
        let mut out = Vec::new();
        for e in &self.schedule {
            if let (Some(p), Some(q)) = (e.p_ref, e.q_ref) {
                out.push(ScheduledCommand { t: e.t, line: format!("ref {p} {q}") });
            }
            if let Some(m) = e.mode {
                out.push(ScheduledCommand { t: e.t, line: format!("mode {m}") });
            }
        }
        out
    }
}

/// Scenario files shipped with the crate, by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("demand_following", include_str!("../scenarios/demand_following.toml")),
    ("load_switch_slow", include_str!("../scenarios/load_switch_slow.toml")),
    ("load_switch_fast", include_str!("../scenarios/load_switch_fast.toml")),
    ("soc_recovery", include_str!("../scenarios/soc_recovery.toml")),
];

pub fn bundled(name: &str) -> Option<Scenario> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| Scenario::parse(text).expect("bundled scenario parses"))
}
