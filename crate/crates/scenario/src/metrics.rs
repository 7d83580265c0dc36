//! Summary metrics computed from a run record.
//!
//! Everything here is a pure function of the rows (plus the inverter
//! limits, which the record does not carry).

use mgrid_runtime::record::RecordRow;
use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub p_max: f64,
    pub q_max: f64,
    /// kW/s, both channels.
    pub ramp_limit: f64,
    pub ts: f64,
}

impl Limits {
    pub fn of(s: &Scenario) -> Self {
        Self { p_max: s.inverter.p_max, q_max: s.inverter.q_max, ramp_limit: s.inverter.ramp_limit, ts: s.ts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Recovery band as a fraction of the event magnitude.
    pub band: f64,
    /// Seconds the PCC power must stay in the band.
    pub sustain: f64,
    /// Seconds skipped at the start of each mode segment before RMSE.
    pub settle: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { band: 0.05, sustain: 2.0, settle: 60.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    /// Time of the first row that includes the switched load.
    pub t: f64,
    /// Signed change of switched load, kW.
    pub magnitude: f64,
    /// P reference in force just before the event; NaN if none was.
    pub reference: f64,
    /// Seconds until |P_PCC - reference| re-enters the band for good.
    pub recovery_time: Option<f64>,
    /// Largest |P_PCC - reference| before the next event.
    pub peak_excursion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub mode: String,
    pub t_start: f64,
    pub t_end: f64,
    /// RMSE of the controller's P tracking error over settled tracking ticks.
    pub p_rmse: Option<f64>,
    pub q_rmse: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSpan {
    pub status: String,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Violations {
    pub amplitude: u64,
    pub rate: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.amplitude + self.rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ticks: usize,
    pub soc_min: f64,
    pub soc_max: f64,
    pub violations: Violations,
    pub events: Vec<EventMetrics>,
    pub segments: Vec<SegmentMetrics>,
    pub statuses: Vec<StatusSpan>,
    /// Largest event excursion, 0 without events.
    pub peak_excursion: f64,
}

fn rmse(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt())
}

/// Contiguous runs of equal `key(row)`, as index ranges.
fn runs<K: PartialEq>(rows: &[RecordRow], key: impl Fn(&RecordRow) -> K) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || key(&rows[i]) != key(&rows[start]) {
            if i > start {
                out.push((start, i));
            }
            start = i;
        }
    }
    out
}

pub fn count_violations(rows: &[RecordRow], limits: &Limits) -> Violations {
    // Tolerance for the limiter's own rounding.
    let eps = 1e-9;
    let step = limits.ramp_limit * limits.ts;
    let mut v = Violations::default();
    let mut prev = (0.0, 0.0);
    for r in rows {
        if r.p_inv.abs() > limits.p_max + eps || r.q_inv.abs() > limits.q_max + eps {
            v.amplitude += 1;
        }
        if (r.p_inv - prev.0).abs() > step + eps || (r.q_inv - prev.1).abs() > step + eps {
            v.rate += 1;
        }
        prev = (r.p_inv, r.q_inv);
    }
    v
}

fn event_starts(rows: &[RecordRow]) -> Vec<usize> {
    let mut prev = rows.first().map_or(0.0, |r| r.event_load);
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate().skip(1) {
        if r.event_load != prev {
            out.push(i);
        }
        prev = r.event_load;
    }
    out
}

fn event_metrics(rows: &[RecordRow], i: usize, end: usize, opts: &MetricsOptions, ts: f64) -> EventMetrics {
    let magnitude = rows[i].event_load - rows[i - 1].event_load;
    let reference = rows[i - 1].p_ref;
    let dev = |r: &RecordRow| (r.p_pcc - reference).abs();
    let peak_excursion = rows[i..end].iter().map(dev).fold(0.0, f64::max);
    let band = opts.band * magnitude.abs();
    let need = (opts.sustain / ts).round() as usize;
    let mut recovery_time = None;
    if reference.is_finite() {
        let mut run = 0;
        for j in i..end {
            if dev(&rows[j]) < band {
                run += 1;
                if run >= need.max(1) {
                    let first = j + 1 - run;
                    recovery_time = Some(rows[first].t - rows[i].t);
                    break;
                }
            } else {
                run = 0;
            }
        }
    }
    EventMetrics {
        t: rows[i].t,
        magnitude,
        reference,
        recovery_time,
        peak_excursion: if reference.is_finite() { peak_excursion } else { f64::NAN },
    }
}

pub fn compute_metrics(rows: &[RecordRow], limits: &Limits, opts: &MetricsOptions) -> Metrics {
    let soc = rows.iter().map(|r| r.soc);
    let soc_min = soc.clone().fold(f64::INFINITY, f64::min);
    let soc_max = soc.fold(f64::NEG_INFINITY, f64::max);

    let starts = event_starts(rows);
    let events: Vec<EventMetrics> = starts
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let end = starts.get(k + 1).copied().unwrap_or(rows.len());
            event_metrics(rows, i, end, opts, limits.ts)
        })
        .collect();

    let segments = runs(rows, |r| r.mode.clone())
        .into_iter()
        .map(|(a, b)| {
            let t0 = rows[a].t;
            let settled: Vec<&RecordRow> =
                rows[a..b].iter().filter(|r| r.status == "tracking" && r.t >= t0 + opts.settle).collect();
            let p: Vec<f64> = settled.iter().map(|r| r.p_err).filter(|e| e.is_finite()).collect();
            let q: Vec<f64> = settled.iter().map(|r| r.q_err).filter(|e| e.is_finite()).collect();
            SegmentMetrics {
                mode: rows[a].mode.clone(),
                t_start: t0,
                t_end: rows[b - 1].t,
                p_rmse: rmse(&p),
                q_rmse: rmse(&q),
                samples: p.len(),
            }
        })
        .collect();

    let statuses = runs(rows, |r| r.status.clone())
        .into_iter()
        .map(|(a, b)| StatusSpan { status: rows[a].status.clone(), t_start: rows[a].t, t_end: rows[b - 1].t })
        .collect();

    let peak_excursion = events.iter().map(|e| e.peak_excursion).filter(|v| v.is_finite()).fold(0.0, f64::max);
    Metrics {
        ticks: rows.len(),
        soc_min,
        soc_max,
        violations: count_violations(rows, limits),
        events,
        segments,
        statuses,
        peak_excursion,
    }
}

impl Metrics {
    /// Recovery time of the first event with this magnitude.
    pub fn recovery_for(&self, magnitude: f64) -> Option<f64> {
        self.events.iter().find(|e| e.magnitude == magnitude).and_then(|e| e.recovery_time)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tick: u64, p_pcc: f64, p_ref: f64, event_load: f64) -> RecordRow {
        RecordRow {
            tick,
            t: tick as f64 * 0.1,
            p_demand: 200.0 + event_load,
            q_demand: 0.0,
            event_load,
            p_pv: 0.0,
            p_pcc,
            q_pcc: 0.0,
            soc: 50.0,
            p_inv: 0.0,
            q_inv: 0.0,
            reg_p: 0.0,
            reg_q: 0.0,
            mode: "manual".into(),
            status: "tracking".into(),
            staleness: 0,
            p_hat: f64::NAN,
            q_hat: f64::NAN,
            p_ref,
            p_ref_manual: p_ref,
            p_ref_demand: 0.0,
            p_ref_soc: 0.0,
            q_ref: 0.0,
            p_err: p_ref - p_pcc,
            q_err: 0.0,
            cmd_p: 0.0,
            cmd_q: 0.0,
            sat_p: false,
            sat_q: false,
        }
    }

    fn limits() -> Limits {
        Limits { p_max: 250.0, q_max: 250.0, ramp_limit: 8.0, ts: 0.1 }
    }

    #[test]
    fn no_events_no_event_metrics() {
        let rows: Vec<_> = (1..100).map(|k| row(k, 150.0, 150.0, 0.0)).collect();
        let m = compute_metrics(&rows, &limits(), &MetricsOptions::default());
        assert!(m.events.is_empty());
        assert_eq!(m.peak_excursion, 0.0);
        assert_eq!(m.segments.len(), 1);
    }

    #[test]
    fn recovery_is_first_sustained_entry() {
        // Event at tick 11; error decays linearly by 10 kW per tick, with a
        // brief excursion back out at tick 16.
        let mut rows: Vec<_> = (1..=10).map(|k| row(k, 150.0, 150.0, 0.0)).collect();
        for k in 11..=60 {
            let excess = match k {
                11..=15 => 100.0 - 10.0 * (k - 11) as f64,
                16 => 10.0,
                _ => 1.0,
            };
            rows.push(row(k, 150.0 + excess, 150.0, 100.0));
        }
        let m = compute_metrics(&rows, &limits(), &MetricsOptions::default());
        assert_eq!(m.events.len(), 1);
        let e = m.events[0];
        assert_eq!(e.magnitude, 100.0);
        assert_eq!(e.peak_excursion, 100.0);
        // In band (< 5 kW) from tick 17 on; the event row is tick 11.
        assert!((e.recovery_time.unwrap() - 0.6).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn unrecovered_event_has_no_time() {
        let mut rows: Vec<_> = (1..=10).map(|k| row(k, 150.0, 150.0, 0.0)).collect();
        rows.extend((11..=30).map(|k| row(k, 200.0, 150.0, 50.0)));
        let m = compute_metrics(&rows, &limits(), &MetricsOptions::default());
        assert_eq!(m.events[0].recovery_time, None);
    }

    #[test]
    fn violations_counted_on_applied_power() {
        let mut rows: Vec<_> = (1..=5).map(|k| row(k, 0.0, 0.0, 0.0)).collect();
        rows[1].p_inv = 0.8;
        rows[2].p_inv = 1.6 + 1e-6;
        rows[3].p_inv = 251.0;
        rows[4].p_inv = 250.5;
        let v = count_violations(&rows, &limits());
        assert_eq!(v, Violations { amplitude: 2, rate: 2 });
    }

    #[test]
    fn metrics_are_deterministic() {
        let rows: Vec<_> = (1..300).map(|k| row(k, 150.0 + (k as f64).sin(), 150.0, if k > 100 { 50.0 } else { 0.0 })).collect();
        let a = compute_metrics(&rows, &limits(), &MetricsOptions::default());
        let b = compute_metrics(&rows, &limits(), &MetricsOptions::default());
        assert_eq!(a.to_json(), b.to_json());
    }
}
