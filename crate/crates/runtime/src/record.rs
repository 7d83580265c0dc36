//! Run record: one CSV row per simulator tick.
//!
//! Column order is the field order of [`RecordRow`] and is part of the
//! file format. Controller columns are NaN (or empty text) when the
//! controller ran in another process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mgrid_core::control::{Mode, TickReport, TickStatus};
use mgrid_core::plant::PlantState;
use serde::{Deserialize, Serialize};

pub use csv::Error as CsvError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub tick: u64,
    /// Seconds at the end of the plant step.
    pub t: f64,
    pub p_demand: f64,
    pub q_demand: f64,
    /// Switched load that is on, inrush spikes excluded.
    pub event_load: f64,
    pub p_pv: f64,
    pub p_pcc: f64,
    pub q_pcc: f64,
    pub soc: f64,
    /// Power the inverter actually delivered this step.
    pub p_inv: f64,
    pub q_inv: f64,
    /// Reference registers the plant read this step.
    pub reg_p: f64,
    pub reg_q: f64,
    pub mode: String,
    pub status: String,
    pub staleness: u32,
    pub p_hat: f64,
    pub q_hat: f64,
    pub p_ref: f64,
    pub p_ref_manual: f64,
    pub p_ref_demand: f64,
    pub p_ref_soc: f64,
    pub q_ref: f64,
    pub p_err: f64,
    pub q_err: f64,
    pub cmd_p: f64,
    pub cmd_q: f64,
    pub sat_p: bool,
    pub sat_q: bool,
}

impl RecordRow {
    pub fn from_plant(tick: u64, s: &PlantState<f64>, event_load: f64, reg: (f64, f64)) -> Self {
        Self {
            tick,
            t: s.t,
            p_demand: s.p_dem,
            q_demand: s.q_dem,
            event_load,
            p_pv: s.p_pv,
            p_pcc: s.p_pcc,
            q_pcc: s.q_pcc,
            soc: s.battery.soc,
            p_inv: s.p_inv_applied,
            q_inv: s.q_inv_applied,
            reg_p: reg.0,
            reg_q: reg.1,
            mode: String::new(),
            status: String::new(),
            staleness: 0,
            p_hat: f64::NAN,
            q_hat: f64::NAN,
            p_ref: f64::NAN,
            p_ref_manual: f64::NAN,
            p_ref_demand: f64::NAN,
            p_ref_soc: f64::NAN,
            q_ref: f64::NAN,
            p_err: f64::NAN,
            q_err: f64::NAN,
            cmd_p: f64::NAN,
            cmd_q: f64::NAN,
            sat_p: false,
            sat_q: false,
        }
    }

    pub fn with_controller(mut self, r: &TickReport<f64>) -> Self {
        self.mode = r.mode.to_string();
        self.status = status_name(r.status).to_string();
        self.staleness = r.staleness;
        self.p_hat = r.demand_estimate[0];
        self.q_hat = r.demand_estimate[1];
        let tracking = r.status == TickStatus::Tracking || r.status == TickStatus::Recovery;
        let nan_unless = |v: f64| if tracking && r.mode != Mode::Off { v } else { f64::NAN };
        self.p_ref = nan_unless(r.p_ref.total);
        self.p_ref_manual = nan_unless(r.p_ref.manual);
        self.p_ref_demand = nan_unless(r.p_ref.demand);
        self.p_ref_soc = nan_unless(r.p_ref.soc);
        self.q_ref = nan_unless(r.q_ref.total);
        self.p_err = nan_unless(r.p_ref.error);
        self.q_err = nan_unless(r.q_ref.error);
        self.cmd_p = r.cmd.p;
        self.cmd_q = r.cmd.q;
        self.sat_p = r.flags.saturated_p;
        self.sat_q = r.flags.saturated_q;
        self
    }
}

pub fn status_name(s: TickStatus) -> &'static str {
    match s {
        TickStatus::Off => "off",
        TickStatus::Tracking => "tracking",
        TickStatus::Recovery => "recovery",
        TickStatus::Held => "held",
        TickStatus::Failsafe => "failsafe",
    }
}

/// Streams rows to a CSV file.
pub struct RecordWriter {
    inner: csv::Writer<BufWriter<File>>,
    rows: u64,
}

impl RecordWriter {
    pub fn create(path: &Path) -> csv::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = BufWriter::new(File::create(path)?);
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        // Header written explicitly so an empty run still has one.
        inner.write_record(header())?;
        Ok(Self { inner, rows: 0 })
    }

    pub fn write(&mut self, row: &RecordRow) -> csv::Result<()> {
        self.rows += 1;
        self.inner.serialize(row)
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()?;
        let mut file = self.inner.into_inner().map_err(|e| e.into_error())?;
        file.flush()
    }
}

pub fn header() -> Vec<&'static str> {
    vec![
        "tick",
        "t",
        "p_demand",
        "q_demand",
        "event_load",
        "p_pv",
        "p_pcc",
        "q_pcc",
        "soc",
        "p_inv",
        "q_inv",
        "reg_p",
        "reg_q",
        "mode",
        "status",
        "staleness",
        "p_hat",
        "q_hat",
        "p_ref",
        "p_ref_manual",
        "p_ref_demand",
        "p_ref_soc",
        "q_ref",
        "p_err",
        "q_err",
        "cmd_p",
        "cmd_q",
        "sat_p",
        "sat_q",
    ]
}

pub fn read_record(path: &Path) -> csv::Result<Vec<RecordRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let head = rdr.headers()?.clone();
    if head.iter().collect::<Vec<_>>() != header() {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected run record columns: {head:?}"),
        )));
    }
    rdr.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tick: u64) -> RecordRow {
        RecordRow {
            tick,
            t: tick as f64 * 0.1,
            p_demand: 200.0,
            q_demand: 60.0,
            event_load: 0.0,
            p_pv: 50.0,
            p_pcc: 199.9,
            q_pcc: 60.0,
            soc: 89.5,
            p_inv: 0.1,
            q_inv: 0.0,
            reg_p: 0.1,
            reg_q: 0.0,
            mode: "adaptive".into(),
            status: "tracking".into(),
            staleness: 0,
            p_hat: 200.0,
            q_hat: 60.0,
            p_ref: 190.0,
            p_ref_manual: 0.0,
            p_ref_demand: 200.0,
            p_ref_soc: -10.0,
            q_ref: 60.0,
            p_err: -9.9,
            q_err: 0.0,
            cmd_p: 0.1 + 0.2,
            cmd_q: f64::NAN,
            sat_p: true,
            sat_q: false,
        }
    }

    #[test]
    fn header_matches_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut w = RecordWriter::create(&path).unwrap();
        w.write(&row(1)).unwrap();
        w.write(&row(2)).unwrap();
        w.finish().unwrap();
        let back = read_record(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].cmd_p, 0.1 + 0.2);
        assert!(back[0].cmd_q.is_nan());
        assert_eq!(back[1].mode, "adaptive");
    }

    #[test]
    fn empty_record_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        RecordWriter::create(&path).unwrap().finish().unwrap();
        assert!(read_record(&path).unwrap().is_empty());
    }
}
