//! SVG figures from run records.

use std::ops::Range;
use std::path::{Path, PathBuf};

use mgrid_runtime::record::RecordRow;
use plotters::coord::Shift;
use plotters::prelude::*;

use crate::metrics::Limits;

#[derive(Debug, thiserror::Error)]
#[error("plot {path}: {message}")]
pub struct PlotError {
    pub path: PathBuf,
    pub message: String,
}

type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;
type DrawResult = Result<(), Box<dyn std::error::Error>>;

const MEASURED: RGBColor = RGBColor(200, 30, 30);
const REFERENCE: RGBColor = RGBColor(30, 60, 200);
const AUX: RGBColor = RGBColor(120, 120, 120);
const SIZE_WIDE: (u32, u32) = (1200, 900);
const SIZE_ZOOM: (u32, u32) = (900, 600);

struct Trace<'a> {
    label: &'a str,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

impl<'a> Trace<'a> {
    fn of(rows: &[RecordRow], label: &'a str, color: RGBColor, f: impl Fn(&RecordRow) -> f64) -> Self {
        Self { label, color, points: rows.iter().map(|r| (r.t, f(r))).collect() }
    }
}

/// Splits at NaN so gaps (controller off, held) stay gaps.
fn pieces(points: &[(f64, f64)]) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &(t, v) in points {
        if v.is_finite() {
            cur.push((t, v));
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn y_range(traces: &[Trace<'_>], guides: &[f64]) -> Range<f64> {
    let vals = traces.iter().flat_map(|t| t.points.iter().map(|p| p.1)).chain(guides.iter().copied());
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1.0);
    (lo - pad)..(hi + pad)
}

fn panel(area: &Area<'_>, x: Range<f64>, y_desc: &str, traces: &[Trace<'_>], guides: &[f64]) -> DrawResult {
    let y = y_range(traces, guides);
    let mut chart = ChartBuilder::on(area)
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x.clone(), y)?;
    chart.configure_mesh().x_desc("t [s]").y_desc(y_desc).light_line_style(WHITE).draw()?;
    for &g in guides {
        chart.draw_series(DashedLineSeries::new([(x.start, g), (x.end, g)], 6, 4, AUX.stroke_width(1)))?;
    }
    let mut labelled = false;
    for tr in traces {
        let mut first = true;
        for piece in pieces(&tr.points) {
            let s = chart.draw_series(LineSeries::new(piece, tr.color.stroke_width(1)))?;
            if first {
                let c = tr.color;
                s.label(tr.label).legend(move |(lx, ly)| PathElement::new(vec![(lx, ly), (lx + 20, ly)], c));
                first = false;
                labelled = true;
            }
        }
    }
    if labelled {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    Ok(())
}

fn x_range(rows: &[RecordRow]) -> Range<f64> {
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if b.t > a.t => a.t..b.t,
        (Some(a), _) => a.t..a.t + 1.0,
        _ => 0.0..1.0,
    }
}

fn render(path: &Path, size: (u32, u32), draw: impl FnOnce(&Area<'_>) -> DrawResult) -> Result<PathBuf, PlotError> {
    let err = |e: &dyn std::fmt::Display| PlotError { path: path.to_path_buf(), message: e.to_string() };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| err(&e))?;
    }
    let root = SVGBackend::new(path, size).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    draw(&root).map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(path.to_path_buf())
}

/// PCC active power with its reference, inverter power and SoC.
pub fn active_power_figure(rows: &[RecordRow], limits: &Limits, path: &Path) -> Result<PathBuf, PlotError> {
    render(path, SIZE_WIDE, |root| {
        let areas = root.split_evenly((3, 1));
        let x = x_range(rows);
        panel(
            &areas[0],
            x.clone(),
            "P at PCC [kW]",
            &[
                Trace::of(rows, "P_PCC", MEASURED, |r| r.p_pcc),
                Trace::of(rows, "P_ref", REFERENCE, |r| r.p_ref),
            ],
            &[],
        )?;
        panel(
            &areas[1],
            x.clone(),
            "inverter P [kW]",
            &[
                Trace::of(rows, "command", MEASURED, |r| r.reg_p),
                Trace::of(rows, "applied", REFERENCE, |r| r.p_inv),
            ],
            &[-limits.p_max, limits.p_max],
        )?;
        panel(&areas[2], x, "SoC [%]", &[Trace::of(rows, "SoC", MEASURED, |r| r.soc)], &[20.0, 30.0, 80.0, 90.0])
    })
}

/// PCC reactive power with its reference, and inverter reactive power.
pub fn reactive_power_figure(rows: &[RecordRow], limits: &Limits, path: &Path) -> Result<PathBuf, PlotError> {
    render(path, SIZE_WIDE, |root| {
        let areas = root.split_evenly((2, 1));
        let x = x_range(rows);
        panel(
            &areas[0],
            x.clone(),
            "Q at PCC [kvar]",
            &[
                Trace::of(rows, "Q_PCC", MEASURED, |r| r.q_pcc),
                Trace::of(rows, "Q_ref", REFERENCE, |r| r.q_ref),
            ],
            &[],
        )?;
        panel(
            &areas[1],
            x,
            "inverter Q [kvar]",
            &[
                Trace::of(rows, "command", MEASURED, |r| r.reg_q),
                Trace::of(rows, "applied", REFERENCE, |r| r.q_inv),
            ],
            &[-limits.q_max, limits.q_max],
        )
    })
}

fn window(rows: &[RecordRow], t0: f64, t1: f64) -> &[RecordRow] {
    let a = rows.partition_point(|r| r.t < t0);
    let b = rows.partition_point(|r| r.t <= t1);
    &rows[a..b]
}

/// Close-up of one load event: PCC power and inverter power.
pub fn event_figure(rows: &[RecordRow], t_event: f64, limits: &Limits, path: &Path) -> Result<PathBuf, PlotError> {
    let w = window(rows, t_event - 10.0, t_event + 40.0);
    render(path, SIZE_ZOOM, |root| {
        let areas = root.split_evenly((2, 1));
        let x = x_range(w);
        panel(
            &areas[0],
            x.clone(),
            "P at PCC [kW]",
            &[
                Trace::of(w, "P_PCC", MEASURED, |r| r.p_pcc),
                Trace::of(w, "P_ref", REFERENCE, |r| r.p_ref),
                Trace::of(w, "switched load", AUX, |r| r.event_load),
            ],
            &[],
        )?;
        panel(&areas[1], x, "inverter P [kW]", &[Trace::of(w, "applied", MEASURED, |r| r.p_inv)], &[limits.p_max])
    })
}

/// Two runs of the same scenario side by side, e.g. slow and fast inverter.
pub fn comparison_figure(
    left: (&str, &[RecordRow]),
    right: (&str, &[RecordRow]),
    limits: &Limits,
    path: &Path,
) -> Result<PathBuf, PlotError> {
    render(path, SIZE_WIDE, |root| {
        let cols = root.split_evenly((1, 2));
        for (area, (name, rows)) in cols.iter().zip([left, right]) {
            let (title, body) = area.split_vertically(30);
            title.titled(name, ("sans-serif", 20))?;
            let areas = body.split_evenly((2, 1));
            let x = x_range(rows);
            panel(
                &areas[0],
                x.clone(),
                "P at PCC [kW]",
                &[
                    Trace::of(rows, "P_PCC", MEASURED, |r| r.p_pcc),
                    Trace::of(rows, "P_ref", REFERENCE, |r| r.p_ref),
                ],
                &[],
            )?;
            panel(&areas[1], x, "inverter P [kW]", &[Trace::of(rows, "applied", MEASURED, |r| r.p_inv)], &[limits.p_max])?;
        }
        Ok(())
    })
}

/// Standard figure set for one record: `p.svg`, `q.svg` and one
/// `event_<n>.svg` per load event.
pub fn emit_plots(rows: &[RecordRow], limits: &Limits, dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let mut out = vec![
        active_power_figure(rows, limits, &dir.join("p.svg"))?,
        reactive_power_figure(rows, limits, &dir.join("q.svg"))?,
    ];
    let mut prev = rows.first().map_or(0.0, |r| r.event_load);
    let mut n = 0;
    for r in rows.iter().skip(1) {
        if r.event_load != prev {
            n += 1;
            out.push(event_figure(rows, r.t, limits, &dir.join(format!("event_{n}.svg")))?);
        }
        prev = r.event_load;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaps_split_traces() {
        let pts = [(0.0, 1.0), (1.0, f64::NAN), (2.0, 2.0), (3.0, 3.0), (4.0, f64::NAN)];
        let p = pieces(&pts);
        assert_eq!(p, vec![vec![(0.0, 1.0)], vec![(2.0, 2.0), (3.0, 3.0)]]);
    }

    #[test]
    fn empty_record_draws_axes() {
        let dir = tempfile::tempdir().unwrap();
        let limits = Limits { p_max: 250.0, q_max: 250.0, ramp_limit: 8.0, ts: 0.1 };
        let files = emit_plots(&[], &limits, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let svg = std::fs::read_to_string(&files[0]).unwrap();
        assert!(svg.starts_with("<svg"), "{}", &svg[..40.min(svg.len())]);
    }
}
