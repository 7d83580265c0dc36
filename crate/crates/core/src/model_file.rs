//! Plain-text model files shared by the simulator and the controller.
//!
//! Layout (whitespace separated, `#` starts a comment line):
//!
//! ```text
//! # n_states n_inputs n_outputs sample_time
//! 4 2 2 0.1
//! <n_states rows of A, n_states values each>
//! <n_states rows of B, n_inputs values each>
//! <n_outputs rows of C, n_states values each>
//! <n_outputs rows of D, n_inputs values each>
//! ```
//!
//! Matrices with zero columns contribute no rows. Values are written with
//! the shortest representation that parses back to the same number.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::lti::LtiModel;
use crate::scalar::Scalar;

pub fn to_string<T: Scalar>(model: &LtiModel<T>) -> String {
    let mut out = String::new();
    out.push_str("# n_states n_inputs n_outputs sample_time\n");
    let _ = writeln!(out, "{} {} {} {}", model.n_states(), model.n_inputs(), model.n_outputs(), model.ts());
    for (name, m) in [("A", model.a()), ("B", model.b()), ("C", model.c()), ("D", model.d())] {
        if m.ncols() == 0 || m.nrows() == 0 {
            continue;
        }
        let _ = writeln!(out, "# {name}");
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn parse<T: Scalar>(text: &str) -> Result<LtiModel<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or(CoreError::Parse { line: 0, msg: "empty model file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(CoreError::Parse { line: hline, msg: "header needs n_states n_inputs n_outputs sample_time".into() });
    }
    let dim = |s: &str| {
        s.parse::<usize>().map_err(|e| CoreError::Parse { line: hline, msg: format!("bad dimension {s:?}: {e}") })
    };
    let (n, m, p) = (dim(fields[0])?, dim(fields[1])?, dim(fields[2])?);
    let ts: T = fields[3]
        .parse()
        .map_err(|_| CoreError::Parse { line: hline, msg: format!("bad sample time {:?}", fields[3]) })?;

    let mut read = |rows: usize, cols: usize| -> Result<DMatrix<T>> {
        let mut mat = DMatrix::zeros(rows, cols);
        if cols == 0 {
            return Ok(mat);
        }
        for r in 0..rows {
            let (ln, line) =
                lines.next().ok_or(CoreError::Parse { line: 0, msg: "unexpected end of file".into() })?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(CoreError::Parse { line: ln, msg: format!("expected {cols} values, found {}", vals.len()) });
            }
            for (c, v) in vals.iter().enumerate() {
                mat[(r, c)] = v.parse().map_err(|_| CoreError::Parse { line: ln, msg: format!("bad number {v:?}") })?;
            }
        }
        Ok(mat)
    };
    let a = read(n, n)?;
    let b = read(n, m)?;
    let c = read(p, n)?;
    let d = read(p, m)?;
    if let Some((ln, _)) = lines.next() {
        return Err(CoreError::Parse { line: ln, msg: "trailing data after D".into() });
    }
    LtiModel::new(a, b, c, d, ts)
}

pub fn load<T: Scalar>(path: &Path) -> std::io::Result<LtiModel<T>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn save<T: Scalar>(model: &LtiModel<T>, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, to_string(model))
}
