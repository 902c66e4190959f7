//! CSV and JSONL writers. Floats use Rust's shortest round-trip formatting,
//! so the decimal separator is always '.'; every record ends with '\n'.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::error::Result;
use crate::tensor::Tensor;

fn coord_header(out: &mut String, dim: usize) {
    for j in 0..dim {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
}

fn coords(out: &mut String, row: &[f64]) {
    for v in row {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

/// `sample_id,x0,x1,...`, one row per point.
pub fn samples_csv(points: &Tensor) -> String {
    let mut out = String::from("sample_id");
    coord_header(&mut out, points.cols());
    for (i, row) in points.rows_iter().enumerate() {
        let _ = write!(out, "{i}");
        coords(&mut out, row);
    }
    out
}

/// `traj_id,step,t,x0,x1,...` for the first `keep` trajectories, every
/// recorded state.
pub fn trajectories_csv(traj: &Trajectory, keep: usize) -> String {
    let dim = traj.states[0].cols();
    let mut out = String::from("traj_id,step,t");
    coord_header(&mut out, dim);
    for i in 0..keep.min(traj.batch_size()) {
        for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
            let _ = write!(out, "{i},{k},{t}");
            coords(&mut out, x.row(i));
        }
    }
    out
}

/// `alpha,beta,metric` rows in the given order.
pub fn grid_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("alpha,beta,metric\n");
    for (a, b, m) in rows {
        let _ = writeln!(out, "{a},{b},{m}");
    }
    out
}

/// Appends one JSON object per line, flushing each record.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::options().create(true).append(true).open(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, FnField, StepSchedule};

    #[test]
    fn samples_layout() {
        let p = Tensor::from_rows(&[[0.5, -1.0], [2.0, 1e-20]]).unwrap();
        assert_eq!(samples_csv(&p), "sample_id,x0,x1\n0,0.5,-1\n1,2,0.00000000000000000001\n");
    }

    #[test]
    fn trajectory_rows_per_state() {
        let f = FnField::new(1, |_x: &[f64], _t: f64| vec![1.0]);
        let x0 = Tensor::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let traj = integrate(&f, &x0, None, &StepSchedule::uniform(1).unwrap()).unwrap();
        let csv = trajectories_csv(&traj, 4);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(lines[0], "traj_id,step,t,x0");
        assert_eq!(lines[1], "0,0,0,0");
        assert_eq!(lines[2], "0,1,1,1");
        assert!(csv.ends_with('\n'));
    }

    #[test]
    fn grid_keeps_nan() {
        let csv = grid_csv(&[(1.0, 0.01, 0.25), (10.0, 0.1, f64::NAN)]);
        assert_eq!(csv, "alpha,beta,metric\n1,0.01,0.25\n10,0.1,NaN\n");
    }
}
