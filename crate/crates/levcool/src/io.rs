//! CSV tables, JSON documents and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use levcool_core::sim::{DelaySweepResult, PressureSweepResult, QuantumResult, Trace};
use serde::Serialize;

/// Floats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// A rectangular table with a header row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_num(*v),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

pub fn trace_table(trace: &Trace) -> Table {
    let mut t = Table::new([
        "time_s", "x_m", "y_m", "z_m", "det_x_V", "det_y_V", "det_z_V", "u_a_V", "u_b_V", "u_z_V",
    ]);
    let dt = if trace.sample_rate > 0.0 { 1.0 / trace.sample_rate } else { 0.0 };
    for k in 0..trace.len() {
        let mut row: Vec<Cell> = vec![(k as f64 * dt).into()];
        row.extend((0..3).map(|i| Cell::Num(trace.position[i][k])));
        row.extend((0..3).map(|i| Cell::Num(trace.detector[i][k])));
        row.extend((0..3).map(|i| Cell::Num(trace.control[i][k])));
        t.push(row);
    }
    t
}

const AX: [&str; 3] = ["x", "y", "z"];

pub fn delay_sweep_table(res: &DelaySweepResult, axis: usize) -> Table {
    let a = AX[axis];
    let mut t = Table::new(vec![
        "phi_rad".to_string(),
        "phi_realized_rad".into(),
        format!("T_eff_{a}_K"),
        format!("stderr_{a}_K"),
        format!("oracle_{a}_K"),
        "repeats".into(),
    ]);
    for i in 0..res.phi.len() {
        t.push(vec![
            res.phi[i].into(),
            res.phi_realized[i].into(),
            res.t_eff[i].mean.into(),
            res.t_eff[i].stderr.into(),
            res.oracle[i].into(),
            res.t_eff[i].n.into(),
        ]);
    }
    t
}

pub fn pressure_sweep_table(res: &PressureSweepResult) -> Table {
    let mut cols = vec!["pressure_mbar".to_string()];
    for a in AX {
        cols.push(format!("T_eff_{a}_K"));
        cols.push(format!("stderr_{a}_K"));
        cols.push(format!("oracle_{a}_K"));
    }
    cols.push("unstable_runs".into());
    let mut t = Table::new(cols);
    for p in &res.points {
        let mut row: Vec<Cell> = vec![p.pressure_mbar.into()];
        for a in 0..3 {
            row.push(p.t_eff[a].mean.into());
            row.push(p.t_eff[a].stderr.into());
            row.push(p.oracle[a].unwrap_or(f64::NAN).into());
        }
        row.push(p.unstable_runs.into());
        t.push(row);
    }
    t
}

pub fn quantum_table(res: &QuantumResult) -> Table {
    let mut t = Table::new(["axis", "n_mean", "n_std", "n_stderr", "n_predicted", "runs"]);
    for a in 0..3 {
        let s = &res.occupancy[a];
        t.push(vec![
            AX[a].into(),
            s.mean.into(),
            s.std().into(),
            s.stderr.into(),
            res.predicted[a].into(),
            res.runs.into(),
        ]);
    }
    t
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Single writer for every artifact of a run. Remembers what it wrote for
/// the manifest.
#[derive(Debug)]
pub struct OutputDir {
    pub root: PathBuf,
    pub files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.root.join(name)
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> anyhow::Result<()> {
        let p = self.path(name);
        table.write_csv(&p)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let p = self.path(name);
        write_json(&p, value)
    }

    pub fn text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(p, text)?;
        Ok(())
    }
}
