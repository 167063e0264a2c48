//! On-disk formats: JSON with full-precision floats, trajectory and sweep CSVs.

use std::fmt::Write as _;
use std::io;

use serde::Serialize;
use signflow_core::analysis::SweepRecord;
use signflow_core::dynamics::{Algorithm, Sample, Trajectory};
use signflow_core::problem::{build_dataset, Dataset, HyperParams, RawBlock};

/// Version tag carried by every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Writes every float as `d.dddddddddddddddde±x` (17 significant digits), so
/// values round-trip exactly and output bytes do not depend on the shortest
/// representation algorithm.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // only reachable from CSV; JSON maps non-finite values to null
        "nan".to_string()
    }
}

/// Pretty-free JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

/// Wraps a document with the schema version tag.
#[derive(Serialize)]
pub struct Versioned<'a, T: Serialize> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn versioned_json<T: Serialize>(body: &T) -> serde_json::Result<Vec<u8>> {
    to_json(&Versioned { schema_version: SCHEMA_VERSION, body })
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DatasetFile {
    pub blocks: Vec<RawBlock>,
}

impl DatasetFile {
    pub fn of(ds: &Dataset) -> Self {
        Self { blocks: ds.raw_blocks() }
    }

    pub fn build(&self) -> signflow_core::Result<Dataset> {
        build_dataset(&self.blocks)
    }
}

pub fn trajectory_header(d: usize, n: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for prefix in ["w_plus", "w_minus", "beta", "dual"] {
        cols.extend((1..=d).map(|i| format!("{prefix}_{i}")));
    }
    cols.extend((1..=n).map(|i| format!("r_{i}")));
    for prefix in ["f", "h"] {
        cols.extend((1..=d).map(|i| format!("{prefix}_{i}")));
    }
    cols
}

fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&fmt_f64(v));
    }
    out.push('\n');
}

/// `t, w_plus_*, w_minus_*, beta_*, dual_*, r_*, f_*, h_*`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let first = &traj.samples[0];
    let (d, n) = (first.beta.len(), first.residuals.len());
    let mut out = trajectory_header(d, n).join(",");
    out.push('\n');
    for s in &traj.samples {
        let row = std::iter::once(s.t)
            .chain(s.w_plus.iter().copied())
            .chain(s.w_minus.iter().copied())
            .chain(s.beta.iter().copied())
            .chain(s.dual.iter().copied())
            .chain(s.residuals.iter().copied())
            .chain(s.f.iter().copied())
            .chain(s.h.iter().copied());
        push_row(&mut out, row);
    }
    out
}

/// A parsed CSV: header plus numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().ok_or("empty CSV")?.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|f| if f.is_empty() { Ok(f64::NAN) } else { f.parse::<f64>() })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("row {}: {e}", k + 1))?;
            if row.len() != header.len() {
                return Err(format!("row {} has {} fields, header has {}", k + 1, row.len(), header.len()));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values of the columns `prefix_1..prefix_k` for one row.
    pub fn group(&self, row: usize, prefix: &str) -> Vec<f64> {
        (1..)
            .map_while(|i| self.column(&format!("{prefix}_{i}")))
            .map(|c| self.rows[row][c])
            .collect()
    }
}

/// Rebuilds a sample from the raw weight columns of a trajectory CSV row.
pub fn recompute_row(ds: &Dataset, algorithm: Algorithm, hp: &HyperParams, table: &Table, row: usize) -> Sample {
    let t = table.rows[row][table.column("t").expect("t column")];
    let mut w = table.group(row, "w_plus");
    w.extend(table.group(row, "w_minus"));
    Sample::from_state(ds, algorithm, hp, t, &w)
}

/// `eps, T0, T, E, delta_bar, sum_bound, line_bound`; missing values are
/// left empty.
pub fn sweep_csv(records: &[Option<&SweepRecord>], grid: &[f64]) -> String {
    let mut out = String::from("eps,T0,T,E,delta_bar,sum_bound,line_bound\n");
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for (eps, rec) in grid.iter().zip(records) {
        match rec {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    fmt_f64(*eps),
                    opt(r.t0),
                    opt(r.t),
                    opt(r.e_value),
                    fmt_f64(r.delta_bar),
                    opt(r.sum_bound),
                    opt(r.line_bound)
                );
            }
            None => {
                let _ = writeln!(out, "{},,,,,,", fmt_f64(*eps));
            }
        }
    }
    out
}
