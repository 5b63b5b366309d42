//! CSV readers and writers for traces, frame summaries and convergence
//! tables. Floats are written with 17 significant digits so every value
//! reads back bit-for-bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::averaging::FrameSummary;
use crate::engine::SlotRecord;
use crate::error::{Error, Result};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, what: &'static str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format { what, detail: format!("not a number: '{s}'") })
}

fn parse_u64(s: &str, what: &'static str) -> Result<u64> {
    s.trim().parse().map_err(|_| Error::Format { what, detail: format!("not an integer: '{s}'") })
}

/// One row of a trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub omega: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub drift: f64,
    pub bound_rhs: f64,
}

impl From<&SlotRecord> for TraceRow {
    fn from(r: &SlotRecord) -> Self {
        TraceRow {
            t: r.t,
            omega: r.omega,
            x: r.x.clone(),
            y: r.y.clone(),
            w: r.w.clone(),
            z: r.z.clone(),
            drift: r.drift,
            bound_rhs: r.bound_rhs,
        }
    }
}

impl TraceRow {
    /// `Q(t)` as one vector.
    pub fn queue(&self) -> Vec<f64> {
        self.w.iter().chain(&self.z).copied().collect()
    }
}

pub fn trace_header(dim: usize, num_constraints: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "omega".to_string()];
    h.extend((1..=dim).map(|i| format!("x_{i}")));
    h.extend((1..=dim).map(|i| format!("y_{i}")));
    h.extend((1..=num_constraints).map(|j| format!("W_{j}")));
    h.extend((1..=dim).map(|i| format!("Z_{i}")));
    h.push("drift".into());
    h.push("bound_rhs".into());
    h
}

/// Streaming trace writer.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
    row: Vec<String>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W, dim: usize, num_constraints: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(trace_header(dim, num_constraints))?;
        Ok(TraceWriter { inner, row: Vec::new() })
    }

    pub fn write(&mut self, r: &SlotRecord) -> Result<()> {
        self.row.clear();
        self.row.push(r.t.to_string());
        self.row.push(r.omega.to_string());
        for v in r.x.iter().chain(&r.y).chain(&r.w).chain(&r.z) {
            self.row.push(fmt_f64(*v));
        }
        self.row.push(fmt_f64(r.drift));
        self.row.push(fmt_f64(r.bound_rhs));
        self.inner.write_record(&self.row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub fn write_trace_csv<W: Write>(out: W, dim: usize, num_constraints: usize, records: &[SlotRecord]) -> Result<W> {
    let mut w = TraceWriter::new(out, dim, num_constraints)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// A trace read back from CSV, with dimensions taken from the header.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub dim: usize,
    pub num_constraints: usize,
    pub rows: Vec<TraceRow>,
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<TraceTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let count = |p: &str| header.iter().filter(|h| h.starts_with(p)).count();
    let dim = count("x_");
    let nc = count("W_");
    let expected = trace_header(dim, nc);
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format { what: "trace csv", detail: "unexpected header".into() });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |k: usize| parse_f64(&rec[k], "trace csv");
        let slice = |start: usize, n: usize| (start..start + n).map(f).collect::<Result<Vec<_>>>();
        rows.push(TraceRow {
            t: parse_u64(&rec[0], "trace csv")?,
            omega: parse_u64(&rec[1], "trace csv")? as usize,
            x: slice(2, dim)?,
            y: slice(2 + dim, dim)?,
            w: slice(2 + 2 * dim, nc)?,
            z: slice(2 + 2 * dim + nc, dim)?,
            drift: f(2 + 3 * dim + nc)?,
            bound_rhs: f(3 + 3 * dim + nc)?,
        });
    }
    Ok(TraceTable { dim, num_constraints: nc, rows })
}

/// One row of a frame-summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame_index: usize,
    pub t0: u64,
    pub len: u64,
    pub f_xbar: f64,
    pub g_xbar: Vec<f64>,
    pub f_ybar: f64,
}

impl From<&FrameSummary> for FrameRow {
    fn from(f: &FrameSummary) -> Self {
        FrameRow {
            frame_index: f.index,
            t0: f.t0(),
            len: f.len(),
            f_xbar: f.evaluation.f_xbar,
            g_xbar: f.evaluation.g_xbar.clone(),
            f_ybar: f.evaluation.f_ybar,
        }
    }
}

pub fn write_frame_csv<W: Write>(out: W, num_constraints: usize, frames: &[FrameSummary]) -> Result<W> {
    let mut w = csv::Writer::from_writer(out);
    let mut h = vec!["frame_index".to_string(), "t0".into(), "T".into(), "f_xbar".into()];
    h.extend((1..=num_constraints).map(|j| format!("g_{j}_xbar")));
    h.push("f_ybar".into());
    w.write_record(&h)?;
    for f in frames {
        let row = FrameRow::from(f);
        let mut r = vec![row.frame_index.to_string(), row.t0.to_string(), row.len.to_string(), fmt_f64(row.f_xbar)];
        r.extend(row.g_xbar.iter().map(|v| fmt_f64(*v)));
        r.push(fmt_f64(row.f_ybar));
        w.write_record(&r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_frame_csv<R: Read>(input: R) -> Result<Vec<FrameRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let nc = header.iter().filter(|h| h.starts_with("g_")).count();
    if header.len() != 5 + nc || &header[0] != "frame_index" || &header[header.len() - 1] != "f_ybar" {
        return Err(Error::Format { what: "frame csv", detail: "unexpected header".into() });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(FrameRow {
            frame_index: parse_u64(&rec[0], "frame csv")? as usize,
            t0: parse_u64(&rec[1], "frame csv")?,
            len: parse_u64(&rec[2], "frame csv")?,
            f_xbar: parse_f64(&rec[3], "frame csv")?,
            g_xbar: (4..4 + nc).map(|k| parse_f64(&rec[k], "frame csv")).collect::<Result<_>>()?,
            f_ybar: parse_f64(&rec[4 + nc], "frame csv")?,
        });
    }
    Ok(out)
}

/// Writes a simple numeric table: a header and rows of floats.
pub fn write_table_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<f64>]) -> Result<W> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_table_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(|s| parse_f64(s, "table csv")).collect::<Result<Vec<_>>>()?);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::{staggered_run, StaggerSchedule};
    use crate::builtin::{self, Builtin};
    use crate::engine::{run, RunConfig};

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 5e300, 0.0, -0.0, f64::MIN_POSITIVE, 1.6875] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn trace_csv_reads_back() {
        let p = builtin::problem(Builtin::SimLinearNonunique);
        let trace = run(&p, &RunConfig::new(&p, 20.0, 300, 2), None).unwrap();
        let bytes = write_trace_csv(Vec::new(), 2, 3, &trace.records).unwrap();
        let table = read_trace_csv(bytes.as_slice()).unwrap();
        assert_eq!((table.dim, table.num_constraints), (2, 3));
        let expected: Vec<TraceRow> = trace.records.iter().map(TraceRow::from).collect();
        assert_eq!(table.rows, expected);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("t,omega,x_1,x_2,y_1,y_2,W_1,W_2,W_3,Z_1,Z_2,drift,bound_rhs\n"));
    }

    #[test]
    fn frame_csv_reads_back() {
        let p = builtin::problem(Builtin::SimQuadratic);
        let cfg = RunConfig::new(&p, 20.0, 500, 2);
        let frames = staggered_run(&p, &cfg, &StaggerSchedule::geometric(2.0, 500).unwrap()).unwrap();
        let bytes = write_frame_csv(Vec::new(), 2, &frames).unwrap();
        let rows = read_frame_csv(bytes.as_slice()).unwrap();
        assert_eq!(rows, frames.iter().map(FrameRow::from).collect::<Vec<_>>());
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(read_trace_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_frame_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
