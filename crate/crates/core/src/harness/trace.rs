//! Per-round trace records and their delimited-text serialization.
//!
//! One row per round. Fixed columns:
//!
//! ```text
//! round,selected_count,cumulative_events,omega_norm,grad_norm_global,lagrangian,f_theta,f_omega,selected
//! ```
//!
//! `selected` holds the fired client indices separated by spaces. When per-client
//! records are present, four columns per client follow:
//! `s_<i>,load_<i>,delta_<i>,dist_<i>`. Reals are written in scientific notation
//! with 17 significant digits, which round-trips every `f64` exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIXED_COLUMNS: [&str; 9] = [
    "round",
    "selected_count",
    "cumulative_events",
    "omega_norm",
    "grad_norm_global",
    "lagrangian",
    "f_theta",
    "f_omega",
    "selected",
];

const CLIENT_COLUMNS: [&str; 4] = ["s", "load", "delta", "dist"];

/// Controller state of one client after one round. Baselines leave everything
/// but `event` at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientSample {
    pub event: bool,
    /// `L_i^{k+1}`
    pub load: f64,
    /// `δ_i^{k+1}`
    pub delta: f64,
    /// `|ω^k − z_i^prev|` tested against `δ_i^k`.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub selected: Vec<usize>,
    pub selected_count: usize,
    /// Empty unless per-client recording was enabled.
    pub clients: Vec<ClientSample>,
    pub omega_norm: f64,
    pub grad_norm_global: f64,
    pub lagrangian: f64,
    pub f_theta: f64,
    pub f_omega: f64,
    pub cumulative_events: u64,
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn header(clients: usize) -> Vec<String> {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for i in 0..clients {
        cols.extend(CLIENT_COLUMNS.iter().map(|c| format!("{c}_{i}")));
    }
    cols
}

pub fn emit_trace(trace: &[RoundTrace], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, BufWriter::new(file))
}

pub fn write_trace<W: Write>(trace: &[RoundTrace], out: W) -> Result<()> {
    let clients = trace.first().map_or(0, |r| r.clients.len());
    if let Some(r) = trace.iter().find(|r| r.clients.len() != clients) {
        return Err(Error::contract(format!(
            "round {} records {} clients, expected {clients}",
            r.round,
            r.clients.len()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(clients))?;
    let mut row = Vec::with_capacity(FIXED_COLUMNS.len() + 4 * clients);
    for r in trace {
        row.clear();
        row.push(r.round.to_string());
        row.push(r.selected_count.to_string());
        row.push(r.cumulative_events.to_string());
        for x in [r.omega_norm, r.grad_norm_global, r.lagrangian, r.f_theta, r.f_omega] {
            row.push(real(x));
        }
        row.push(
            r.selected
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        );
        for c in &r.clients {
            row.push(u8::from(c.event).to_string());
            row.push(real(c.load));
            row.push(real(c.delta));
            row.push(real(c.distance));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<RoundTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(file)
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<Vec<RoundTrace>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let head = reader.headers()?.clone();
    let head_err = |message: String| Error::TraceParse {
        row: 0,
        field: "header".into(),
        message,
    };
    if head.len() < FIXED_COLUMNS.len() || (head.len() - FIXED_COLUMNS.len()) % 4 != 0 {
        return Err(head_err(format!("unexpected column count {}", head.len())));
    }
    let clients = (head.len() - FIXED_COLUMNS.len()) / 4;
    let expected = header(clients);
    if let Some((got, want)) = head.iter().zip(&expected).find(|(g, w)| g != w) {
        return Err(head_err(format!("expected column `{want}`, found `{got}`")));
    }

    let mut trace = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record?;
        if record.len() != expected.len() {
            return Err(Error::TraceParse {
                row,
                field: "*".into(),
                message: format!("expected {} fields, found {}", expected.len(), record.len()),
            });
        }
        let field = |col: usize| -> (&str, &str) { (expected[col].as_str(), &record[col]) };
        let int = |col: usize| -> Result<u64> {
            let (name, raw) = field(col);
            raw.trim().parse().map_err(|e| Error::TraceParse {
                row,
                field: name.into(),
                message: format!("{e}: {raw:?}"),
            })
        };
        let num = |col: usize| -> Result<f64> {
            let (name, raw) = field(col);
            raw.trim().parse().map_err(|e| Error::TraceParse {
                row,
                field: name.into(),
                message: format!("{e}: {raw:?}"),
            })
        };
        let selected = record[8]
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>().map_err(|e| Error::TraceParse {
                    row,
                    field: "selected".into(),
                    message: format!("{e}: {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(clients);
        for i in 0..clients {
            let base = FIXED_COLUMNS.len() + 4 * i;
            let event = match int(base)? {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::TraceParse {
                        row,
                        field: expected[base].clone(),
                        message: format!("event flag must be 0 or 1, got {other}"),
                    })
                }
            };
            samples.push(ClientSample {
                event,
                load: num(base + 1)?,
                delta: num(base + 2)?,
                distance: num(base + 3)?,
            });
        }
        trace.push(RoundTrace {
            round: int(0)? as usize,
            selected_count: int(1)? as usize,
            cumulative_events: int(2)?,
            omega_norm: num(3)?,
            grad_norm_global: num(4)?,
            lagrangian: num(5)?,
            f_theta: num(6)?,
            f_omega: num(7)?,
            selected,
            clients: samples,
        });
    }
    Ok(trace)
}
