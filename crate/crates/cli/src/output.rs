//! CSV and report emission. Floating point goes out with 17 significant
//! digits so repeated identical runs are byte-identical and values round-trip
//! exactly.

use std::io::Write;

use nalgebra::DVector;
use serde_json::{json, Map, Value};

use subriem::trajectory::Trajectory;
use subriem::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trajectory CSV: `t, q1..qn`, then one extra channel depending on the
/// solver (momenta `p`, controls `u` or fiber coordinates `k`).
pub enum ExtraChannel {
    Momenta,
    Controls,
    Fiber,
}

pub fn trajectory_csv(tr: &Trajectory, extra: ExtraChannel) -> Result<String> {
    let n = tr.positions.first().map_or(0, |q| q.len());
    let mut header: Vec<String> = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    let channel: Option<&Vec<DVector<f64>>> = match extra {
        ExtraChannel::Momenta => {
            let p = tr.momenta.as_ref().ok_or(Error::MissingControls)?;
            header.extend((1..=p[0].len()).map(|i| format!("p{i}")));
            Some(p)
        }
        ExtraChannel::Controls => {
            let u = tr.controls.as_ref().ok_or(Error::MissingControls)?;
            header.extend((1..=u[0].len()).map(|i| format!("u{i}")));
            Some(u)
        }
        ExtraChannel::Fiber => {
            let k = tr.fiber.as_ref().ok_or(Error::MissingControls)?;
            header.extend((1..=k[0].len()).map(|i| format!("k{i}")));
            Some(k)
        }
    };
    let mut out = String::with_capacity(tr.len() * 64);
    out.push_str(&header.join(","));
    out.push('\n');
    for (row, (t, q)) in tr.times.iter().zip(&tr.positions).enumerate() {
        out.push_str(&fmt_f64(*t));
        for v in q.iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        if let Some(ch) = channel {
            for v in ch[row].iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_file(path: &str, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Config(format!("cannot create `{path}`: {e}")))?;
    f.write_all(content.as_bytes())
        .map_err(|e| Error::Config(format!("cannot write `{path}`: {e}")))?;
    Ok(())
}

/// Assemble the report: solver name, residuals, row count, wall clock and the
/// config echo (which re-runs to identical outputs).
pub fn report(
    solver: &str,
    label: &str,
    residuals: Value,
    rows: Option<usize>,
    extras: Map<String, Value>,
    wall_clock_s: f64,
    config_echo: Value,
) -> Value {
    let mut map = Map::new();
    map.insert("solver".into(), json!(solver));
    map.insert("scenario".into(), json!(label));
    map.insert("residuals".into(), residuals);
    if let Some(rows) = rows {
        map.insert("rows".into(), json!(rows));
    }
    for (k, v) in extras {
        map.insert(k, v);
    }
    map.insert("wall_clock_s".into(), json!(wall_clock_s));
    map.insert("config".into(), config_echo);
    Value::Object(map)
}

pub fn diagnostics_json(tr: &Trajectory) -> Value {
    let mut map = Map::new();
    for (k, v) in &tr.diagnostics.0 {
        map.insert(k.clone(), json!(v));
    }
    Value::Object(map)
}

pub fn emit_report(report: &Value, path: Option<&str>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    match path {
        Some(p) => write_file(p, &(text + "\n")),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn error_category(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } | Error::UnknownIdentifier { .. } | Error::Config(_) => "config",
        Error::Domain(_)
        | Error::SingularFrame { .. }
        | Error::DegenerateMetric { .. }
        | Error::BlowUp { .. }
        | Error::KernelCollapsed { .. }
        | Error::ZeroSection { .. } => "numeric",
        _ => "precondition",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match error_category(e) {
        "config" => 2,
        "numeric" => 3,
        _ => 4,
    }
}
