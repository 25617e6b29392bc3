//! Sweep result tables.
//!
//! Header `factor,value,param_count,final_loss,acc_total,acc_small,acc_medium,acc_large,ratio`,
//! rows in ascending factor value, floats with six decimals, missing values
//! as empty fields, LF line endings.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::sweep::SweepRecord;

pub const HEADER: [&str; 9] = [
    "factor",
    "value",
    "param_count",
    "final_loss",
    "acc_total",
    "acc_small",
    "acc_medium",
    "acc_large",
    "ratio",
];

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fixed).unwrap_or_default()
}

pub fn write_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.factor != first.factor) {
            return Err(Error::invalid(
                "emit_csv",
                format!("mixed factors {} and {}", first.factor, other.factor),
            ));
        }
    }
    let mut sorted: Vec<&SweepRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(HEADER)?;
    for r in sorted {
        w.write_record([
            r.factor.to_string(),
            fixed(r.value),
            r.param_count.to_string(),
            fixed(r.final_loss),
            fixed(r.acc_total),
            opt(r.acc_small),
            opt(r.acc_medium),
            opt(r.acc_large),
            opt(r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
