//! Per-epoch metrics as CSV, written one flushed row at a time.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use semix::training::MetricsRecord;
use semix::{Error, Result};

pub const HEADER: &str = "epoch,split,loss_total,loss_label,loss_sem,accuracy";

pub fn format_row(r: &MetricsRecord) -> String {
    format!("{},{},{},{},{},{}", r.epoch, r.split, r.loss_total, r.loss_label, r.loss_sem, r.accuracy)
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", format_row(record))?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn parse(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(Error::Format { offset: 0, message: format!("expected header `{HEADER}`") }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(no, line)| {
            let bad = || Error::Validation(format!("metrics line {}: `{line}`", no + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                loss_total: num(f[2])?,
                loss_label: num(f[3])?,
                loss_sem: num(f[4])?,
                accuracy: num(f[5])?,
            })
        })
        .collect()
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    parse(&std::fs::read_to_string(path)?)
}
