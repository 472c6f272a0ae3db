//! JSONL persistence for supervised-finetuning samples: one record per
//! line, UTF-8, schema-checked on read with line-accurate errors.

use crate::sample::SftSample;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SftIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
}

/// Writes one JSON object per line.
pub fn write_sft(path: &Path, samples: &[SftSample]) -> Result<(), SftIoError> {
    let mut out = BufWriter::new(File::create(path)?);
    for sample in samples {
        let json = serde_json::to_string(sample)
            .map_err(|e| SftIoError::Schema { line: 0, detail: e.to_string() })?;
        writeln!(out, "{json}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates a JSONL dataset; blank lines are not allowed.
pub fn read_sft(path: &Path) -> Result<Vec<SftSample>, SftIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let number = idx + 1;
        let sample: SftSample = serde_json::from_str(&line)
            .map_err(|e| SftIoError::Schema { line: number, detail: e.to_string() })?;
        sample
            .validate()
            .map_err(|e| SftIoError::Schema { line: number, detail: e.to_string() })?;
        samples.push(sample);
    }
    Ok(samples)
}
