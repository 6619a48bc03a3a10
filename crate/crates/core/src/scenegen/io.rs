use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DifficultyProfile, SceneError, SceneRecord};

/// Schema tag written on the first line of every dataset file.
pub const SCHEMA: &str = "hoiu.scenes/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub dataset_seed: u64,
    pub profile: DifficultyProfile,
    pub count: usize,
}

/// Writes one header line followed by one record per line.
pub fn write_jsonl(
    path: &Path,
    dataset_seed: u64,
    profile: &DifficultyProfile,
    records: &[SceneRecord],
) -> Result<(), SceneError> {
    let io = |e: std::io::Error| SceneError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = DatasetHeader {
        schema: SCHEMA.to_string(),
        dataset_seed,
        profile: profile.clone(),
        count: records.len(),
    };
    writeln!(w, "{}", line(&header)).map_err(io)?;
    for r in records {
        writeln!(w, "{}", line(r)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<(DatasetHeader, Vec<SceneRecord>), SceneError> {
    let io = |e: std::io::Error| SceneError::Io(format!("{}: {e}", path.display()));
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| SceneError::Format("empty dataset file".into()))?
        .map_err(io)?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| SceneError::Format(format!("header: {e}")))?;
    if header.schema != SCHEMA {
        return Err(SceneError::Format(format!("unsupported schema {}", header.schema)));
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| SceneError::Format(format!("line {}: {e}", i + 2)))?;
        r.validate()?;
        records.push(r);
    }
    if records.len() != header.count {
        return Err(SceneError::Format(format!(
            "header announces {} records, found {}",
            header.count,
            records.len()
        )));
    }
    Ok((header, records))
}

fn line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data always serializes")
}
