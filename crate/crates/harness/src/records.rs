//! Run records and their CSV and JSON file formats.

use crate::error::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One logged point of a training run. A diverged run ends with a record
/// whose `train_loss` is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub width: usize,
    pub depth: usize,
    pub mass: f64,
    pub lr: f64,
    pub step: u64,
    #[serde(with = "loss_repr")]
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        !self.train_loss.is_finite()
    }
}

mod loss_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

pub const CSV_HEADER: &str = "run_id,width,depth,mass,lr,step,train_loss,test_loss,wall_seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Json,
}

impl RecordFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(RecordFormat::Csv),
            "json" => Ok(RecordFormat::Json),
            other => Err(HarnessError::Config(format!(
                "unknown record format {other:?}, expected csv or json"
            ))),
        }
    }

    /// Format implied by a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => RecordFormat::Json,
            _ => RecordFormat::Csv,
        }
    }
}

/// Path of the config echo written next to a JSON record file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

fn to_csv(records: &[RunRecord], echo: &[(String, String)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (k, v) in echo {
        writeln!(out, "# {k} = {v}").expect("write to memory");
    }
    writeln!(out, "{CSV_HEADER}").expect("write to memory");
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for r in records {
        w.serialize(r)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
    }
    w.into_inner()
        .map_err(|e| HarnessError::Data(e.to_string()))
}

/// Writes records as CSV with the config echo as leading `#` comment lines,
/// or as a JSON array with the echo in a sidecar file.
pub fn write_records(
    records: &[RunRecord],
    path: &Path,
    format: RecordFormat,
    echo: &[(String, String)],
) -> Result<()> {
    let io = |e| HarnessError::io(path, e);
    match format {
        RecordFormat::Csv => std::fs::write(path, to_csv(records, echo)?).map_err(io),
        RecordFormat::Json => {
            let body = serde_json::to_vec_pretty(records)
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            std::fs::write(path, body).map_err(io)?;
            let sidecar = sidecar_path(path);
            let map: serde_json::Map<String, serde_json::Value> = echo
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect();
            let text =
                serde_json::to_vec_pretty(&map).map_err(|e| HarnessError::Data(e.to_string()))?;
            std::fs::write(&sidecar, text).map_err(|e| HarnessError::io(&sidecar, e))
        }
    }
}

/// Reads a record file written by [`write_records`].
pub fn read_records(path: &Path, format: RecordFormat) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |message: String| HarnessError::Format {
        path: path.into(),
        message,
    };
    match format {
        RecordFormat::Csv => {
            let mut r = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .from_reader(text.as_bytes());
            let header = r
                .headers()
                .map_err(|e| bad(e.to_string()))?
                .iter()
                .collect::<Vec<_>>()
                .join(",");
            if header != CSV_HEADER {
                return Err(bad(format!("unexpected header {header:?}")));
            }
            r.deserialize()
                .map(|row| row.map_err(|e| bad(e.to_string())))
                .collect()
        }
        RecordFormat::Json => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
    }
}

/// Reads the config echo from a CSV record file's comment lines.
pub fn read_csv_echo(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
