use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scenarios::ScenarioSpec;
use crate::error::{Error, Result};

/// One CSV field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            Cell::Text(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // shortest representation that round-trips
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
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
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(i64::from(v))
    }
}

/// A grid point or run that failed without stopping the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub point: BTreeMap<String, f64>,
    pub error: String,
}

/// Sidecar metadata written next to `data.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub scenario: String,
    pub figure: String,
    pub description: String,
    /// SHA-256 of the resolved spec serialized as JSON.
    pub config_hash: String,
    pub timestamp: String,
    pub generator: String,
    pub columns: Vec<String>,
    pub rows: usize,
    pub elapsed_s: f64,
    /// Derived quantities (matching field, gaps, regime flags).
    pub derived: BTreeMap<String, serde_json::Value>,
    pub failures: Vec<PointFailure>,
    /// The fully resolved spec; feeding it back reproduces `data.csv`.
    pub spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub meta: ScenarioMeta,
    pub rows: Vec<Vec<Cell>>,
}

pub fn config_hash(spec: &ScenarioSpec) -> Result<String> {
    let text = serde_json::to_string(spec)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ScenarioResult {
    pub fn columns(&self) -> &[String] {
        &self.meta.columns
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.meta
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::param("column", format!("no column `{name}`")))
    }

    /// Numeric column; text cells become NaN.
    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.column_index(name)?;
        Ok(self
            .rows
            .iter()
            .map(|r| r[k].as_f64().unwrap_or(f64::NAN))
            .collect())
    }

    /// Rows whose text column `name` equals `value`.
    pub fn filter(&self, name: &str, value: &str) -> Result<Vec<&Vec<Cell>>> {
        let k = self.column_index(name)?;
        Ok(self
            .rows
            .iter()
            .filter(|r| r[k].to_string() == value)
            .collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.meta.columns)?;
        for r in &self.rows {
            wr.write_record(r.iter().map(|c| c.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Invariant(e.to_string()))
    }

    /// Writes `<root>/<scenario>/<timestamp>/{data.csv, meta.json}`.
    pub fn write_to(&self, root: &Path) -> Result<PathBuf> {
        let stamp = self.meta.timestamp.replace([':', '-'], "");
        let mut dir = root.join(&self.meta.scenario).join(&stamp);
        let mut k = 1;
        while dir.exists() {
            dir = root.join(&self.meta.scenario).join(format!("{stamp}-{k}"));
            k += 1;
        }
        std::fs::create_dir_all(&dir)?;
        self.write_csv(std::fs::File::create(dir.join("data.csv"))?)?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join("meta.json"), meta + "\n")?;
        Ok(dir)
    }
}

/// Reads a `meta.json` written by [`ScenarioResult::write_to`].
pub fn read_meta(path: &Path) -> Result<ScenarioMeta> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
