use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisScale {
    #[default]
    Linear,
    Log,
}

/// One swept parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub points: usize,
    #[serde(default)]
    pub scale: AxisScale,
}

impl AxisSpec {
    pub fn linear(name: &str, min: f64, max: f64, points: usize) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            points,
            scale: AxisScale::Linear,
        }
    }

    pub fn log(name: &str, min: f64, max: f64, points: usize) -> Self {
        Self {
            scale: AxisScale::Log,
            ..Self::linear(name, min, max, points)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::param(format!("axis {}", self.name), r.to_string()));
        if !self.min.is_finite() || !self.max.is_finite() {
            return bad("bounds must be finite");
        }
        if self.points < 2 {
            return bad("needs at least 2 points");
        }
        if self.scale == AxisScale::Log && (self.min <= 0.0 || self.max <= 0.0) {
            return bad("log axis needs positive bounds");
        }
        Ok(())
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.points - 1;
        Ok((0..=n)
            .map(|k| {
                let f = k as f64 / n as f64;
                match self.scale {
                    AxisScale::Linear => self.min + f * (self.max - self.min),
                    AxisScale::Log => (self.min.ln() + f * (self.max.ln() - self.min.ln())).exp(),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// JSON-lines file of finished points, appended as they complete.
    pub checkpoint: Option<PathBuf>,
}

/// Result of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub values: std::result::Result<Vec<f64>, String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLine {
    i: usize,
    j: usize,
    x: f64,
    y: f64,
    values: Vec<f64>,
}

fn load_checkpoint(path: &PathBuf) -> Result<HashMap<(usize, usize), CheckpointLine>> {
    let mut done = HashMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(e.into()),
    };
    for line in BufReader::new(f).lines() {
        let line = line?;
        // a torn last line from an interrupted run is skipped
        if let Ok(c) = serde_json::from_str::<CheckpointLine>(&line) {
            done.insert((c.i, c.j), c);
        }
    }
    Ok(done)
}

/// Runs `f` in parallel over a worker pool sized by `workers`.
pub fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::param("workers", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Evaluates `f` on every `(x, y)` of the two axes.
///
/// Output is sorted by `(i, j)` and does not depend on the worker count.
/// Failed points are reported in place and do not stop the run. With a
/// checkpoint file, finished points are skipped on the next call.
pub fn grid_run<F>(a: &AxisSpec, b: &AxisSpec, opts: &GridOptions, f: F) -> Result<Vec<GridPoint>>
where
    F: Fn(f64, f64) -> Result<Vec<f64>> + Sync,
{
    let xs = a.values()?;
    let ys = b.values()?;
    let done = match &opts.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => HashMap::new(),
    };
    let sink = match &opts.checkpoint {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?))
        }
        None => None,
    };
    let tasks: Vec<(usize, usize)> = (0..xs.len())
        .flat_map(|i| (0..ys.len()).map(move |j| (i, j)))
        .collect();
    let run = || -> Vec<GridPoint> {
        tasks
            .par_iter()
            .map(|&(i, j)| {
                let (x, y) = (xs[i], ys[j]);
                if let Some(c) = done.get(&(i, j)) {
                    if c.x == x && c.y == y {
                        return GridPoint {
                            i,
                            j,
                            x,
                            y,
                            values: Ok(c.values.clone()),
                        };
                    }
                }
                let values = f(x, y).map_err(|e| e.to_string());
                if let (Some(sink), Ok(v)) = (&sink, &values) {
                    let line = CheckpointLine {
                        i,
                        j,
                        x,
                        y,
                        values: v.clone(),
                    };
                    if let Ok(text) = serde_json::to_string(&line) {
                        let mut fh = sink.lock().unwrap_or_else(|p| p.into_inner());
                        let _ = writeln!(fh, "{text}");
                    }
                }
                GridPoint { i, j, x, y, values }
            })
            .collect()
    };
    let mut out = with_pool(opts.workers, run)?;
    out.sort_by_key(|p| (p.i, p.j));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values() {
        let a = AxisSpec::linear("x", 0.0, 1.0, 3);
        assert_eq!(a.values().unwrap(), vec![0.0, 0.5, 1.0]);
        let l = AxisSpec::log("b", 1.0, 100.0, 3).values().unwrap();
        assert!((l[1] - 10.0).abs() < 1e-12 && (l[2] - 100.0).abs() < 1e-12);
        assert!(AxisSpec::linear("x", 0.0, 1.0, 1).validate().is_err());
        assert!(AxisSpec::log("x", 0.0, 1.0, 4).validate().is_err());
        assert!(AxisSpec::linear("x", f64::NAN, 1.0, 4).validate().is_err());
    }

    #[test]
    fn failures_are_per_point() {
        let a = AxisSpec::linear("x", 0.0, 1.0, 2);
        let pts = grid_run(&a, &a, &GridOptions::default(), |x, y| {
            if x > 0.5 && y > 0.5 {
                Err(Error::param("x", "boom"))
            } else {
                Ok(vec![x + y])
            }
        })
        .unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts[3].values.is_err());
        assert_eq!(pts[1].values, Ok(vec![1.0]));
    }
}
