//! Run configuration files.
//!
//! A TOML file with a `[cluster]` table, an optional `[sweep]` table and an
//! optional explicit `[protocol]`. Every physical key carries its unit
//! (`beta_up_mT_per_ms`, `j_MHz`); unknown keys are rejected, so a bare
//! `beta_up` fails instead of being ignored. A `meta.json` written by a
//! previous run is accepted as well and reproduces that run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use ratchet_core::dynamics::Protocol;
use ratchet_core::experiments::{read_meta, ScenarioKind, ScenarioSpec, SweepSpec};
use ratchet_core::model::ClusterConfig;

/// A problem with the user's input rather than with the physics.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: Option<String>,
    pub cluster: ClusterConfig,
    #[serde(default = "SweepSpec::ratchet")]
    pub sweep: SweepSpec,
    /// Replaces the generated up/down cycle.
    pub protocol: Option<Protocol>,
    pub diagram: Option<DiagramRange>,
    /// Output root; the command line and the environment take precedence.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagramRange {
    #[serde(rename = "B_start_mT")]
    pub b_start: f64,
    #[serde(rename = "B_end_mT")]
    pub b_end: f64,
    pub points: usize,
}

pub struct Loaded {
    pub spec: ScenarioSpec,
    pub diagram: Option<DiagramRange>,
    pub output_dir: Option<PathBuf>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let meta = read_meta(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        return Ok(Loaded {
            spec: meta.spec,
            diagram: None,
            output_dir: None,
        });
    }
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let name = cfg.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "simulate".into())
    });
    let mut sweep = cfg.sweep;
    let kind = match cfg.protocol {
        Some(protocol) => {
            // the run stamps pulse settings from the sweep table
            sweep.epsilon0 = protocol.epsilon0;
            sweep.eta_nv = protocol.eta_nv;
            sweep.t1_sites = protocol.t1_sites.clone();
            ScenarioKind::Explicit { protocol }
        }
        None => ScenarioKind::Buildup,
    };
    let spec = ScenarioSpec {
        name,
        figure: "custom".into(),
        description: format!("simulation from {}", path.display()),
        cluster: cfg.cluster,
        sweep,
        kind,
    };
    spec.validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(Loaded {
        spec,
        diagram: cfg.diagram,
        output_dir: cfg.output_dir,
    })
}

/// Splits `key=value` pairs from the command line.
pub fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| ConfigError(format!("override `{s}` is not key=value")).into())
        })
        .collect()
}

/// One line per physical parameter, with units.
pub fn describe(spec: &ScenarioSpec) -> Vec<String> {
    let c = &spec.cluster;
    let mut out = vec![format!(
        "constants: D {} MHz, gamma_e {} MHz/mT, gamma_H {} MHz/mT",
        c.constants.d, c.constants.gamma_e, c.constants.gamma_h
    )];
    for k in &c.couplings {
        out.push(format!(
            "coupling {}-{}: {} MHz at theta {:.4} rad, phi {:.4} rad",
            k.a.label(),
            k.b.label(),
            k.j,
            k.theta,
            k.phi
        ));
    }
    out.push(format!(
        "field direction: theta {:.4} rad, phi {:.4} rad; hosts {}, bystander {}",
        c.field_theta, c.field_phi, c.include_hosts, c.include_bystander
    ));
    let s = &spec.sweep;
    match &spec.kind {
        ScenarioKind::Explicit { protocol } => out.push(format!(
            "protocol: {} segments, {} cycles, cycle time {:.4} ms",
            protocol.segments.len(),
            protocol.n_cycles,
            protocol.cycle_time_ms()
        )),
        _ => out.push(format!(
            "sweep: range {} mT, beta up {} mT/ms, beta down {} mT/ms, {} cycles, light {:?}, dephasing {}, T1 {}",
            s.range, s.beta_up, s.beta_down, s.n_cycles, s.light, s.dephasing, s.t1
        )),
    }
    out
}
