use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::grid::{grid_run, with_pool, AxisSpec, GridOptions};
use super::result::{config_hash, Cell, PointFailure, ScenarioMeta, ScenarioResult};
use crate::dynamics::{
    run_protocol_with, LightPlacement, Protocol, RunOptions, StepControl, SweepSegment, TimeSeries,
    TIME_SERIES_HEADER,
};
use crate::error::{Error, Result};
use crate::model::{gap_estimates, matching_field, ClusterConfig, SiteRole};
use crate::transfer_matrix::{
    analytic_cycle_relaxed, analytic_cycle_unrelaxed, compose_cycle, iterate, lz_prob, tau_lz,
    BranchPopulations, CycleMatrix, LzChannel, LzParams, TmLight,
};

/// Default bystander axis: same polar angle as the proxy, opposite side.
pub const BYSTANDER_THETA: f64 = std::f64::consts::FRAC_PI_4;
pub const BYSTANDER_PHI: f64 = std::f64::consts::PI;

/// Field ramps and events shared by the dynamical scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Total swept range, centred on `center_mT`.
    #[serde(rename = "range_mT")]
    pub range: f64,
    /// Sweep centre; the matching field of the cluster when absent.
    #[serde(rename = "center_mT", default)]
    pub center: Option<f64>,
    #[serde(rename = "beta_up_mT_per_ms")]
    pub beta_up: f64,
    #[serde(rename = "beta_down_mT_per_ms")]
    pub beta_down: f64,
    pub n_cycles: usize,
    pub light: LightPlacement,
    pub dephasing: bool,
    pub t1: bool,
    #[serde(default = "default_t1_sites")]
    pub t1_sites: Vec<SiteRole>,
    pub epsilon0: f64,
    pub eta_nv: f64,
    /// `(B_m in mT, η_NV)` points, linearly interpolated; empty means
    /// `eta_nv` everywhere.
    #[serde(default)]
    pub eta_table: Vec<[f64; 2]>,
    #[serde(default)]
    pub samples_per_sweep: usize,
    /// Multiplies the default step length.
    #[serde(default = "one")]
    pub step_coarsening: f64,
    #[serde(default)]
    pub eigen_populations: bool,
    #[serde(default)]
    pub check_invariants: bool,
}

fn default_t1_sites() -> Vec<SiteRole> {
    vec![SiteRole::P1]
}

fn one() -> f64 {
    1.0
}

impl SweepSpec {
    /// Light at the low end, equal rates of 3 mT/ms over 0.5 mT, 20 cycles.
    pub fn ratchet() -> Self {
        Self {
            range: 0.5,
            center: None,
            beta_up: 3.0,
            beta_down: 3.0,
            n_cycles: 20,
            light: LightPlacement::LowEnd,
            dephasing: false,
            t1: false,
            t1_sites: default_t1_sites(),
            epsilon0: 2.0,
            eta_nv: 1.0,
            eta_table: Vec::new(),
            samples_per_sweep: 0,
            step_coarsening: 1.0,
            eigen_populations: false,
            check_invariants: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be finite and > 0")))
            }
        };
        pos("range_mT", self.range)?;
        pos("beta_up_mT_per_ms", self.beta_up)?;
        pos("beta_down_mT_per_ms", self.beta_down)?;
        pos("step_coarsening", self.step_coarsening)?;
        if let Some(c) = self.center {
            pos("center_mT", c)?;
        }
        if !(0.0..=1.0).contains(&self.eta_nv) {
            return Err(Error::param("eta_nv", "must be in [0, 1]"));
        }
        if self.eta_table.iter().any(|p| !(0.0..=1.0).contains(&p[1]) || !p[0].is_finite()) {
            return Err(Error::param("eta_table", "entries must be (finite field, eta in [0, 1])"));
        }
        Ok(())
    }

    pub fn eta_at(&self, b: f64) -> f64 {
        let t = &self.eta_table;
        if t.is_empty() {
            return self.eta_nv;
        }
        let mut pts = t.clone();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if b <= pts[0][0] {
            return pts[0][1];
        }
        for w in pts.windows(2) {
            if b <= w[1][0] {
                let f = (b - w[0][0]) / (w[1][0] - w[0][0]);
                return w[0][1] + f * (w[1][1] - w[0][1]);
            }
        }
        pts[pts.len() - 1][1]
    }

    fn protocol(&self, center: f64, beta_up: f64, beta_down: f64) -> Protocol {
        let (lo, hi) = (center - self.range / 2.0, center + self.range / 2.0);
        let mut p = Protocol::cycle(lo, hi, beta_up, beta_down, self.n_cycles)
            .with_light(self.light)
            .with_dephasing(self.dephasing)
            .with_t1(self.t1);
        self.stamp(&mut p);
        p
    }

    fn stamp(&self, p: &mut Protocol) {
        p.epsilon0 = self.epsilon0;
        p.eta_nv = self.eta_nv;
        p.t1_sites = self.t1_sites.clone();
    }

    fn options(&self, cfg: &ClusterConfig) -> Result<RunOptions> {
        Ok(RunOptions {
            control: Some(StepControl::for_cluster(cfg)?.coarsened(self.step_coarsening)),
            samples_per_sweep: self.samples_per_sweep,
            eigen_populations: self.eigen_populations,
            check_invariants: self.check_invariants,
        })
    }

    fn center_for(&self, cfg: &ClusterConfig) -> Result<f64> {
        match self.center {
            Some(c) => Ok(c),
            None => matching_field(cfg),
        }
    }
}

/// A variant of the base run used by comparison scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub t1: Option<bool>,
    #[serde(default)]
    pub dephasing: Option<bool>,
    #[serde(default)]
    pub light: Option<LightPlacement>,
    #[serde(default)]
    pub include_bystander: Option<bool>,
    #[serde(default)]
    pub t1_sites: Option<Vec<SiteRole>>,
}

impl Variant {
    fn named(label: &str) -> Self {
        Self {
            label: label.into(),
            t1: None,
            dephasing: None,
            light: None,
            include_bystander: None,
            t1_sites: None,
        }
    }

    fn apply(&self, cfg: &ClusterConfig, sw: &SweepSpec) -> (ClusterConfig, SweepSpec) {
        let mut cfg = cfg.clone();
        let mut sw = sw.clone();
        if let Some(v) = self.t1 {
            sw.t1 = v;
        }
        if let Some(v) = self.dephasing {
            sw.dephasing = v;
        }
        if let Some(v) = self.light {
            sw.light = v;
        }
        if let Some(v) = &self.t1_sites {
            sw.t1_sites = v.clone();
        }
        if self.include_bystander == Some(false) {
            cfg.include_bystander = false;
            cfg.couplings
                .retain(|c| c.a != SiteRole::Bystander && c.b != SiteRole::Bystander);
        }
        (cfg, sw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmMode {
    /// Composed from elementary matrices with every wide-gap probability ½.
    StrongDephasing,
    /// Closed forms for a strongly dephased up sweep and a fast down sweep.
    Analytic,
}

/// What a scenario computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioKind {
    /// Single sweeps with the NV prepared first; rates `beta_up`/`beta_down`.
    SingleSweeps { up: bool, down: bool },
    /// A protocol given field by field.
    Explicit { protocol: Protocol },
    /// Repeated cycles of the sweep spec.
    Buildup,
    Compare { variants: Vec<Variant> },
    /// Light every `l` cycles, with and without dephasing.
    CycleCoherence {
        l_values: Vec<u32>,
        dephasing_variants: Vec<bool>,
    },
    /// Single up sweeps at several rates.
    BetaScan { beta: AxisSpec },
    /// Final polarization over (β_up, β_down) at a fixed total time.
    BetaMap {
        beta_up: AxisSpec,
        beta_down: AxisSpec,
        #[serde(rename = "budget_ms")]
        budget: f64,
    },
    /// Final polarization over the two coupling strengths.
    CouplingMap { j_nv_p1: AxisSpec, j_h_p1: AxisSpec },
    MatchingCurve { theta_deg: AxisSpec },
    /// Final polarization over the field orientation.
    OrientationMap { theta_deg: AxisSpec, phi_deg: AxisSpec },
    /// Strong-dephasing cycle model with probabilities from the gaps.
    TmBuildup {
        #[serde(rename = "t2_ns")]
        t2: f64,
        t1_variants: Vec<bool>,
    },
    TmMap { p1: AxisSpec, mode: TmMode },
    /// Single sweep and multi-cycle runs with a bystander P1, against the
    /// bystander-free cluster.
    Bystander {
        #[serde(rename = "single_beta_mT_per_ms")]
        single_beta: f64,
    },
}

/// A registered, fully parameterized figure dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub figure: String,
    pub description: String,
    pub cluster: ClusterConfig,
    pub sweep: SweepSpec,
    pub kind: ScenarioKind,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.sweep.validate()?;
        for a in self.axes() {
            a.validate()?;
        }
        match &self.kind {
            ScenarioKind::BetaMap { budget, .. } if !(*budget > 0.0) => {
                Err(Error::param("budget_ms", "must be > 0"))
            }
            ScenarioKind::TmBuildup { t2, .. } if !(*t2 > 0.0) => Err(Error::param("t2_ns", "must be > 0")),
            ScenarioKind::CycleCoherence { l_values, .. } if l_values.contains(&0) => {
                Err(Error::param("l_values", "l must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn axes(&self) -> Vec<&AxisSpec> {
        match &self.kind {
            ScenarioKind::BetaScan { beta } => vec![beta],
            ScenarioKind::BetaMap {
                beta_up, beta_down, ..
            } => vec![beta_up, beta_down],
            ScenarioKind::CouplingMap { j_nv_p1, j_h_p1 } => vec![j_nv_p1, j_h_p1],
            ScenarioKind::MatchingCurve { theta_deg } => vec![theta_deg],
            ScenarioKind::OrientationMap { theta_deg, phi_deg } => vec![theta_deg, phi_deg],
            ScenarioKind::TmMap { p1, .. } => vec![p1],
            _ => Vec::new(),
        }
    }

    /// Sets the resolution of every swept axis.
    pub fn set_points(&mut self, n: usize) {
        let axes: Vec<&mut AxisSpec> = match &mut self.kind {
            ScenarioKind::BetaScan { beta } => vec![beta],
            ScenarioKind::BetaMap {
                beta_up, beta_down, ..
            } => vec![beta_up, beta_down],
            ScenarioKind::CouplingMap { j_nv_p1, j_h_p1 } => vec![j_nv_p1, j_h_p1],
            ScenarioKind::MatchingCurve { theta_deg } => vec![theta_deg],
            ScenarioKind::OrientationMap { theta_deg, phi_deg } => vec![theta_deg, phi_deg],
            ScenarioKind::TmMap { p1, .. } => vec![p1],
            _ => Vec::new(),
        };
        for a in axes {
            a.points = n;
        }
    }
}

/// Execution settings that do not change the data.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub workers: Option<usize>,
    /// Directory for grid checkpoints, keyed by scenario and config hash.
    pub checkpoint_dir: Option<PathBuf>,
}

fn base(name: &str, figure: &str, description: &str, cluster: ClusterConfig, sweep: SweepSpec, kind: ScenarioKind) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        figure: figure.into(),
        description: description.into(),
        cluster,
        sweep,
        kind,
    }
}

/// All registered scenarios at their default (desk-scale) resolution.
pub fn registry() -> Vec<ScenarioSpec> {
    let fig1 = ClusterConfig::three_spin(0.5, 0.2);
    let fig2 = ClusterConfig::three_spin(0.5, 0.1);
    let single = SweepSpec {
        beta_up: 0.26,
        beta_down: 0.26,
        n_cycles: 1,
        samples_per_sweep: 100,
        ..SweepSpec::ratchet()
    };
    let traced = SweepSpec {
        samples_per_sweep: 20,
        ..SweepSpec::ratchet()
    };
    let fig3 = SweepSpec {
        dephasing: true,
        ..SweepSpec::ratchet()
    };
    let beta_axes = || {
        (
            AxisSpec::log("beta_up_mT_per_ms", 1.0, 30.0, 20),
            AxisSpec::log("beta_down_mT_per_ms", 1.0, 30.0, 20),
        )
    };
    let beta_map = |name: &str, fig: &str, desc: &str, t1: bool, light: LightPlacement| {
        let (u, d) = beta_axes();
        base(
            name,
            fig,
            desc,
            fig2.clone(),
            SweepSpec {
                t1,
                light,
                ..fig3.clone()
            },
            ScenarioKind::BetaMap {
                beta_up: u,
                beta_down: d,
                budget: 10.0,
            },
        )
    };
    let hosts_protocol = {
        let segs = [(48.0, 50.0, 0.365), (50.0, 52.0, 0.259), (52.0, 54.0, 0.177)];
        Protocol {
            segments: segs.iter().map(|&(a, b, r)| SweepSegment::new(a, b, r)).collect(),
            light: LightPlacement::EveryLCycles(1),
            epsilon0: 2.0,
            eta_nv: 1.0,
            n_cycles: 1,
            t1_sites: default_t1_sites(),
        }
    };
    let fig4 = SweepSpec {
        n_cycles: 56,
        ..SweepSpec::ratchet()
    };
    vec![
        base(
            "fig1e",
            "1e",
            "Single low-to-high and high-to-low sweeps at 0.26 mT/ms",
            fig1.clone(),
            single.clone(),
            ScenarioKind::SingleSweeps { up: true, down: true },
        ),
        base(
            "fig1f-hosts",
            "1f, S1b",
            "Single sweep with both 14N hosts, three manifolds at 0.365/0.259/0.177 mT/ms",
            fig1.clone().with_hosts(true),
            SweepSpec {
                samples_per_sweep: 40,
                step_coarsening: 4.0,
                ..single.clone()
            },
            ScenarioKind::Explicit {
                protocol: hosts_protocol,
            },
        ),
        base(
            "fig2a",
            "2a",
            "Ratchet with light at the low-field end",
            fig2.clone(),
            traced.clone(),
            ScenarioKind::Buildup,
        ),
        base(
            "fig2b",
            "2b",
            "Ratchet with light at the high-field end",
            fig2.clone(),
            SweepSpec {
                light: LightPlacement::HighEnd,
                ..traced.clone()
            },
            ScenarioKind::Buildup,
        ),
        base(
            "fig2c",
            "2c",
            "Ratchet with light at both ends",
            fig2.clone(),
            SweepSpec {
                light: LightPlacement::BothEnds,
                ..traced.clone()
            },
            ScenarioKind::Buildup,
        ),
        base(
            "fig2e",
            "2e",
            "Long buildup of the low-end ratchet, no relaxation",
            fig2.clone(),
            SweepSpec {
                n_cycles: 100,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::Buildup,
        ),
        beta_map("fig3b", "3b", "beta_up x beta_down map, 10 ms budget, dephasing, no T1", false, LightPlacement::LowEnd),
        beta_map("fig3c", "3c", "beta_up x beta_down map with P1 T1 after each sweep, low-end light", true, LightPlacement::LowEnd),
        beta_map("fig3d", "3d", "As fig3c with high-end light", true, LightPlacement::HighEnd),
        beta_map("fig3e", "3e", "As fig3c with light at both ends", true, LightPlacement::BothEnds),
        base(
            "fig3f",
            "3f",
            "Strong-dephasing buildup from the cycle transfer matrix, T2 = 100 ns",
            fig2.clone(),
            SweepSpec {
                n_cycles: 100,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::TmBuildup {
                t2: 100.0,
                t1_variants: vec![false, true],
            },
        ),
        base(
            "fig4a",
            "4a",
            "Final polarization over NV-P1 and P1-1H couplings, 56 cycles",
            fig2.clone(),
            fig4.clone(),
            ScenarioKind::CouplingMap {
                j_nv_p1: AxisSpec::linear("J_NV_P1_MHz", 0.1, 1.0, 20),
                j_h_p1: AxisSpec::linear("J_H_P1_MHz", 0.05, 0.5, 20),
            },
        ),
        base(
            "fig4c",
            "4c",
            "Matching field versus field tilt",
            fig2.clone(),
            SweepSpec::ratchet(),
            ScenarioKind::MatchingCurve {
                theta_deg: AxisSpec::linear("theta_deg", 0.0, 40.0, 41),
            },
        ),
        base(
            "fig4d",
            "4d",
            "Final polarization over field orientation, beta 3.25/20 mT/ms, 56 cycles",
            fig2.clone(),
            SweepSpec {
                beta_up: 3.25,
                beta_down: 20.0,
                ..fig4.clone()
            },
            ScenarioKind::OrientationMap {
                theta_deg: AxisSpec::linear("theta_deg", 0.0, 40.0, 20),
                phi_deg: AxisSpec::linear("phi_deg", 0.0, 342.0, 20),
            },
        ),
        base(
            "figS1",
            "S1a",
            "Single low-to-high sweeps at several rates",
            fig1.clone(),
            SweepSpec {
                samples_per_sweep: 50,
                ..single.clone()
            },
            ScenarioKind::BetaScan {
                beta: AxisSpec::log("beta_mT_per_ms", 0.1, 1.0, 10),
            },
        ),
        base(
            "figS2",
            "S2",
            "Light every l cycles, coherent and dephased",
            fig2.clone(),
            SweepSpec {
                n_cycles: 60,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::CycleCoherence {
                l_values: vec![1, 2, 5, 10],
                dephasing_variants: vec![false, true],
            },
        ),
        base(
            "figS3",
            "S3",
            "Buildup at 6/10 mT/ms with dephasing, with and without P1 T1, eigenbasis populations",
            fig2.clone(),
            SweepSpec {
                beta_up: 6.0,
                beta_down: 10.0,
                dephasing: true,
                eigen_populations: true,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::Compare {
                variants: vec![
                    Variant {
                        t1: Some(false),
                        ..Variant::named("dephasing")
                    },
                    Variant {
                        t1: Some(true),
                        ..Variant::named("dephasing_t1")
                    },
                ],
            },
        ),
        base(
            "figS6",
            "S6",
            "Cycle transfer matrix, every wide-gap probability 1/2, versus p1",
            fig2.clone(),
            SweepSpec {
                n_cycles: 100,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::TmMap {
                p1: AxisSpec::linear("p1", 0.5, 1.0, 21),
                mode: TmMode::StrongDephasing,
            },
        ),
        base(
            "figS7",
            "S7",
            "Closed-form cycle matrices with and without T1, versus p1",
            fig2.clone(),
            SweepSpec {
                n_cycles: 100,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::TmMap {
                p1: AxisSpec::linear("p1", 0.5, 1.0, 21),
                mode: TmMode::Analytic,
            },
        ),
        base(
            "figS8",
            "S8",
            "Bystander P1 at 1 MHz: single sweep and 6/10 mT/ms cycles with and without relaxation",
            ClusterConfig::three_spin(0.3, 0.2).with_bystander(1.0, BYSTANDER_THETA, BYSTANDER_PHI),
            SweepSpec {
                beta_up: 6.0,
                beta_down: 10.0,
                dephasing: false,
                t1_sites: vec![SiteRole::P1, SiteRole::Bystander],
                samples_per_sweep: 0,
                ..SweepSpec::ratchet()
            },
            ScenarioKind::Bystander { single_beta: 0.25 },
        ),
    ]
}

pub fn scenario_names() -> Vec<String> {
    registry().into_iter().map(|s| s.name).collect()
}

pub fn scenario(name: &str) -> Result<ScenarioSpec> {
    registry()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownScenario {
            name: name.into(),
            known: scenario_names().join(", "),
        })
}

/// Applies `path=value` overrides to a spec. Paths use the serialized key
/// names joined by dots (`sweep.beta_up_mT_per_ms`, `cluster.couplings.0.j_MHz`);
/// values are parsed as JSON and fall back to plain strings.
pub fn apply_overrides(spec: &ScenarioSpec, overrides: &[(String, String)]) -> Result<ScenarioSpec> {
    let mut doc = serde_json::to_value(spec)?;
    for (path, raw) in overrides {
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut node = &mut doc;
        for key in path.split('.') {
            node = match node {
                Value::Object(m) => m.get_mut(key),
                Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::param(path.clone(), "no such key"))?;
        }
        *node = value;
    }
    let out: ScenarioSpec = serde_json::from_value(doc).map_err(|e| {
        let keys: Vec<&str> = overrides.iter().map(|o| o.0.as_str()).collect();
        Error::param(keys.join(", "), format!("invalid override: {e}"))
    })?;
    out.validate()?;
    Ok(out)
}

/// Runs a registered scenario with overrides.
pub fn run_scenario(name: &str, overrides: &[(String, String)], ctx: &RunContext) -> Result<ScenarioResult> {
    let spec = apply_overrides(&scenario(name)?, overrides)?;
    run_spec(&spec, ctx)
}

/// Runs the bystander scenario.
pub fn bystander_scenario(overrides: &[(String, String)], ctx: &RunContext) -> Result<ScenarioResult> {
    let spec = apply_overrides(&scenario("figS8")?, overrides)?;
    if !spec.cluster.include_bystander {
        return Err(Error::param("cluster.include_bystander", "must be true"));
    }
    run_spec(&spec, ctx)
}

struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
    derived: BTreeMap<String, Value>,
    failures: Vec<PointFailure>,
}

impl Table {
    fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            derived: BTreeMap::new(),
            failures: Vec::new(),
        }
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn ts_columns(prefix: &[&str], sw: &SweepSpec, dim: usize) -> Vec<String> {
    let mut c = cols(prefix);
    c.extend(cols(&TIME_SERIES_HEADER));
    if sw.eigen_populations {
        c.extend((0..dim).map(|k| format!("pop_{k}")));
    }
    c
}

fn ts_rows(prefix: &[Cell], ts: &TimeSeries) -> Vec<Vec<Cell>> {
    ts.records
        .iter()
        .map(|r| {
            let mut row = prefix.to_vec();
            row.extend([
                Cell::from(r.t_ms),
                r.b_mt.into(),
                r.pol_h.into(),
                r.pol_nv.into(),
                r.pol_p1.into(),
                r.cycle.into(),
                r.tag.as_str().into(),
            ]);
            row.extend(r.eigen_populations.iter().map(|p| Cell::from(*p)));
            row
        })
        .collect()
}

fn final_pol(ts: &TimeSeries) -> f64 {
    ts.last().map_or(0.0, |r| r.pol_h)
}

fn derive_gaps(t: &mut Table, cfg: &ClusterConfig, sw: &SweepSpec) -> Result<f64> {
    let g = gap_estimates(cfg)?;
    let center = sw.center_for(cfg)?;
    t.derived.insert("B_match_mT".into(), json!(g.b_match));
    t.derived.insert("center_mT".into(), json!(center));
    t.derived.insert("delta0_MHz".into(), json!(g.delta0));
    t.derived.insert("delta1_MHz".into(), json!(g.delta1));
    let tau = tau_lz(g.delta0, sw.beta_up, &cfg.constants)?;
    t.derived.insert("tau_LZ_up_us".into(), json!(tau * 1e3));
    Ok(center)
}

fn run_single_sweeps(spec: &ScenarioSpec, up: bool, down: bool, ctx: &RunContext) -> Result<Table> {
    let (cfg, sw) = (&spec.cluster, &spec.sweep);
    let mut t = Table::new(ts_columns(&["direction"], sw, cfg.layout().dim()));
    let center = derive_gaps(&mut t, cfg, sw)?;
    let (lo, hi) = (center - sw.range / 2.0, center + sw.range / 2.0);
    let mut runs = Vec::new();
    if up {
        runs.push(("up", Protocol::single_sweep(lo, hi, sw.beta_up)));
    }
    if down {
        runs.push(("down", Protocol::single_sweep(hi, lo, sw.beta_down)));
    }
    let opts = sw.options(cfg)?;
    let out: Vec<Result<Vec<Vec<Cell>>>> = with_pool(ctx.workers, || {
        runs.par_iter()
            .map(|(label, p)| {
                let mut p = p.clone();
                sw.stamp(&mut p);
                let (ts, _) = run_protocol_with(cfg, &p, &opts)?;
                Ok(ts_rows(&[Cell::from(*label)], &ts))
            })
            .collect()
    })?;
    for (r, (label, _)) in out.into_iter().zip(&runs) {
        let rows = r?;
        if let Some(last) = rows.last() {
            t.derived
                .insert(format!("final_pol_H_{label}"), json!(last[3].as_f64()));
        }
        t.rows.extend(rows);
    }
    Ok(t)
}

fn run_buildup(cfg: &ClusterConfig, sw: &SweepSpec, prefix: &[Cell]) -> Result<(TimeSeries, Vec<Vec<Cell>>)> {
    let center = sw.center_for(cfg)?;
    let p = sw.protocol(center, sw.beta_up, sw.beta_down);
    let (ts, _) = run_protocol_with(cfg, &p, &sw.options(cfg)?)?;
    let rows = ts_rows(prefix, &ts);
    Ok((ts, rows))
}

fn run_compare(spec: &ScenarioSpec, variants: &[Variant], ctx: &RunContext) -> Result<Table> {
    let mut t = Table::new(ts_columns(&["variant"], &spec.sweep, spec.cluster.layout().dim()));
    derive_gaps(&mut t, &spec.cluster, &spec.sweep)?;
    let out: Vec<Result<(TimeSeries, Vec<Vec<Cell>>)>> = with_pool(ctx.workers, || {
        variants
            .par_iter()
            .map(|v| {
                let (cfg, sw) = v.apply(&spec.cluster, &spec.sweep);
                run_buildup(&cfg, &sw, &[Cell::from(v.label.as_str())])
            })
            .collect()
    })?;
    for (r, v) in out.into_iter().zip(variants) {
        let (ts, rows) = r?;
        t.derived
            .insert(format!("final_pol_H_{}", v.label), json!(final_pol(&ts)));
        t.rows.extend(rows);
    }
    Ok(t)
}

fn run_cycle_coherence(spec: &ScenarioSpec, ls: &[u32], deph: &[bool], ctx: &RunContext) -> Result<Table> {
    let mut t = Table::new(cols(&["l", "dephasing", "cycle_index", "t_ms", "pol_H"]));
    derive_gaps(&mut t, &spec.cluster, &spec.sweep)?;
    let runs: Vec<(u32, bool)> = ls
        .iter()
        .flat_map(|&l| deph.iter().map(move |&d| (l, d)))
        .collect();
    let out: Vec<Result<Vec<Vec<Cell>>>> = with_pool(ctx.workers, || {
        runs.par_iter()
            .map(|&(l, d)| {
                let sw = SweepSpec {
                    light: LightPlacement::EveryLCycles(l),
                    dephasing: d,
                    ..spec.sweep.clone()
                };
                let center = sw.center_for(&spec.cluster)?;
                let p = sw.protocol(center, sw.beta_up, sw.beta_down);
                let tc = p.cycle_time_ms();
                let (ts, _) = run_protocol_with(&spec.cluster, &p, &sw.options(&spec.cluster)?)?;
                Ok(ts
                    .per_cycle_pol_h()
                    .into_iter()
                    .enumerate()
                    .map(|(c, pol)| {
                        vec![
                            Cell::from(l as usize),
                            d.into(),
                            c.into(),
                            ((c + 1) as f64 * tc).into(),
                            pol.into(),
                        ]
                    })
                    .collect())
            })
            .collect()
    })?;
    for r in out {
        t.rows.extend(r?);
    }
    Ok(t)
}

fn run_beta_scan(spec: &ScenarioSpec, beta: &AxisSpec, ctx: &RunContext) -> Result<Table> {
    let (cfg, sw) = (&spec.cluster, &spec.sweep);
    let mut t = Table::new(cols(&["beta_mT_per_ms", "t_ms", "B_mT", "pol_H", "event_tag"]));
    let center = derive_gaps(&mut t, cfg, sw)?;
    let opts = sw.options(cfg)?;
    let betas = beta.values()?;
    let out: Vec<Result<TimeSeries>> = with_pool(ctx.workers, || {
        betas
            .par_iter()
            .map(|&b| {
                let mut p = Protocol::single_sweep(center - sw.range / 2.0, center + sw.range / 2.0, b);
                sw.stamp(&mut p);
                run_protocol_with(cfg, &p, &opts).map(|r| r.0)
            })
            .collect()
    })?;
    for (r, b) in out.into_iter().zip(&betas) {
        match r {
            Ok(ts) => t.rows.extend(ts.records.iter().map(|r| {
                vec![
                    Cell::from(*b),
                    r.t_ms.into(),
                    r.b_mt.into(),
                    r.pol_h.into(),
                    r.tag.as_str().into(),
                ]
            })),
            Err(e) => t.failures.push(PointFailure {
                point: BTreeMap::from([(beta.name.clone(), *b)]),
                error: e.to_string(),
            }),
        }
    }
    Ok(t)
}

fn grid_table(
    spec: &ScenarioSpec,
    a: &AxisSpec,
    b: &AxisSpec,
    value_cols: &[&str],
    ctx: &RunContext,
    f: impl Fn(f64, f64) -> Result<Vec<f64>> + Sync,
) -> Result<Table> {
    let mut columns = vec![a.name.clone(), b.name.clone()];
    columns.extend(cols(value_cols));
    let mut t = Table::new(columns);
    let checkpoint = match &ctx.checkpoint_dir {
        Some(d) => Some(d.join(format!("{}-{}.jsonl", spec.name, &config_hash(spec)?[..16]))),
        None => None,
    };
    let opts = GridOptions {
        workers: ctx.workers,
        checkpoint,
    };
    for p in grid_run(a, b, &opts, f)? {
        match p.values {
            Ok(v) => {
                let mut row = vec![Cell::from(p.x), p.y.into()];
                row.extend(v.into_iter().map(Cell::from));
                t.rows.push(row);
            }
            Err(e) => t.failures.push(PointFailure {
                point: BTreeMap::from([(a.name.clone(), p.x), (b.name.clone(), p.y)]),
                error: e,
            }),
        }
    }
    Ok(t)
}

/// One point of a β map: `(T_c, cycles, final pol_H)`.
pub fn beta_map_point(spec: &ScenarioSpec, beta_up: f64, beta_down: f64, budget: f64) -> Result<[f64; 3]> {
    let (cfg, sw) = (&spec.cluster, &spec.sweep);
    let center = sw.center_for(cfg)?;
    let tc = sw.range / beta_up + sw.range / beta_down;
    let n = ((budget / tc).floor() as usize).max(1);
    let sw = SweepSpec {
        n_cycles: n,
        ..sw.clone()
    };
    let p = sw.protocol(center, beta_up, beta_down);
    let (ts, _) = run_protocol_with(cfg, &p, &sw.options(cfg)?)?;
    Ok([tc, n as f64, final_pol(&ts)])
}

/// One point of a coupling map: `(Δ0, Δ1, final pol_H)`.
pub fn coupling_map_point(spec: &ScenarioSpec, j_nv_p1: f64, j_h_p1: f64) -> Result<[f64; 3]> {
    let mut cfg = spec.cluster.clone();
    for (x, y, j) in [(SiteRole::Nv, SiteRole::P1, j_nv_p1), (SiteRole::Proton, SiteRole::P1, j_h_p1)] {
        cfg.coupling_mut(x, y)
            .ok_or_else(|| Error::param("couplings", format!("no {}-{} coupling", x.label(), y.label())))?
            .j = j;
    }
    let g = gap_estimates(&cfg)?;
    let (_, rows) = run_buildup(&cfg, &spec.sweep, &[])?;
    let pol = rows.last().and_then(|r| r[2].as_f64()).unwrap_or(0.0);
    Ok([g.delta0, g.delta1, pol])
}

/// One point of an orientation map: `(B_m, η_NV, final pol_H)`.
pub fn orientation_point(spec: &ScenarioSpec, theta_deg: f64, phi_deg: f64) -> Result<[f64; 3]> {
    let cfg = spec
        .cluster
        .clone()
        .with_field_angles(theta_deg.to_radians(), phi_deg.to_radians());
    let bm = matching_field(&cfg)?;
    let eta = spec.sweep.eta_at(bm);
    let sw = SweepSpec {
        eta_nv: eta,
        center: Some(spec.sweep.center.unwrap_or(bm)),
        ..spec.sweep.clone()
    };
    let (_, rows) = run_buildup(&cfg, &sw, &[])?;
    let pol = rows.last().and_then(|r| r[2].as_f64()).unwrap_or(0.0);
    Ok([bm, eta, pol])
}

fn run_matching_curve(spec: &ScenarioSpec, theta: &AxisSpec) -> Result<Table> {
    let mut t = Table::new(cols(&["theta_deg", "B_m_mT", "eta_nv"]));
    for th in theta.values()? {
        let cfg = spec
            .cluster
            .clone()
            .with_field_angles(th.to_radians(), spec.cluster.field_phi);
        match matching_field(&cfg) {
            Ok(b) => t.rows.push(vec![th.into(), b.into(), spec.sweep.eta_at(b).into()]),
            Err(e) => t.failures.push(PointFailure {
                point: BTreeMap::from([(theta.name.clone(), th)]),
                error: e.to_string(),
            }),
        }
    }
    Ok(t)
}

fn tm_rows(label: &str, extra: &[Cell], m: &CycleMatrix, n: usize, tc: Option<f64>) -> Vec<Vec<Cell>> {
    iterate(m, &BranchPopulations::after_light(), n)
        .into_iter()
        .map(|s| {
            let mut row = vec![Cell::from(label)];
            row.extend_from_slice(extra);
            row.push(s.cycle.into());
            if let Some(tc) = tc {
                row.push((s.cycle as f64 * tc).into());
            }
            row.push(s.pol_h.into());
            if tc.is_some() {
                row.extend(s.v.as_slice().iter().map(|x| Cell::from(*x)));
            }
            row
        })
        .collect()
}

fn t1_label(on: bool) -> &'static str {
    if on {
        "t1"
    } else {
        "no_t1"
    }
}

fn run_tm_buildup(spec: &ScenarioSpec, t2_ns: f64, variants: &[bool]) -> Result<Table> {
    let (cfg, sw) = (&spec.cluster, &spec.sweep);
    let mut t = Table::new(cols(&[
        "variant", "cycle_index", "t_ms", "pol_H", "v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8",
    ]));
    let g = gap_estimates(cfg)?;
    let c = &cfg.constants;
    let p1u = lz_prob(g.delta1, sw.beta_up, LzChannel::Delta1, c)?;
    let p1d = lz_prob(g.delta1, sw.beta_down, LzChannel::Delta1, c)?;
    let params = LzParams::strong_dephasing(p1u, p1d)?;
    let tau = tau_lz(g.delta0, sw.beta_up, c)?;
    let tc = sw.range / sw.beta_up + sw.range / sw.beta_down;
    let t2_ms = t2_ns * 1e-6;
    t.derived.insert("delta0_MHz".into(), json!(g.delta0));
    t.derived.insert("delta1_MHz".into(), json!(g.delta1));
    t.derived.insert("p1_up".into(), json!(p1u));
    t.derived.insert("p1_down".into(), json!(p1d));
    t.derived.insert("tau_LZ_us".into(), json!(tau * 1e3));
    t.derived.insert("T2_ns".into(), json!(t2_ns));
    t.derived.insert("half_cycle_ms".into(), json!(tc / 2.0));
    t.derived
        .insert("strong_dephasing_regime".into(), json!(t2_ms < tau && tau < tc / 2.0));
    for &on in variants {
        let m = compose_cycle(&params, on, TmLight::Start)?;
        t.rows.extend(tm_rows(t1_label(on), &[], &m, sw.n_cycles, Some(tc)));
    }
    Ok(t)
}

fn run_tm_map(spec: &ScenarioSpec, p1: &AxisSpec, mode: TmMode) -> Result<Table> {
    let mut t = Table::new(cols(&["variant", "p1", "cycle_index", "pol_H"]));
    for on in [true, false] {
        for p in p1.values()? {
            let m = match (mode, on) {
                (TmMode::StrongDephasing, _) => compose_cycle(&LzParams::strong_dephasing(p, p)?, on, TmLight::Start)?,
                (TmMode::Analytic, true) => analytic_cycle_relaxed(p)?,
                (TmMode::Analytic, false) => analytic_cycle_unrelaxed(p)?,
            };
            t.rows
                .extend(tm_rows(t1_label(on), &[Cell::from(p)], &m, spec.sweep.n_cycles, None));
        }
    }
    Ok(t)
}

fn run_bystander(spec: &ScenarioSpec, single_beta: f64, ctx: &RunContext) -> Result<Table> {
    let (cfg, sw) = (&spec.cluster, &spec.sweep);
    if !cfg.include_bystander {
        return Err(Error::param("cluster.include_bystander", "must be true"));
    }
    let mut t = Table::new(ts_columns(&["panel", "variant"], sw, cfg.layout().dim()));
    derive_gaps(&mut t, cfg, sw)?;
    let free = Variant {
        include_bystander: Some(false),
        ..Variant::named("")
    }
    .apply(cfg, sw)
    .0;
    // the sweep window follows the proxy pair
    let center = sw.center_for(&free)?;
    let fixed = SweepSpec {
        center: Some(center),
        ..sw.clone()
    };
    let jobs: Vec<(&str, &str, ClusterConfig, Option<bool>)> = vec![
        ("single", "bystander", cfg.clone(), None),
        ("single", "no_bystander", free.clone(), None),
        ("cycles", "bystander", cfg.clone(), Some(false)),
        ("cycles", "bystander_t1", cfg.clone(), Some(true)),
        ("cycles", "no_bystander_t1", free.clone(), Some(true)),
    ];
    let out: Vec<Result<(TimeSeries, Vec<Vec<Cell>>)>> = with_pool(ctx.workers, || {
        jobs.par_iter()
            .map(|(panel, label, c, t1)| {
                let prefix = [Cell::from(*panel), Cell::from(*label)];
                match t1 {
                    None => {
                        let mut p = Protocol::single_sweep(center - sw.range / 2.0, center + sw.range / 2.0, single_beta);
                        fixed.stamp(&mut p);
                        let (ts, _) = run_protocol_with(c, &p, &fixed.options(c)?)?;
                        let rows = ts_rows(&prefix, &ts);
                        Ok((ts, rows))
                    }
                    Some(on) => {
                        let s = SweepSpec { t1: *on, ..fixed.clone() };
                        run_buildup(c, &s, &prefix)
                    }
                }
            })
            .collect()
    })?;
    for (r, (panel, label, _, _)) in out.into_iter().zip(&jobs) {
        let (ts, rows) = r?;
        t.derived
            .insert(format!("final_pol_H_{panel}_{label}"), json!(final_pol(&ts)));
        t.rows.extend(rows);
    }
    Ok(t)
}

/// Runs a resolved spec.
pub fn run_spec(spec: &ScenarioSpec, ctx: &RunContext) -> Result<ScenarioResult> {
    spec.validate()?;
    let started = Instant::now();
    let table = match &spec.kind {
        ScenarioKind::SingleSweeps { up, down } => run_single_sweeps(spec, *up, *down, ctx)?,
        ScenarioKind::Explicit { protocol } => {
            let mut p = protocol.clone();
            spec.sweep.stamp(&mut p);
            p.light = protocol.light;
            let cfg = &spec.cluster;
            let mut t = Table::new(ts_columns(&[], &spec.sweep, cfg.layout().dim()));
            let (ts, _) = run_protocol_with(cfg, &p, &spec.sweep.options(cfg)?)?;
            t.derived.insert("final_pol_H".into(), json!(final_pol(&ts)));
            t.rows = ts_rows(&[], &ts);
            t
        }
        ScenarioKind::Buildup => {
            let mut t = Table::new(ts_columns(&[], &spec.sweep, spec.cluster.layout().dim()));
            derive_gaps(&mut t, &spec.cluster, &spec.sweep)?;
            let (ts, rows) = run_buildup(&spec.cluster, &spec.sweep, &[])?;
            t.derived.insert("final_pol_H".into(), json!(final_pol(&ts)));
            t.rows = rows;
            t
        }
        ScenarioKind::Compare { variants } => run_compare(spec, variants, ctx)?,
        ScenarioKind::CycleCoherence {
            l_values,
            dephasing_variants,
        } => run_cycle_coherence(spec, l_values, dephasing_variants, ctx)?,
        ScenarioKind::BetaScan { beta } => run_beta_scan(spec, beta, ctx)?,
        ScenarioKind::BetaMap {
            beta_up,
            beta_down,
            budget,
        } => grid_table(spec, beta_up, beta_down, &["T_c_ms", "n_cycles", "pol_H"], ctx, |u, d| {
            beta_map_point(spec, u, d, *budget).map(|v| v.to_vec())
        })?,
        ScenarioKind::CouplingMap { j_nv_p1, j_h_p1 } => {
            grid_table(spec, j_nv_p1, j_h_p1, &["delta0_MHz", "delta1_MHz", "pol_H"], ctx, |a, b| {
                coupling_map_point(spec, a, b).map(|v| v.to_vec())
            })?
        }
        ScenarioKind::MatchingCurve { theta_deg } => run_matching_curve(spec, theta_deg)?,
        ScenarioKind::OrientationMap { theta_deg, phi_deg } => {
            grid_table(spec, theta_deg, phi_deg, &["B_m_mT", "eta_nv", "pol_H"], ctx, |a, b| {
                orientation_point(spec, a, b).map(|v| v.to_vec())
            })?
        }
        ScenarioKind::TmBuildup { t2, t1_variants } => run_tm_buildup(spec, *t2, t1_variants)?,
        ScenarioKind::TmMap { p1, mode } => run_tm_map(spec, p1, *mode)?,
        ScenarioKind::Bystander { single_beta } => run_bystander(spec, *single_beta, ctx)?,
    };
    let meta = ScenarioMeta {
        scenario: spec.name.clone(),
        figure: spec.figure.clone(),
        description: spec.description.clone(),
        config_hash: config_hash(spec)?,
        timestamp: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        generator: format!("ratchet-core {}", env!("CARGO_PKG_VERSION")),
        columns: table.columns,
        rows: table.rows.len(),
        elapsed_s: started.elapsed().as_secs_f64(),
        derived: table.derived,
        failures: table.failures,
        spec: spec.clone(),
    };
    Ok(ScenarioResult {
        meta,
        rows: table.rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_required_names() {
        let names = scenario_names();
        for n in [
            "fig1e", "fig1f-hosts", "fig2a", "fig2b", "fig2c", "fig2e", "fig3b", "fig3c", "fig3d", "fig3e",
            "fig3f", "fig4a", "fig4c", "fig4d", "figS1", "figS2", "figS6", "figS7", "figS8",
        ] {
            assert!(names.iter().any(|x| x == n), "{n} missing");
        }
        for s in registry() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn specs_round_trip_through_json() {
        for s in registry() {
            let text = serde_json::to_string(&s).unwrap();
            let back: ScenarioSpec = serde_json::from_str(&text).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn overrides_set_nested_keys() {
        let s = scenario("fig2a").unwrap();
        let o = apply_overrides(
            &s,
            &[
                ("sweep.beta_up_mT_per_ms".into(), "6".into()),
                ("cluster.couplings.0.j_MHz".into(), "0.4".into()),
                ("sweep.light".into(), r#"{"kind":"high_end"}"#.into()),
            ],
        )
        .unwrap();
        assert_eq!(o.sweep.beta_up, 6.0);
        assert_eq!(o.cluster.couplings[0].j, 0.4);
        assert_eq!(o.sweep.light, LightPlacement::HighEnd);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let s = scenario("fig2a").unwrap();
        assert!(apply_overrides(&s, &[("sweep.nope".into(), "1".into())]).is_err());
        assert!(apply_overrides(&s, &[("sweep.beta_up_mT_per_ms".into(), "-3".into())]).is_err());
        assert!(apply_overrides(&s, &[("sweep.n_cycles".into(), "many".into())]).is_err());
        assert!(matches!(scenario("fig9z"), Err(Error::UnknownScenario { .. })));
    }

    #[test]
    fn eta_table_interpolates() {
        let mut sw = SweepSpec::ratchet();
        assert_eq!(sw.eta_at(60.0), 1.0);
        sw.eta_table = vec![[50.0, 1.0], [90.0, 0.6]];
        assert!((sw.eta_at(70.0) - 0.8).abs() < 1e-12);
        assert_eq!(sw.eta_at(40.0), 1.0);
        assert_eq!(sw.eta_at(95.0), 0.6);
    }

    #[test]
    fn set_points_touches_all_axes() {
        let mut s = scenario("fig4a").unwrap();
        s.set_points(3);
        assert!(s.axes().iter().all(|a| a.points == 3));
    }
}
