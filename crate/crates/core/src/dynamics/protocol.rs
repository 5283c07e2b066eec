use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::channels::{apply_dephasing, apply_spin_flip_relaxation, optical_repolarize};
use super::propagate::{SegmentPropagator, StepControl, SweepSegment};
use super::DensityMatrix;
use crate::error::{Error, Result};
use crate::model::{ClusterConfig, ClusterHamiltonian, SiteRole};
use crate::spin::CMatrix;

/// When the NV is optically repolarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "l")]
pub enum LightPlacement {
    /// Before every upward sweep.
    LowEnd,
    /// Before every downward sweep.
    HighEnd,
    /// Before every sweep.
    BothEnds,
    /// Before the first sweep of every `l`-th cycle, starting with cycle 0.
    EveryLCycles(u32),
    None,
}

/// Schedule of sweeps and events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    /// Segments of one cycle, in order.
    pub segments: Vec<SweepSegment>,
    pub light: LightPlacement,
    /// Pulse parameter ε0; the applied value is `epsilon0 · eta_nv`.
    #[serde(default = "default_epsilon")]
    pub epsilon0: f64,
    #[serde(default = "default_eta")]
    pub eta_nv: f64,
    pub n_cycles: usize,
    /// Electron spins reset by every relaxation event.
    #[serde(default = "default_t1_sites")]
    pub t1_sites: Vec<SiteRole>,
}

fn default_epsilon() -> f64 {
    2.0
}

fn default_eta() -> f64 {
    1.0
}

fn default_t1_sites() -> Vec<SiteRole> {
    vec![SiteRole::P1]
}

impl Protocol {
    /// Symmetric up/down cycle over `[b_lo, b_hi]`.
    pub fn cycle(b_lo: f64, b_hi: f64, beta_up: f64, beta_down: f64, n_cycles: usize) -> Self {
        Self {
            segments: vec![
                SweepSegment::new(b_lo, b_hi, beta_up),
                SweepSegment::new(b_hi, b_lo, beta_down),
            ],
            light: LightPlacement::LowEnd,
            epsilon0: 2.0,
            eta_nv: 1.0,
            n_cycles,
            t1_sites: default_t1_sites(),
        }
    }

    /// One sweep with the NV prepared just before it.
    pub fn single_sweep(b_start: f64, b_end: f64, beta: f64) -> Self {
        let seg = SweepSegment::new(b_start, b_end, beta);
        let light = if seg.is_up() {
            LightPlacement::LowEnd
        } else {
            LightPlacement::HighEnd
        };
        Self {
            segments: vec![seg],
            light,
            epsilon0: 2.0,
            eta_nv: 1.0,
            n_cycles: 1,
            t1_sites: default_t1_sites(),
        }
    }

    pub fn with_light(mut self, light: LightPlacement) -> Self {
        self.light = light;
        self
    }

    pub fn with_dephasing(mut self, on: bool) -> Self {
        for s in &mut self.segments {
            s.dephase_at_end = on;
        }
        self
    }

    pub fn with_t1(mut self, on: bool) -> Self {
        for s in &mut self.segments {
            s.t1_at_end = on;
        }
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon0 * self.eta_nv
    }

    pub fn cycle_time_ms(&self) -> f64 {
        self.segments.iter().map(SweepSegment::duration_ms).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            s.validate()?;
        }
        if !(0.0..=1.0).contains(&self.eta_nv) {
            return Err(Error::param("eta_nv", format!("{} is outside [0, 1]", self.eta_nv)));
        }
        let eps = self.epsilon();
        if !(0.0..=2.0).contains(&eps) {
            return Err(Error::param("epsilon0", format!("epsilon {eps} is outside [0, 2]")));
        }
        if let LightPlacement::EveryLCycles(0) = self.light {
            return Err(Error::param("light", "l must be >= 1"));
        }
        Ok(())
    }

    fn light_before(&self, cycle: usize, seg: usize) -> bool {
        let up = self.segments[seg].is_up();
        match self.light {
            LightPlacement::LowEnd => up,
            LightPlacement::HighEnd => !up,
            LightPlacement::BothEnds => true,
            LightPlacement::EveryLCycles(l) => seg == 0 && cycle % l as usize == 0,
            LightPlacement::None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventTag {
    Light,
    SweepUp,
    SweepDown,
    Dephase,
    T1,
    Sample,
}

impl EventTag {
    pub fn as_str(self) -> &'static str {
        match self {
            EventTag::Light => "light",
            EventTag::SweepUp => "sweep_up",
            EventTag::SweepDown => "sweep_down",
            EventTag::Dephase => "dephase",
            EventTag::T1 => "t1",
            EventTag::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t_ms: f64,
    pub b_mt: f64,
    pub pol_h: f64,
    pub pol_nv: f64,
    pub pol_p1: f64,
    pub cycle: usize,
    pub tag: EventTag,
    /// Diagonal of ρ in the eigenbasis of `H(b_mt)`, ascending energies.
    /// Filled only when [`RunOptions::eigen_populations`] is set.
    pub eigen_populations: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub records: Vec<Record>,
}

pub const TIME_SERIES_HEADER: [&str; 7] = [
    "t_ms",
    "B_mT",
    "pol_H",
    "pol_NV",
    "pol_P1",
    "cycle_index",
    "event_tag",
];

impl TimeSeries {
    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    /// Proton polarization after the last event of every cycle.
    pub fn per_cycle_pol_h(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let mut current = None;
        for r in &self.records {
            if current != Some(r.cycle) {
                current = Some(r.cycle);
                out.push(r.pol_h);
            } else if let Some(v) = out.last_mut() {
                *v = r.pol_h;
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(TIME_SERIES_HEADER)?;
        for r in &self.records {
            wr.write_record([
                fmt(r.t_ms),
                fmt(r.b_mt),
                fmt(r.pol_h),
                fmt(r.pol_nv),
                fmt(r.pol_p1),
                r.cycle.to_string(),
                r.tag.as_str().to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub(crate) fn fmt(x: f64) -> String {
    format!("{x:.12e}")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the step rule derived from the cluster's gap estimates.
    pub control: Option<StepControl>,
    /// Intra-sweep sample points per segment (0 for none).
    pub samples_per_sweep: usize,
    pub eigen_populations: bool,
    /// Validate the density matrix after every operation.
    pub check_invariants: bool,
}

struct Prepared {
    prop: SegmentPropagator,
    dephase: Option<CMatrix>,
    /// Piece indices after which a mid-segment relaxation fires.
    t1_after: Vec<usize>,
    /// Piece indices after which a sample is recorded.
    sample_after: Vec<usize>,
}

/// Runs a protocol from the maximally mixed state.
pub fn run_protocol(cfg: &ClusterConfig, proto: &Protocol) -> Result<TimeSeries> {
    run_protocol_with(cfg, proto, &RunOptions::default()).map(|(ts, _)| ts)
}

/// Runs a protocol and also returns the final state.
pub fn run_protocol_with(
    cfg: &ClusterConfig,
    proto: &Protocol,
    opts: &RunOptions,
) -> Result<(TimeSeries, DensityMatrix)> {
    proto.validate()?;
    let ham = ClusterHamiltonian::new(cfg)?;
    let layout = ham.layout.clone();
    let mut rho = DensityMatrix::maximally_mixed(&layout);
    let mut ts = TimeSeries::default();
    if proto.segments.is_empty() || proto.n_cycles == 0 {
        return Ok((ts, rho));
    }
    let control = match opts.control {
        Some(c) => c,
        None => StepControl::for_cluster(cfg)?,
    };
    let h_site = cfg.site_index(SiteRole::Proton)?;
    let nv_site = cfg.site_index(SiteRole::Nv)?;
    let p1_site = cfg.site_index(SiteRole::P1)?;
    let t1_idx: Vec<usize> = proto
        .t1_sites
        .iter()
        .filter_map(|r| cfg.site_index(*r).ok())
        .collect();

    let mut prepared = Vec::with_capacity(proto.segments.len());
    for seg in &proto.segments {
        let dur = seg.duration_ms();
        let mut splits: Vec<(f64, bool)> = seg.t1_events.iter().map(|&t| (t, true)).collect();
        for k in 1..=opts.samples_per_sweep {
            let t = dur * k as f64 / (opts.samples_per_sweep + 1) as f64;
            splits.push((t, false));
        }
        let times: Vec<f64> = splits.iter().map(|s| s.0).collect();
        let prop = SegmentPropagator::build(&ham, seg, &control, &times)?;
        let piece_of = |t: f64| {
            prop.pieces
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 .0 - t).abs().total_cmp(&(b.1 .0 - t).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let last = prop.pieces.len() - 1;
        let mut t1_after: Vec<usize> = seg.t1_events.iter().map(|&t| piece_of(t)).collect();
        t1_after.sort_unstable();
        let mut sample_after: Vec<usize> = (1..=opts.samples_per_sweep)
            .map(|k| piece_of(dur * k as f64 / (opts.samples_per_sweep + 1) as f64))
            .filter(|&i| i < last)
            .collect();
        sample_after.dedup();
        let dephase = seg.dephase_at_end.then(|| ham.at(seg.b_end));
        prepared.push(Prepared {
            prop,
            dephase,
            t1_after,
            sample_after,
        });
    }

    let eps = proto.epsilon();
    let mut t0 = 0.0;
    let mut b_now = proto.segments[0].b_start;
    let record = |rho: &DensityMatrix, t: f64, b: f64, cycle: usize, tag: EventTag| -> Result<Record> {
        if opts.check_invariants {
            rho.check()?;
        }
        Ok(Record {
            t_ms: t,
            b_mt: b,
            pol_h: rho.polarization(h_site)?,
            pol_nv: rho.polarization(nv_site)?,
            pol_p1: rho.polarization(p1_site)?,
            cycle,
            tag,
            eigen_populations: if opts.eigen_populations {
                rho.eigenbasis_populations(&ham.at(b))
            } else {
                Vec::new()
            },
        })
    };

    for cycle in 0..proto.n_cycles {
        for (si, seg) in proto.segments.iter().enumerate() {
            let prep = &prepared[si];
            if (seg.b_start - b_now).abs() > 1e-9 {
                // discontinuous schedules jump the field instantly
                b_now = seg.b_start;
            }
            if proto.light_before(cycle, si) {
                rho = optical_repolarize(&rho, eps)?;
                ts.records.push(record(&rho, t0, b_now, cycle, EventTag::Light)?);
            }
            for (pi, (t_end, b_end, u)) in prep.prop.pieces.iter().enumerate() {
                rho.evolve(u);
                rho.symmetrize();
                if prep.sample_after.contains(&pi) {
                    ts.records.push(record(&rho, t0 + t_end, *b_end, cycle, EventTag::Sample)?);
                }
                for _ in prep.t1_after.iter().filter(|&&k| k == pi) {
                    for &s in &t1_idx {
                        rho = apply_spin_flip_relaxation(&rho, s)?;
                    }
                    ts.records.push(record(&rho, t0 + t_end, *b_end, cycle, EventTag::T1)?);
                }
            }
            t0 += seg.duration_ms();
            b_now = seg.b_end;
            let tag = if seg.is_up() {
                EventTag::SweepUp
            } else {
                EventTag::SweepDown
            };
            ts.records.push(record(&rho, t0, b_now, cycle, tag)?);
            if let Some(h) = &prep.dephase {
                rho = apply_dephasing(&rho, h)?;
                ts.records.push(record(&rho, t0, b_now, cycle, EventTag::Dephase)?);
            }
            if seg.t1_at_end {
                for &s in &t1_idx {
                    rho = apply_spin_flip_relaxation(&rho, s)?;
                }
                ts.records.push(record(&rho, t0, b_now, cycle, EventTag::T1)?);
            }
        }
    }
    Ok((ts, rho))
}
