use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::DensityMatrix;
use crate::error::{Error, Result};
use crate::linalg::{eigh, propagator_from_eigen};
use crate::model::{gap_estimates, ClusterConfig, ClusterHamiltonian};
use crate::spin::CMatrix;

/// A Hamiltonian that depends on the swept field only.
pub trait SweepHamiltonian: Sync {
    fn dim(&self) -> usize;
    /// `H(B)` in MHz for `B` in mT.
    fn at(&self, b: f64) -> CMatrix;
}

impl SweepHamiltonian for ClusterHamiltonian {
    fn dim(&self) -> usize {
        ClusterHamiltonian::dim(self)
    }

    fn at(&self, b: f64) -> CMatrix {
        ClusterHamiltonian::at(self, b)
    }
}

/// `H(B) = a + B·z`, for engineered test systems.
#[derive(Debug, Clone)]
pub struct LinearHamiltonian {
    pub a: CMatrix,
    pub z: CMatrix,
}

impl SweepHamiltonian for LinearHamiltonian {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn at(&self, b: f64) -> CMatrix {
        &self.a + &self.z * Complex64::new(b, 0.0)
    }
}

/// One linear field ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSegment {
    #[serde(rename = "B_start_mT")]
    pub b_start: f64,
    #[serde(rename = "B_end_mT")]
    pub b_end: f64,
    #[serde(rename = "beta_mT_per_ms")]
    pub beta: f64,
    #[serde(default)]
    pub dephase_at_end: bool,
    #[serde(default)]
    pub t1_at_end: bool,
    /// Extra relaxation events, ms after the segment start.
    #[serde(rename = "t1_events_ms", default)]
    pub t1_events: Vec<f64>,
}

impl SweepSegment {
    pub fn new(b_start: f64, b_end: f64, beta: f64) -> Self {
        Self {
            b_start,
            b_end,
            beta,
            dephase_at_end: false,
            t1_at_end: false,
            t1_events: Vec::new(),
        }
    }

    pub fn with_dephasing(mut self, on: bool) -> Self {
        self.dephase_at_end = on;
        self
    }

    pub fn with_t1(mut self, on: bool) -> Self {
        self.t1_at_end = on;
        self
    }

    pub fn duration_ms(&self) -> f64 {
        (self.b_end - self.b_start).abs() / self.beta
    }

    pub fn is_up(&self) -> bool {
        self.b_end >= self.b_start
    }

    pub fn field_at(&self, t_ms: f64) -> f64 {
        let sign = if self.is_up() { 1.0 } else { -1.0 };
        self.b_start + sign * self.beta * t_ms
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::param("beta_mT_per_ms", format!("{} must be > 0", self.beta)));
        }
        for (name, b) in [("B_start_mT", self.b_start), ("B_end_mT", self.b_end)] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::param(name, format!("{b} must be finite and >= 0")));
            }
        }
        let dur = self.duration_ms();
        for &t in &self.t1_events {
            if !(t.is_finite() && (0.0..=dur).contains(&t)) {
                return Err(Error::param("t1_events_ms", format!("{t} is outside [0, {dur}]")));
            }
        }
        Ok(())
    }
}

/// Step-size rule for sweep propagation.
///
/// The step `dt` satisfies `slope·β·dt ≤ narrow_gap / gap_fraction` and
/// `dt ≤ τ_LZ / lz_fraction` with `τ_LZ = wide_gap / (2·slope·β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepControl {
    pub gap_fraction: f64,
    pub lz_fraction: f64,
    #[serde(rename = "narrow_gap_MHz")]
    pub narrow_gap: f64,
    #[serde(rename = "wide_gap_MHz")]
    pub wide_gap: f64,
    /// Level slope used for both rules, MHz/mT.
    #[serde(rename = "slope_MHz_per_mT")]
    pub slope: f64,
    /// Floor applied to `narrow_gap` so vanishing gaps stay finite, MHz.
    #[serde(rename = "min_gap_MHz")]
    pub min_gap: f64,
    pub max_steps: usize,
    /// Overrides both rules with a fixed number of steps per segment.
    pub fixed_steps: Option<usize>,
}

impl StepControl {
    pub fn new(narrow_gap: f64, wide_gap: f64, slope: f64) -> Self {
        Self {
            gap_fraction: 20.0,
            lz_fraction: 50.0,
            narrow_gap,
            wide_gap,
            slope,
            min_gap: 2e-3,
            max_steps: 2_000_000,
            fixed_steps: None,
        }
    }

    /// Gaps taken from the analytic estimates of the cluster.
    pub fn for_cluster(cfg: &ClusterConfig) -> Result<Self> {
        let g = gap_estimates(cfg)?;
        Ok(Self::new(g.delta1, g.delta0, cfg.constants.gamma_e))
    }

    pub fn fixed(steps: usize) -> Self {
        Self {
            fixed_steps: Some(steps.max(1)),
            ..Self::new(1.0, 1.0, 1.0)
        }
    }

    /// Coarsens both rules by `factor` (> 1 means fewer steps).
    pub fn coarsened(mut self, factor: f64) -> Self {
        self.gap_fraction /= factor;
        self.lz_fraction /= factor;
        self
    }

    /// Step length in ms for sweep rate `beta`.
    pub fn dt_ms(&self, beta: f64) -> f64 {
        let rate = self.slope * beta;
        let gap = self.narrow_gap.max(self.min_gap);
        let mut dt = gap / (self.gap_fraction * rate);
        if self.wide_gap > 0.0 {
            let tau = self.wide_gap / (2.0 * rate);
            dt = dt.min(tau / self.lz_fraction);
        }
        dt
    }

    pub fn steps_for(&self, seg: &SweepSegment) -> Result<usize> {
        if let Some(n) = self.fixed_steps {
            return Ok(n);
        }
        let dur = seg.duration_ms();
        if dur == 0.0 {
            return Ok(0);
        }
        let raw = (dur / self.dt_ms(seg.beta)).ceil();
        if !raw.is_finite() || raw > self.max_steps as f64 {
            return Err(Error::StepBudget {
                needed: if raw.is_finite() { raw as usize } else { usize::MAX },
                limit: self.max_steps,
            });
        }
        Ok(raw.max(1.0) as usize)
    }
}

/// Precomputed unitary pieces of one segment, split at requested times.
#[derive(Debug, Clone)]
pub struct SegmentPropagator {
    /// `(t_end_ms, B_end_mT, U)` for consecutive pieces.
    pub pieces: Vec<(f64, f64, CMatrix)>,
    pub steps: usize,
}

impl SegmentPropagator {
    /// Builds the piecewise-constant propagator with the field at each step
    /// midpoint. `splits` are times (ms from segment start) at which a piece
    /// ends; they are rounded to the nearest step boundary.
    pub fn build<H: SweepHamiltonian + ?Sized>(
        ham: &H,
        seg: &SweepSegment,
        control: &StepControl,
        splits: &[f64],
    ) -> Result<Self> {
        seg.validate()?;
        let n = ham.dim();
        let steps = control.steps_for(seg)?;
        let dur = seg.duration_ms();
        if steps == 0 {
            return Ok(Self {
                pieces: vec![(0.0, seg.b_end, CMatrix::identity(n, n))],
                steps,
            });
        }
        let dt = dur / steps as f64;
        let mut cuts: Vec<usize> = splits
            .iter()
            .map(|&t| ((t / dt).round() as usize).min(steps))
            .filter(|&k| k > 0 && k < steps)
            .collect();
        cuts.push(steps);
        cuts.sort_unstable();
        cuts.dedup();

        let dt_us = dt * 1e3;
        let mut pieces = Vec::with_capacity(cuts.len());
        let mut u = CMatrix::identity(n, n);
        let mut next = 0;
        for k in 0..steps {
            let b = seg.field_at((k as f64 + 0.5) * dt);
            let step = propagator_from_eigen(&eigh(&ham.at(b)), dt_us);
            u = step * u;
            if k + 1 == cuts[next] {
                let t = (k + 1) as f64 * dt;
                let b_end = if k + 1 == steps { seg.b_end } else { seg.field_at(t) };
                pieces.push((t, b_end, std::mem::replace(&mut u, CMatrix::identity(n, n))));
                next += 1;
            }
        }
        Ok(Self { pieces, steps })
    }

    /// Product of all pieces.
    pub fn total(&self) -> CMatrix {
        let n = self.pieces[0].2.nrows();
        self.pieces
            .iter()
            .fold(CMatrix::identity(n, n), |acc, (_, _, u)| u * acc)
    }
}

/// Evolves `rho` unitarily through one sweep of the cluster. Event flags on
/// the segment are handled by the protocol runner, not here.
pub fn propagate_segment(
    rho: &DensityMatrix,
    seg: &SweepSegment,
    cfg: &ClusterConfig,
) -> Result<DensityMatrix> {
    let ham = ClusterHamiltonian::new(cfg)?;
    let control = StepControl::for_cluster(cfg)?;
    propagate_with(&ham, rho, seg, &control)
}

/// Same as [`propagate_segment`] for any sweep Hamiltonian and step rule.
pub fn propagate_with<H: SweepHamiltonian + ?Sized>(
    ham: &H,
    rho: &DensityMatrix,
    seg: &SweepSegment,
    control: &StepControl,
) -> Result<DensityMatrix> {
    if ham.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: ham.dim(),
        });
    }
    let p = SegmentPropagator::build(ham, seg, control, &[])?;
    let mut out = rho.clone();
    out.evolve(&p.total());
    out.symmetrize();
    Ok(out)
}
