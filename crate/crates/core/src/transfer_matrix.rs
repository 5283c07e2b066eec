//! Classical eight-branch transfer matrices for sweep cycles.
//!
//! Branch labels (1-based in docs, 0-based in code):
//! `|1⟩ = |0,−½,↑⟩`, `|2⟩ = |0,−½,↓⟩`, `|3⟩ = |0,+½,↑⟩`, `|4⟩ = |0,+½,↓⟩`,
//! `|5⟩ = |−1,−½,↑⟩`, `|6⟩ = |−1,−½,↓⟩`, `|7⟩ = |−1,+½,↑⟩`, `|8⟩ = |−1,+½,↓⟩`.
//! Proton-up branches carry odd labels, so the proton polarization of a
//! population vector is the odd-label sum minus the even-label sum.
//!
//! Landau-Zener probabilities take gaps in MHz and rates in mT/ms. The usual
//! angular-frequency expression `exp(−(π/2)·Δ²/(2γβ))` becomes
//! `exp(−π²·Δ²/(2γβ))` once Δ and γ are cyclic frequencies; the factor
//! 10³ converts mT/ms into mT/µs.

use std::io::Write;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GapEstimate, PhysicalConstants};

pub type Tm = SMatrix<f64, 8, 8>;
pub type Populations = SVector<f64, 8>;

/// Column sums and entries are checked to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LzChannel {
    /// Wide gap; level slope `2γe`.
    Delta0,
    /// Narrow gap; level slope `2γe + γH`.
    Delta1,
}

impl LzChannel {
    pub fn slope(self, c: &PhysicalConstants) -> f64 {
        match self {
            LzChannel::Delta0 => 2.0 * c.gamma_e.abs(),
            LzChannel::Delta1 => 2.0 * c.gamma_e.abs() + c.gamma_h,
        }
    }
}

fn check_lz_inputs(delta: f64, beta: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::param("delta", format!("{delta} must be finite and >= 0")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param("beta", format!("{beta} must be finite and > 0")));
    }
    Ok(())
}

/// Non-adiabatic crossing probability of a gap `delta` (MHz) at `beta` (mT/ms).
pub fn lz_prob(delta: f64, beta: f64, channel: LzChannel, c: &PhysicalConstants) -> Result<f64> {
    check_lz_inputs(delta, beta)?;
    let rate_per_us = channel.slope(c) * beta * 1e-3;
    Ok((-std::f64::consts::PI.powi(2) * delta * delta / rate_per_us).exp())
}

/// Strong-dephasing probability of the wide gap: `½[1 + exp(−2π²Δ²/(2γe β))]`.
pub fn lz_prob_sd(delta: f64, beta: f64, c: &PhysicalConstants) -> Result<f64> {
    let p = lz_prob(delta, beta, LzChannel::Delta0, c)?;
    Ok(0.5 * (1.0 + p * p))
}

/// Landau-Zener time `Δ/(2|γe|β)` in ms.
pub fn tau_lz(delta: f64, beta: f64, c: &PhysicalConstants) -> Result<f64> {
    check_lz_inputs(delta, beta)?;
    Ok(delta / (2.0 * c.gamma_e.abs() * beta))
}

/// Crossing probabilities of one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LzParams {
    pub p0_up: f64,
    pub p1_up: f64,
    pub p0_down: f64,
    pub p1_down: f64,
    /// Wide-gap probabilities were taken in the strong-dephasing limit.
    pub sd_mode: bool,
}

impl LzParams {
    pub fn new(p0_up: f64, p1_up: f64, p0_down: f64, p1_down: f64) -> Result<Self> {
        let p = Self {
            p0_up,
            p1_up,
            p0_down,
            p1_down,
            sd_mode: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Strong-dephasing limit: every wide-gap probability is ½.
    pub fn strong_dephasing(p1_up: f64, p1_down: f64) -> Result<Self> {
        let mut p = Self::new(0.5, p1_up, 0.5, p1_down)?;
        p.sd_mode = true;
        Ok(p)
    }

    /// Probabilities from gap estimates at the two sweep rates.
    pub fn from_gaps(
        g: &GapEstimate,
        c: &PhysicalConstants,
        beta_up: f64,
        beta_down: f64,
        sd_mode: bool,
    ) -> Result<Self> {
        let p0 = |beta| {
            if sd_mode {
                lz_prob_sd(g.delta0, beta, c)
            } else {
                lz_prob(g.delta0, beta, LzChannel::Delta0, c)
            }
        };
        let p = Self {
            p0_up: p0(beta_up)?,
            p1_up: lz_prob(g.delta1, beta_up, LzChannel::Delta1, c)?,
            p0_down: p0(beta_down)?,
            p1_down: lz_prob(g.delta1, beta_down, LzChannel::Delta1, c)?,
            sd_mode,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p0_up", self.p0_up),
            ("p1_up", self.p1_up),
            ("p0_down", self.p0_down),
            ("p1_down", self.p1_down),
        ] {
            check_probability(name, v)?;
        }
        Ok(())
    }
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} is not a probability")))
    }
}

/// Population vector over the eight branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchPopulations {
    v: Populations,
}

impl BranchPopulations {
    pub fn new(v: [f64; 8]) -> Result<Self> {
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::param("populations", "entries must be non-negative"));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::param("populations", format!("sum is {s}, not 1")));
        }
        Ok(Self {
            v: Populations::from(v),
        })
    }

    /// Equal weight on the four `m_S = 0` branches.
    pub fn after_light() -> Self {
        Self {
            v: Populations::from([0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0]),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.v.as_slice()
    }

    pub fn vector(&self) -> &Populations {
        &self.v
    }

    pub fn proton_polarization(&self) -> f64 {
        proton_polarization(&self.v)
    }
}

pub fn proton_polarization(v: &Populations) -> f64 {
    v.iter()
        .enumerate()
        .map(|(i, x)| if i % 2 == 0 { *x } else { -*x })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Built from the elementary sweep, relaxation and light matrices.
    Composed,
    /// Closed form for a strongly dephased up sweep, a fast down sweep and
    /// P1 relaxation after each sweep.
    AnalyticRelaxed,
    /// Closed form for a strongly dephased up sweep and a fully
    /// non-adiabatic down sweep, no relaxation.
    AnalyticUnrelaxed,
}

/// A column-stochastic 8×8 matrix with its origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleMatrix {
    pub t: Tm,
    pub provenance: Provenance,
}

impl CycleMatrix {
    pub fn composed(t: Tm) -> Self {
        Self {
            t,
            provenance: Provenance::Composed,
        }
    }

    /// `self` after `first`, i.e. `self.t · first.t`.
    pub fn after(&self, first: &CycleMatrix) -> CycleMatrix {
        CycleMatrix::composed(self.t * first.t)
    }

    pub fn transpose(&self) -> CycleMatrix {
        CycleMatrix::composed(self.t.transpose())
    }

    /// Largest deviation of a column sum from 1.
    pub fn stochastic_defect(&self) -> f64 {
        (0..8)
            .map(|j| (self.t.column(j).sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check(&self) -> Result<()> {
        let d = self.stochastic_defect();
        if d > STOCHASTIC_TOL {
            return Err(Error::Invariant(format!("column sum off by {d:.3e}")));
        }
        if let Some(x) = self
            .t
            .iter()
            .find(|x| **x < -STOCHASTIC_TOL || **x > 1.0 + STOCHASTIC_TOL)
        {
            return Err(Error::Invariant(format!("entry {x} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn apply(&self, v: &BranchPopulations) -> BranchPopulations {
        BranchPopulations { v: self.t * v.v }
    }
}

fn from_rows(rows: [[f64; 8]; 8]) -> Tm {
    Tm::from_fn(|i, j| rows[i][j])
}

/// Low-to-high sweep.
pub fn build_tm_up(p0: f64, p1: f64) -> Result<CycleMatrix> {
    check_probability("p0", p0)?;
    check_probability("p1", p1)?;
    let (q0, q1) = (1.0 - p0, 1.0 - p1);
    let mix = p1 * p1 + q1 * q1;
    let cross = 2.0 * q0 * p1 * q1;
    let t = from_rows([
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, p0 * p1, cross, q0 * mix, p0 * q1, 0.0, 0.0],
        [0.0, 0.0, 0.0, p1 * p0, q1 * p0, q0, 0.0, 0.0],
        [0.0, 0.0, q0, q1 * p0, p1 * p0, 0.0, 0.0, 0.0],
        [0.0, 0.0, p0 * q1, q0 * mix, cross, p0 * p1, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ]);
    Ok(CycleMatrix::composed(t))
}

/// High-to-low sweep, the transpose of the up sweep.
pub fn build_tm_down(p0: f64, p1: f64) -> Result<CycleMatrix> {
    Ok(build_tm_up(p0, p1)?.transpose())
}

/// Full P1 spin-lattice relaxation.
pub fn tm_t1() -> CycleMatrix {
    let mut t = Tm::zeros();
    for (a, b) in [(0, 2), (1, 3), (4, 6), (5, 7)] {
        for (i, j) in [(a, a), (a, b), (b, a), (b, b)] {
            t[(i, j)] = 0.5;
        }
    }
    CycleMatrix::composed(t)
}

/// Full NV repolarization: `m_S = −1` branches fall onto `m_S = 0`.
pub fn tm_light() -> CycleMatrix {
    let mut t = Tm::zeros();
    for k in 0..4 {
        t[(k, k)] = 1.0;
        t[(k, k + 4)] = 1.0;
    }
    CycleMatrix::composed(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmLight {
    /// Repolarize once per cycle, before the up sweep.
    Start,
    None,
}

/// `T_L · [T_T1] · T↘ · [T_T1] · T↗`.
pub fn compose_cycle(p: &LzParams, with_t1: bool, light: TmLight) -> Result<CycleMatrix> {
    p.validate()?;
    let mut c = build_tm_up(p.p0_up, p.p1_up)?;
    if with_t1 {
        c = tm_t1().after(&c);
    }
    c = build_tm_down(p.p0_down, p.p1_down)?.after(&c);
    if with_t1 {
        c = tm_t1().after(&c);
    }
    if light == TmLight::Start {
        c = tm_light().after(&c);
    }
    Ok(c)
}

/// Closed-form cycle with relaxation, valid for `p0↗ = ½` and `p1↘ = 1`.
/// It depends on `p1↗` only.
pub fn analytic_cycle_relaxed(p1_up: f64) -> Result<CycleMatrix> {
    check_probability("p1_up", p1_up)?;
    let p = p1_up;
    let q = 1.0 - p;
    let odd = [0.5, 0.0, (p + 1.0) / 4.0, p * q / 2.0 + q / 4.0, p * p / 2.0 + q / 4.0, q / 4.0, 0.5, 0.0];
    let even = [0.0, 0.5, q / 4.0, p * p / 2.0 + q / 4.0, p * q / 2.0 + q / 4.0, (p + 1.0) / 4.0, 0.0, 0.5];
    let zero = [0.0; 8];
    Ok(CycleMatrix {
        t: from_rows([odd, even, odd, even, zero, zero, zero, zero]),
        provenance: Provenance::AnalyticRelaxed,
    })
}

/// Closed-form cycle without relaxation, valid for `p0↗ = ½` and
/// `p0↘ = p1↘ = 1`.
pub fn analytic_cycle_unrelaxed(p1_up: f64) -> Result<CycleMatrix> {
    check_probability("p1_up", p1_up)?;
    let p = p1_up;
    let q = 1.0 - p;
    let mix = 0.5 * (p * p + q * q);
    let zero = [0.0; 8];
    Ok(CycleMatrix {
        t: from_rows([
            [1.0, 0.0, 0.5, q / 2.0, p / 2.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, q / 2.0, mix, q * p, p / 2.0, 0.0, 0.0],
            [0.0, 0.0, p / 2.0, q * p, mix, q / 2.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, p / 2.0, q / 2.0, 0.5, 0.0, 1.0],
            zero,
            zero,
            zero,
            zero,
        ]),
        provenance: Provenance::AnalyticUnrelaxed,
    })
}

/// One row of an iterated trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmStep {
    pub cycle: usize,
    pub pol_h: f64,
    pub v: BranchPopulations,
}

/// `v_k = T^k v0` for `k = 0..=n`.
pub fn iterate(t: &CycleMatrix, v0: &BranchPopulations, n: usize) -> Vec<TmStep> {
    let mut v = *v0;
    let mut out = Vec::with_capacity(n + 1);
    for cycle in 0..=n {
        if cycle > 0 {
            v = t.apply(&v);
        }
        out.push(TmStep {
            cycle,
            pol_h: v.proton_polarization(),
            v,
        });
    }
    out
}

pub const TM_CSV_HEADER: [&str; 10] = [
    "cycle_index", "pol_H", "v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8",
];

pub fn write_tm_csv<W: Write>(steps: &[TmStep], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TM_CSV_HEADER)?;
    for s in steps {
        let mut row = vec![s.cycle.to_string(), format!("{:.12e}", s.pol_h)];
        row.extend(s.v.as_slice().iter().map(|x| format!("{x:.12e}")));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_dev(a: &Tm, b: &Tm) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn lz_limits() {
        let c = PhysicalConstants::default();
        assert_eq!(lz_prob(0.0, 3.0, LzChannel::Delta0, &c).unwrap(), 1.0);
        assert!(lz_prob(0.5, 1e-9, LzChannel::Delta0, &c).unwrap() < 1e-300);
        assert_abs_diff_eq!(lz_prob_sd(0.5, 1e-6, &c).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(lz_prob_sd(0.0, 1.0, &c).unwrap(), 1.0);
        assert!(lz_prob(-0.1, 1.0, LzChannel::Delta1, &c).is_err());
        assert!(lz_prob(0.1, 0.0, LzChannel::Delta1, &c).is_err());
    }

    #[test]
    fn tau_lz_anchor() {
        let c = PhysicalConstants::default();
        // 0.84 MHz at 3 mT/ms is about 5 µs
        let t = tau_lz(0.84, 3.0, &c).unwrap();
        assert!((t * 1e3 - 5.0).abs() < 0.01, "{t}");
    }

    #[test]
    fn sweeps_are_identity_when_fully_nonadiabatic() {
        assert_eq!(build_tm_up(1.0, 1.0).unwrap().t, Tm::identity());
        assert_eq!(build_tm_down(1.0, 1.0).unwrap().t, Tm::identity());
    }

    #[test]
    fn adiabatic_wide_gap_exchanges_three_and_five() {
        for p1 in [0.0, 0.3, 1.0] {
            let t = build_tm_up(0.0, p1).unwrap().t;
            assert_eq!(t[(4, 2)], 1.0);
            assert_eq!(t[(3, 5)], 1.0);
        }
    }

    #[test]
    fn fixed_matrices() {
        let t1 = tm_t1();
        assert!(max_dev(&(t1.t * t1.t), &t1.t) < 1e-15);
        let l = tm_light();
        let v = BranchPopulations::new([0.1, 0.2, 0.05, 0.05, 0.15, 0.15, 0.2, 0.1]).unwrap();
        let w = l.apply(&v);
        assert!(w.as_slice()[4..].iter().all(|x| *x == 0.0));
        assert_abs_diff_eq!(w.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t1.apply(&v).proton_polarization(), v.proton_polarization(), epsilon = 1e-15);
        t1.check().unwrap();
        l.check().unwrap();
    }

    #[test]
    fn unrelaxed_closed_form_is_light_after_up_sweep() {
        for p1 in [0.0, 0.2, 0.98, 1.0] {
            let p = LzParams::new(0.5, p1, 1.0, 1.0).unwrap();
            let c = compose_cycle(&p, false, TmLight::Start).unwrap();
            let a = analytic_cycle_unrelaxed(p1).unwrap();
            assert!(max_dev(&c.t, &a.t) < 1e-12);
        }
    }

    #[test]
    fn iterate_starts_at_v0() {
        let s = iterate(&tm_light(), &BranchPopulations::after_light(), 3);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].cycle, 0);
        assert_eq!(s[0].pol_h, 0.0);
    }

    #[test]
    fn populations_validate() {
        assert!(BranchPopulations::new([0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_ok());
        assert!(BranchPopulations::new([0.6, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(BranchPopulations::new([1.1, -0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = iterate(&tm_t1(), &BranchPopulations::after_light(), 2);
        let mut buf = Vec::new();
        write_tm_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TM_CSV_HEADER.join(","));
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 10);
    }
}
