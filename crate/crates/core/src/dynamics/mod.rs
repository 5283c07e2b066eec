//! Density-matrix propagation through sweeps, light pulses and relaxation.

mod channels;
mod propagate;
mod protocol;

pub use channels::{
    apply_dephasing, apply_spin_flip_relaxation, nv_initial_state, optical_repolarize,
};
pub use propagate::{
    propagate_segment, propagate_with, LinearHamiltonian, SegmentPropagator, StepControl, SweepHamiltonian,
    SweepSegment,
};
pub use protocol::{
    run_protocol, run_protocol_with, EventTag, LightPlacement, Protocol, Record, RunOptions,
    TimeSeries, TIME_SERIES_HEADER,
};

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{eigh, hermiticity_defect, sandwich};
use crate::spin::{embed, spin_operators_twice, CMatrix, HilbertLayout};

/// Tolerances checked by [`DensityMatrix::check`].
pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-8;

/// Dense density operator of the cluster.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    rho: CMatrix,
    layout: HilbertLayout,
}

impl DensityMatrix {
    pub fn maximally_mixed(layout: &HilbertLayout) -> Self {
        let n = layout.dim();
        Self {
            rho: CMatrix::identity(n, n).unscale(n as f64),
            layout: layout.clone(),
        }
    }

    /// Pure state `|ψ⟩⟨ψ|`; `psi` is normalized here.
    pub fn pure(layout: &HilbertLayout, psi: &DVector<Complex64>) -> Result<Self> {
        if psi.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                found: psi.len(),
            });
        }
        let norm = psi.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::param("psi", "state vector must be non-zero"));
        }
        let v = psi.unscale(norm);
        Ok(Self {
            rho: &v * v.adjoint(),
            layout: layout.clone(),
        })
    }

    /// Wraps a matrix after validating the density-matrix invariants.
    pub fn from_matrix(layout: &HilbertLayout, rho: CMatrix) -> Result<Self> {
        if rho.nrows() != layout.dim() || rho.ncols() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                found: rho.nrows(),
            });
        }
        let dm = Self {
            rho,
            layout: layout.clone(),
        };
        dm.check()?;
        Ok(dm)
    }

    pub(crate) fn from_parts_unchecked(layout: &HilbertLayout, rho: CMatrix) -> Self {
        Self {
            rho,
            layout: layout.clone(),
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn layout(&self) -> &HilbertLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        eigh(&self.rho).values[0]
    }

    /// Verifies hermiticity, unit trace and positivity.
    pub fn check(&self) -> Result<()> {
        let herm = hermiticity_defect(&self.rho);
        if herm > HERMITIAN_TOL {
            return Err(Error::Invariant(format!("hermiticity defect {herm:.3e}")));
        }
        let tr = self.rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::Invariant(format!("trace {tr}")));
        }
        let lmin = self.min_eigenvalue();
        if lmin < -POSITIVITY_TOL {
            return Err(Error::Invariant(format!("negative eigenvalue {lmin:.3e}")));
        }
        Ok(())
    }

    /// `U ρ U†`.
    pub fn evolve(&mut self, u: &CMatrix) {
        self.rho = sandwich(u, &self.rho);
    }

    /// Restores exact hermiticity and unit trace after floating-point drift
    /// (long products of step propagators are unitary only to rounding).
    pub fn symmetrize(&mut self) {
        let h = (&self.rho + self.rho.adjoint()).scale(0.5);
        let tr = h.trace().re;
        self.rho = h.unscale(tr);
    }

    /// `Tr(ρ O)` for an operator on the full space.
    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        (&self.rho * op).trace()
    }

    /// Diagonal of the reduced density matrix of one site.
    pub fn site_populations(&self, site: usize) -> Result<Vec<f64>> {
        if site >= self.layout.len() {
            return Err(Error::SiteOutOfRange {
                site,
                sites: self.layout.len(),
            });
        }
        let d = self.layout.site_dim(site);
        let mut p = vec![0.0; d];
        for i in 0..self.dim() {
            p[self.layout.decompose(i)[site]] += self.rho[(i, i)].re;
        }
        Ok(p)
    }

    /// `⟨S_z⟩` of one site.
    pub fn sz(&self, site: usize) -> Result<f64> {
        let p = self.site_populations(site)?;
        let s = self.layout.sites()[site].two_s as f64 / 2.0;
        Ok(p.iter().enumerate().map(|(k, w)| (s - k as f64) * w).sum())
    }

    /// Polarization of a site.
    ///
    /// Spin ½: `2⟨S_z⟩`. Spin 1: `p(0) − [p(+1) + p(−1)]/2`, which is 1 for a
    /// pure `m = 0` state and 0 when maximally mixed; `⟨S_z⟩` is available
    /// separately through [`sz`](Self::sz).
    pub fn polarization(&self, site: usize) -> Result<f64> {
        let two_s = self
            .layout
            .sites()
            .get(site)
            .ok_or(Error::SiteOutOfRange {
                site,
                sites: self.layout.len(),
            })?
            .two_s;
        match two_s {
            1 => Ok(2.0 * self.sz(site)?),
            2 => {
                let p = self.site_populations(site)?;
                Ok(p[1] - 0.5 * (p[0] + p[2]))
            }
            _ => self.sz(site).map(|v| v / (two_s as f64 / 2.0)),
        }
    }

    /// Populations in the eigenbasis of `h` (eigenvalues ascending).
    pub fn eigenbasis_populations(&self, h: &CMatrix) -> Vec<f64> {
        let e = eigh(h);
        let r = e.vectors.adjoint() * &self.rho * &e.vectors;
        (0..self.dim()).map(|k| r[(k, k)].re).collect()
    }

    /// Reduced state of everything except `site`, in the layout order of
    /// the remaining sites.
    pub fn trace_out(&self, site: usize) -> Result<CMatrix> {
        let l = &self.layout;
        if site >= l.len() {
            return Err(Error::SiteOutOfRange {
                site,
                sites: l.len(),
            });
        }
        let d = l.site_dim(site);
        let rest = l.dim() / d;
        let inner = l.stride(site);
        let mut out = CMatrix::zeros(rest, rest);
        let full = |outer: usize, k: usize, inner_i: usize| (outer * d + k) * inner + inner_i;
        for r in 0..rest {
            let (ro, ri) = (r / inner, r % inner);
            for c in 0..rest {
                let (co, ci) = (c / inner, c % inner);
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..d {
                    acc += self.rho[(full(ro, k, ri), full(co, k, ci))];
                }
                out[(r, c)] = acc;
            }
        }
        Ok(out)
    }

    /// Embedded single-site operator helper for tests and readouts.
    pub fn site_operator(&self, site: usize, which: SiteOp) -> Result<CMatrix> {
        let two_s = self.layout.sites()[site].two_s;
        let ops = spin_operators_twice(two_s);
        let m = match which {
            SiteOp::Sx => ops.sx,
            SiteOp::Sy => ops.sy,
            SiteOp::Sz => ops.sz,
        };
        embed(&m, site, &self.layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteOp {
    Sx,
    Sy,
    Sz,
}
