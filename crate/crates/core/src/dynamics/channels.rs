use num_complex::Complex64;

use super::DensityMatrix;
use crate::error::{Error, Result};
use crate::linalg::{eigh, sandwich};
use crate::spin::{embed, spin_operators_twice, CMatrix};

/// Relative spacing below which eigenvalues share one dephasing projector.
const DEGENERATE_REL: f64 = 1e-10;

/// Removes coherences between distinct eigenspaces of `h`.
///
/// Exactly degenerate eigenvalues are grouped into one projector so the
/// result does not depend on the solver's choice of basis inside them.
pub fn apply_dephasing(rho: &DensityMatrix, h: &CMatrix) -> Result<DensityMatrix> {
    if h.nrows() != rho.dim() || h.ncols() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: h.nrows(),
        });
    }
    let e = eigh(h);
    let n = e.values.len();
    let scale = e.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut group = vec![0usize; n];
    for k in 1..n {
        group[k] = group[k - 1] + usize::from(e.values[k] - e.values[k - 1] > DEGENERATE_REL * scale);
    }
    let mut r = e.vectors.adjoint() * rho.matrix() * &e.vectors;
    for i in 0..n {
        for j in 0..n {
            if group[i] != group[j] {
                r[(i, j)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    let out = &e.vectors * r * e.vectors.adjoint();
    let mut dm = DensityMatrix::from_parts_unchecked(rho.layout(), out);
    dm.symmetrize();
    Ok(dm)
}

/// Full spin-lattice relaxation of one spin-½ electron:
/// `ρ' = ½(ρ + FρF†)` with `F = 2Sx` on that site.
pub fn apply_spin_flip_relaxation(rho: &DensityMatrix, site: usize) -> Result<DensityMatrix> {
    let layout = rho.layout();
    let s = layout.sites().get(site).ok_or(Error::SiteOutOfRange {
        site,
        sites: layout.len(),
    })?;
    if s.two_s != 1 {
        return Err(Error::param(
            "site",
            format!("relaxation channel needs a spin-1/2 site, `{}` is not", s.label),
        ));
    }
    let ops = spin_operators_twice(1);
    let f = embed(&ops.sx.scale(2.0), site, layout)?;
    let out = (rho.matrix() + sandwich(&f, rho.matrix())).scale(0.5);
    Ok(DensityMatrix::from_parts_unchecked(layout, out))
}

/// NV state after an optical pulse, basis `+1, 0, −1`.
pub fn nv_initial_state(epsilon: f64) -> Result<CMatrix> {
    if !(0.0..=2.0).contains(&epsilon) {
        return Err(Error::param("epsilon", format!("{epsilon} is outside [0, 2]")));
    }
    let side = (1.0 - epsilon / 2.0) / 3.0;
    let centre = (1.0 + epsilon) / 3.0;
    let mut m = CMatrix::zeros(3, 3);
    m[(0, 0)] = Complex64::new(side, 0.0);
    m[(1, 1)] = Complex64::new(centre, 0.0);
    m[(2, 2)] = Complex64::new(side, 0.0);
    Ok(m)
}

/// Replaces the NV by its optically prepared state: `ρ_NV(ε) ⊗ Tr_NV ρ`.
pub fn optical_repolarize(rho: &DensityMatrix, epsilon: f64) -> Result<DensityMatrix> {
    let nv_state = nv_initial_state(epsilon)?;
    let layout = rho.layout();
    let nv = layout
        .index_of("NV")
        .ok_or_else(|| Error::MissingSite("NV".into()))?;
    if layout.site_dim(nv) != 3 {
        return Err(Error::param("NV", "the NV site must be spin 1"));
    }
    let rest = rho.trace_out(nv)?;
    let inner = layout.stride(nv);
    let n = layout.dim();
    let split = |i: usize| {
        let outer = i / (3 * inner);
        let k = (i / inner) % 3;
        let r = outer * inner + i % inner;
        (k, r)
    };
    let out = CMatrix::from_fn(n, n, |i, j| {
        let (ki, ri) = split(i);
        let (kj, rj) = split(j);
        if ki == kj {
            nv_state[(ki, kj)] * rest[(ri, rj)]
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(DensityMatrix::from_parts_unchecked(layout, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::spin::{HilbertLayout, Site};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn layout() -> HilbertLayout {
        HilbertLayout::new(vec![Site::new("NV", 2), Site::new("P1", 1), Site::new("H", 1)]).unwrap()
    }

    fn random_state(seed: u64, n: usize) -> CMatrix {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = CMatrix::from_fn(n, n, |_, _| Complex64::new(next(), next()));
        let p = &a * a.adjoint();
        let tr = p.trace().re;
        p.unscale(tr)
    }

    #[test]
    fn epsilon_limits() {
        let m = nv_initial_state(2.0).unwrap();
        assert_abs_diff_eq!(m[(1, 1)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 0)].re, 0.0, epsilon = 1e-15);
        let m = nv_initial_state(0.0).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(m[(k, k)].re, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(nv_initial_state(2.1).is_err());
        assert!(nv_initial_state(-0.1).is_err());
    }

    #[test]
    fn repolarize_keeps_rest_of_cluster() {
        let l = layout();
        let dm = DensityMatrix::from_matrix(&l, random_state(1, 12)).unwrap();
        let out = optical_repolarize(&dm, 2.0).unwrap();
        out.check().unwrap();
        assert!(max_abs(&(out.trace_out(0).unwrap() - dm.trace_out(0).unwrap())) < 1e-14);
        assert_abs_diff_eq!(out.polarization(0).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn repolarize_with_nv_not_first() {
        let l = HilbertLayout::new(vec![Site::new("H", 1), Site::new("NV", 2)]).unwrap();
        let dm = DensityMatrix::from_matrix(&l, random_state(4, 6)).unwrap();
        let out = optical_repolarize(&dm, 1.0).unwrap();
        out.check().unwrap();
        assert!(max_abs(&(out.trace_out(1).unwrap() - dm.trace_out(1).unwrap())) < 1e-14);
        let p = out.site_populations(1).unwrap();
        assert_abs_diff_eq!(p[1], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn dephasing_properties() {
        let l = layout();
        let h = random_state(7, 12).scale(10.0);
        let dm = DensityMatrix::from_matrix(&l, random_state(8, 12)).unwrap();
        let once = apply_dephasing(&dm, &h).unwrap();
        let twice = apply_dephasing(&once, &h).unwrap();
        assert!(max_abs(&(once.matrix() - twice.matrix())) < 1e-13);
        assert_abs_diff_eq!(once.trace(), 1.0, epsilon = 1e-12);
        // diagonal in the eigenbasis: unchanged
        assert!(max_abs(&(apply_dephasing(&once, &h).unwrap().matrix() - once.matrix())) < 1e-13);
    }

    #[test]
    fn dephasing_superposition_halves_purity() {
        let l = HilbertLayout::new(vec![Site::new("P1", 1)]).unwrap();
        let mut h = CMatrix::zeros(2, 2);
        h[(0, 0)] = Complex64::new(1.0, 0.0);
        h[(1, 1)] = Complex64::new(-1.0, 0.0);
        let psi = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]);
        let dm = DensityMatrix::pure(&l, &psi).unwrap();
        let out = apply_dephasing(&dm, &h).unwrap();
        assert_abs_diff_eq!(out.purity(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn relaxation_equalizes_pairs_and_keeps_proton() {
        let l = layout();
        let dm = DensityMatrix::from_matrix(&l, random_state(3, 12)).unwrap();
        let out = apply_spin_flip_relaxation(&dm, 1).unwrap();
        out.check().unwrap();
        assert_abs_diff_eq!(out.polarization(2).unwrap(), dm.polarization(2).unwrap(), epsilon = 1e-14);
        assert_abs_diff_eq!(out.polarization(1).unwrap(), 0.0, epsilon = 1e-14);
        for i in 0..12 {
            let mut m = l.projections(i);
            m[1] = -m[1];
            let j = l.index_of_projections(&m).unwrap();
            assert_abs_diff_eq!(out.matrix()[(i, i)].re, out.matrix()[(j, j)].re, epsilon = 1e-14);
        }
        // fixed point
        let again = apply_spin_flip_relaxation(&out, 1).unwrap();
        assert!(max_abs(&(again.matrix() - out.matrix())) < 1e-14);
        assert!(apply_spin_flip_relaxation(&dm, 0).is_err());
    }
}
