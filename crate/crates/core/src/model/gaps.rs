use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::hamiltonian::{dipolar_geometry, subspace_basis, ClusterHamiltonian};
use super::{ClusterConfig, SiteRole};
use crate::error::{Error, Result};

/// Search bracket for the off-axis matching field, mT.
pub const MATCH_BRACKET_MT: (f64, f64) = (40.0, 120.0);

const ALIGNED_EPS: f64 = 1e-12;

fn z1(cfg: &ClusterConfig) -> f64 {
    cfg.coupling(SiteRole::Nv, SiteRole::P1)
        .map_or(0.0, |c| dipolar_geometry(c.theta, c.phi).0 * c.j)
}

fn z2(cfg: &ClusterConfig) -> f64 {
    cfg.coupling(SiteRole::Proton, SiteRole::P1)
        .map_or(0.0, |c| dipolar_geometry(c.theta, c.phi).0 * c.j)
}

/// Residual of `2ω0S + ω0I = D + Z1/2` at field `b`, MHz.
///
/// This is the crossing of `|0,+½,↓⟩` with `|−1,−½,↑⟩` for the aligned
/// field; `Z1 = g0·J_NVP1` enters with a plus sign because the NV–P1
/// secular term is `Z1·m_S·m_S'`.
pub fn matching_residual_mhz(cfg: &ClusterConfig, b: f64) -> f64 {
    let k = &cfg.constants;
    (2.0 * k.gamma_e + k.gamma_h) * b - k.d - z1(cfg) / 2.0
}

/// NV |0⟩↔|−1⟩ splitting minus the P1 Zeeman splitting for an isolated
/// NV–P1 pair in a tilted field.
fn pair_mismatch(cfg: &ClusterConfig, b: f64) -> f64 {
    let k = &cfg.constants;
    let (s, c) = cfg.field_theta.sin_cos();
    let w = k.gamma_e * b;
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    // Sx and Sz of spin 1 in the basis +1, 0, −1; φ only rotates the
    // transverse component and drops out of the spectrum.
    let h = Matrix3::new(
        k.d + w * c,
        w * s * r2,
        0.0,
        w * s * r2,
        0.0,
        w * s * r2,
        0.0,
        w * s * r2,
        k.d - w * c,
    );
    let mut e: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    (e[1] - e[0]) - w
}

/// Field at which the NV |0⟩↔|−1⟩ transition matches the P1 Zeeman splitting.
pub fn matching_field(cfg: &ClusterConfig) -> Result<f64> {
    cfg.constants.validate()?;
    if cfg.field_theta.abs() < ALIGNED_EPS {
        let k = &cfg.constants;
        return Ok((k.d + z1(cfg) / 2.0) / (2.0 * k.gamma_e + k.gamma_h));
    }
    let (mut lo, mut hi) = MATCH_BRACKET_MT;
    let mut flo = pair_mismatch(cfg, lo);
    let fhi = pair_mismatch(cfg, hi);
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return Err(Error::NoMatchingField { lo, hi });
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        let fm = pair_mismatch(cfg, mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Analytic gap estimates of the aligned NV–P1–¹H cluster at its matching field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// Direct gap `2|V_DQ|`, MHz.
    pub delta0: f64,
    /// Virtual gap `2|J_virtual|`, MHz.
    pub delta1: f64,
    pub z1: f64,
    pub z2: f64,
    pub v_ss: Complex64,
    pub v_dq: Complex64,
    pub j_virtual: Complex64,
    /// `⟨0,+½,↓|H|0,+½,↓⟩` at the matching field.
    pub e0: f64,
    /// Energy of the intermediate `|0,+½,↑⟩`.
    pub ea: f64,
    /// Energy of the intermediate `|−1,−½,↓⟩`.
    pub eb: f64,
    pub b_match: f64,
}

/// Second-order estimate of the narrow gap between `|0,+½,↓⟩` and
/// `|−1,−½,↑⟩`, summed over the two intermediates `|0,+½,↑⟩` and
/// `|−1,−½,↓⟩`, with every factor read from the assembled Hamiltonian.
///
/// The estimate is always evaluated for the aligned field with hosts and
/// bystanders removed.
pub fn gap_estimates(cfg: &ClusterConfig) -> Result<GapEstimate> {
    let mut aligned = cfg.clone();
    aligned.field_theta = 0.0;
    aligned.field_phi = 0.0;
    aligned.include_hosts = false;
    aligned.include_bystander = false;
    aligned
        .couplings
        .retain(|c| c.a != SiteRole::Bystander && c.b != SiteRole::Bystander);

    let b_m = matching_field(&aligned)?;
    let h = ClusterHamiltonian::new(&aligned)?.at(b_m);
    let [up, b, a, d] = subspace_basis(&aligned.layout())?;

    let e0 = h[(b, b)].re;
    let ea = h[(up, up)].re;
    let eb = h[(d, d)].re;
    for den in [e0 - ea, e0 - eb] {
        if den.abs() < 1e-9 {
            return Err(Error::DegenerateDenominator(den));
        }
    }
    let j_a = h[(a, up)] * h[(up, b)] / (e0 - ea);
    let j_b = h[(a, d)] * h[(d, b)] / (e0 - eb);
    let j_virtual = j_a + j_b;
    let v_dq = h[(up, a)];
    Ok(GapEstimate {
        delta0: 2.0 * v_dq.norm(),
        delta1: 2.0 * j_virtual.norm(),
        z1: z1(&aligned),
        z2: z2(&aligned),
        v_ss: h[(up, b)],
        v_dq,
        j_virtual,
        e0,
        ea,
        eb,
        b_match: b_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigh;
    use crate::model::{exact_subspace_matrix, ClusterConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn aligned_matching_field_near_51_mt() {
        let mut cfg = ClusterConfig::three_spin(0.0, 0.0);
        cfg.couplings.clear();
        let b = matching_field(&cfg).unwrap();
        let k = cfg.constants;
        assert_abs_diff_eq!(b, k.d / (2.0 * k.gamma_e + k.gamma_h), epsilon = 1e-12);
        assert!((b - 51.2).abs() < 0.3);
        assert!(matching_residual_mhz(&cfg, b).abs() < 1e-6);
    }

    #[test]
    fn secular_shift_is_sub_microtesla() {
        let free = matching_field(&ClusterConfig::three_spin(0.0, 0.0)).unwrap();
        let coupled = ClusterConfig::three_spin(0.5, 0.2);
        let b = matching_field(&coupled).unwrap();
        let k = coupled.constants;
        let expect = z1(&coupled) / 2.0 / (2.0 * k.gamma_e + k.gamma_h);
        assert_abs_diff_eq!(b - free, expect, epsilon = 1e-12);
        assert!((b - free).abs() < 1e-2);
        assert!(matching_residual_mhz(&coupled, b).abs() < 1e-6);
    }

    #[test]
    fn tilted_matching_field_in_range_and_continuous() {
        let base = ClusterConfig::three_spin(0.5, 0.2);
        let near0 = matching_field(&base.clone().with_field_angles(1e-6, 0.0)).unwrap();
        assert!((near0 - base.constants.d / (2.0 * base.constants.gamma_e)).abs() < 1e-4);
        let mut last = near0;
        for deg in 1..=39 {
            let b = matching_field(&base.clone().with_field_angles((deg as f64).to_radians(), 0.3)).unwrap();
            assert!((50.0..=90.0).contains(&b), "{deg}° -> {b}");
            assert!(b >= last - 1e-9);
            last = b;
        }
        let b40 = matching_field(&base.with_field_angles(40f64.to_radians(), 0.0)).unwrap();
        assert!(b40 > last && b40 < 91.0);
    }

    #[test]
    fn no_root_reported() {
        let cfg = ClusterConfig::three_spin(0.5, 0.2).with_field_angles(std::f64::consts::FRAC_PI_2, 0.0);
        assert!(matches!(matching_field(&cfg), Err(Error::NoMatchingField { .. })));
    }

    #[test]
    fn gaps_vanish_in_aligned_geometries() {
        let mut cfg = ClusterConfig::three_spin(0.5, 0.2);
        cfg.coupling_mut(SiteRole::Proton, SiteRole::P1).unwrap().theta = 0.0;
        let g = gap_estimates(&cfg).unwrap();
        assert!(g.delta0 > 0.1);
        assert!(g.delta1 < 1e-15);

        let mut cfg = ClusterConfig::three_spin(0.5, 0.2);
        cfg.coupling_mut(SiteRole::Nv, SiteRole::P1).unwrap().theta = 0.0;
        let g = gap_estimates(&cfg).unwrap();
        assert!(g.delta0 < 1e-15 && g.delta1 < 1e-15);
    }

    #[test]
    fn gap_values_at_default_geometry() {
        let g = gap_estimates(&ClusterConfig::three_spin(0.5, 0.2)).unwrap();
        // √2 · (3/4)(1/2) · 0.5 MHz
        assert_abs_diff_eq!(g.delta0 / 2.0, 2f64.sqrt() * 0.375 * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.e0 - g.ea, g.b_match * 0.042577 - g.z2 / 2.0, epsilon = 1e-9);
    }

    /// Scan the exact four-state spectrum around the narrow crossing and
    /// compare its minimum splitting to the second-order estimate.
    #[test]
    fn narrow_gap_matches_exact_scan() {
        for (j1, j2) in [(0.5, 0.2), (0.5, 0.1), (0.35, 0.25)] {
            let cfg = ClusterConfig::three_spin(j1, j2);
            let g = gap_estimates(&cfg).unwrap();
            let exact = min_splitting(&cfg, g.b_match, 1, 2);
            let rel = (g.delta1 - exact).abs() / exact;
            assert!(rel < 0.3, "J=({j1},{j2}): estimate {} exact {exact}", g.delta1);
        }
    }

    fn min_splitting(cfg: &ClusterConfig, centre: f64, lo: usize, hi: usize) -> f64 {
        let gap = |b: f64| {
            let e = eigh(&exact_subspace_matrix(cfg, b)).values;
            e[hi] - e[lo]
        };
        let (mut a, mut b) = (centre - 0.05, centre + 0.05);
        let mut best = f64::INFINITY;
        let mut arg = centre;
        for k in 0..=4000 {
            let x = a + (b - a) * k as f64 / 4000.0;
            let g = gap(x);
            if g < best {
                best = g;
                arg = x;
            }
        }
        a = arg - 1e-4;
        b = arg + 1e-4;
        for _ in 0..200 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if gap(m1) < gap(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        gap(0.5 * (a + b)).min(best)
    }
}
