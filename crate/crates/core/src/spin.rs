//! Angular-momentum matrices and tensor-product embedding.
//!
//! Basis ordering within a site is by descending projection: index 0 is
//! `m = s`, the last index is `m = -s`. The global basis is the Kronecker
//! product of the site bases in layout order, with the first site varying
//! slowest.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);

/// Dense spin-s operators in units of ħ.
#[derive(Debug, Clone)]
pub struct SpinOperatorSet {
    /// Twice the spin quantum number.
    pub two_s: u32,
    pub sz: CMatrix,
    pub splus: CMatrix,
    pub sminus: CMatrix,
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub identity: CMatrix,
}

impl SpinOperatorSet {
    pub fn s(&self) -> f64 {
        self.two_s as f64 / 2.0
    }

    pub fn dim(&self) -> usize {
        self.two_s as usize + 1
    }

    /// Projection quantum number of basis index `k`.
    pub fn m(&self, k: usize) -> f64 {
        self.s() - k as f64
    }
}

/// Builds the spin-`s` operators. `s` must be a non-negative multiple of 1/2.
pub fn spin_operators(s: f64) -> Result<SpinOperatorSet> {
    let two_s = 2.0 * s;
    if !s.is_finite() || s < 0.0 || (two_s - two_s.round()).abs() > 1e-12 {
        return Err(Error::InvalidSpin(s));
    }
    Ok(spin_operators_twice(two_s.round() as u32))
}

/// Same as [`spin_operators`] but takes `2s` directly.
pub fn spin_operators_twice(two_s: u32) -> SpinOperatorSet {
    let dim = two_s as usize + 1;
    let s = two_s as f64 / 2.0;
    let mut sz = CMatrix::zeros(dim, dim);
    let mut splus = CMatrix::zeros(dim, dim);
    for k in 0..dim {
        let m = s - k as f64;
        sz[(k, k)] = Complex64::new(m, 0.0);
        // <m+1| S+ |m> sits at row k-1, column k.
        if k > 0 {
            let amp = (s * (s + 1.0) - m * (m + 1.0)).sqrt();
            splus[(k - 1, k)] = Complex64::new(amp, 0.0);
        }
    }
    let sminus = splus.adjoint();
    let sx = (&splus + &sminus).scale(0.5);
    let sy = (&splus - &sminus) * Complex64::new(0.0, -0.5);
    SpinOperatorSet {
        two_s,
        sz,
        splus,
        sminus,
        sx,
        sy,
        identity: CMatrix::identity(dim, dim),
    }
}

/// A named spin site in the cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub label: String,
    pub two_s: u32,
}

impl Site {
    pub fn new(label: impl Into<String>, two_s: u32) -> Self {
        Self {
            label: label.into(),
            two_s,
        }
    }

    pub fn dim(&self) -> usize {
        self.two_s as usize + 1
    }
}

/// Ordered list of sites spanning the product Hilbert space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilbertLayout {
    sites: Vec<Site>,
}

impl HilbertLayout {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        for (i, a) in sites.iter().enumerate() {
            if sites[..i].iter().any(|b| b.label == a.label) {
                return Err(Error::DuplicateSite(a.label.clone()));
            }
        }
        Ok(Self { sites })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sites.iter().map(Site::dim).product()
    }

    pub fn site_dim(&self, site: usize) -> usize {
        self.sites[site].dim()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.label == label)
    }

    /// Number of global basis states spanned by the sites after `site`.
    pub fn stride(&self, site: usize) -> usize {
        self.sites[site + 1..].iter().map(Site::dim).product()
    }

    /// Local basis indices of every site for global basis index `idx`.
    pub fn decompose(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.sites.len()];
        for (k, site) in self.sites.iter().enumerate().rev() {
            out[k] = idx % site.dim();
            idx /= site.dim();
        }
        out
    }

    /// Inverse of [`decompose`](Self::decompose).
    pub fn compose(&self, local: &[usize]) -> usize {
        local
            .iter()
            .zip(&self.sites)
            .fold(0, |acc, (&k, site)| acc * site.dim() + k)
    }

    /// Global basis index of the product state with the given projections.
    pub fn index_of_projections(&self, m: &[f64]) -> Option<usize> {
        if m.len() != self.sites.len() {
            return None;
        }
        let mut local = Vec::with_capacity(m.len());
        for (mk, site) in m.iter().zip(&self.sites) {
            let k = (site.two_s as f64 / 2.0 - mk).round();
            if k < 0.0 || k as usize >= site.dim() || (site.two_s as f64 / 2.0 - mk - k).abs() > 1e-9
            {
                return None;
            }
            local.push(k as usize);
        }
        Some(self.compose(&local))
    }

    /// Projection quantum numbers of a global basis state.
    pub fn projections(&self, idx: usize) -> Vec<f64> {
        self.decompose(idx)
            .into_iter()
            .zip(&self.sites)
            .map(|(k, site)| site.two_s as f64 / 2.0 - k as f64)
            .collect()
    }

    /// Ket label such as `|0,+1/2,-1/2>`.
    pub fn ket_label(&self, idx: usize) -> String {
        let parts: Vec<String> = self
            .projections(idx)
            .into_iter()
            .map(format_projection)
            .collect();
        format!("|{}>", parts.join(","))
    }
}

fn format_projection(m: f64) -> String {
    let twice = (2.0 * m).round() as i64;
    if twice % 2 == 0 {
        let v = twice / 2;
        if v > 0 {
            format!("+{v}")
        } else {
            v.to_string()
        }
    } else if twice > 0 {
        format!("+{twice}/2")
    } else {
        format!("{twice}/2")
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Embeds a single-site operator as `I ⊗ … ⊗ op ⊗ … ⊗ I`.
pub fn embed(op: &CMatrix, site: usize, layout: &HilbertLayout) -> Result<CMatrix> {
    if site >= layout.len() {
        return Err(Error::SiteOutOfRange {
            site,
            sites: layout.len(),
        });
    }
    let local = layout.site_dim(site);
    if op.nrows() != local || op.ncols() != local {
        return Err(Error::DimensionMismatch {
            expected: local,
            found: op.nrows(),
        });
    }
    let outer = layout.dim() / (local * layout.stride(site));
    let inner = layout.stride(site);
    let n = layout.dim();
    let mut out = CMatrix::zeros(n, n);
    // Block-index arithmetic instead of repeated Kronecker products.
    for o in 0..outer {
        for r in 0..local {
            for c in 0..local {
                let v = op[(r, c)];
                if v == C0 {
                    continue;
                }
                let row0 = (o * local + r) * inner;
                let col0 = (o * local + c) * inner;
                for i in 0..inner {
                    out[(row0 + i, col0 + i)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Product of two single-site operators on distinct sites, embedded.
pub fn embed_pair(
    op_a: &CMatrix,
    site_a: usize,
    op_b: &CMatrix,
    site_b: usize,
    layout: &HilbertLayout,
) -> Result<CMatrix> {
    let a = embed(op_a, site_a, layout)?;
    let b = embed(op_b, site_b, layout)?;
    Ok(a * b)
}

/// Identity on the full layout.
pub fn identity(layout: &HilbertLayout) -> CMatrix {
    let n = layout.dim();
    CMatrix::from_fn(n, n, |i, j| if i == j { C1 } else { C0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn spin_half_sz() {
        let ops = spin_operators(0.5).unwrap();
        assert_eq!(ops.sz[(0, 0)].re, 0.5);
        assert_eq!(ops.sz[(1, 1)].re, -0.5);
    }

    #[test]
    fn spin_one_matrices() {
        let ops = spin_operators(1.0).unwrap();
        let diag: Vec<f64> = (0..3).map(|k| ops.sz[(k, k)].re).collect();
        assert_eq!(diag, vec![1.0, 0.0, -1.0]);
        // sqrt(s(s+1) - m(m+1)) for m = 0 and m = -1
        assert_abs_diff_eq!(ops.splus[(0, 1)].re, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(ops.splus[(1, 2)].re, 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(ops.splus[(0, 2)], C0);
    }

    #[test]
    fn rejects_bad_spin() {
        assert!(matches!(spin_operators(-0.5), Err(Error::InvalidSpin(_))));
        assert!(matches!(spin_operators(0.3), Err(Error::InvalidSpin(_))));
        assert!(matches!(spin_operators(f64::NAN), Err(Error::InvalidSpin(_))));
        assert!(spin_operators(0.0).is_ok());
    }

    #[test]
    fn algebra_holds_up_to_three_halves() {
        for two_s in 0..=3 {
            let o = spin_operators_twice(two_s);
            let comm = &o.sx * &o.sy - &o.sy * &o.sx;
            let resid = comm - o.sz.map(|z| z * Complex64::i());
            assert!(max_abs(&resid) < 1e-12);
            let sp = &o.sx + o.sy.map(|z| z * Complex64::i());
            assert!(max_abs(&(sp - &o.splus)) < 1e-12);
            assert!(max_abs(&(o.splus.adjoint() - &o.sminus)) < 1e-12);
            for m in [&o.sx, &o.sy, &o.sz] {
                assert!(max_abs(&(m.adjoint() - m)) < 1e-12);
            }
        }
    }

    fn nv_p1_h() -> HilbertLayout {
        HilbertLayout::new(vec![Site::new("NV", 2), Site::new("P1", 1), Site::new("H", 1)]).unwrap()
    }

    #[test]
    fn layout_rules() {
        let l = nv_p1_h();
        assert_eq!(l.dim(), 12);
        assert!(HilbertLayout::new(vec![Site::new("a", 1), Site::new("a", 1)]).is_err());
        let idx = l.index_of_projections(&[-1.0, -0.5, 0.5]).unwrap();
        assert_eq!(l.projections(idx), vec![-1.0, -0.5, 0.5]);
        assert_eq!(l.ket_label(idx), "|-1,-1/2,+1/2>");
        assert!(l.index_of_projections(&[2.0, 0.5, 0.5]).is_none());
    }

    #[test]
    fn embed_identity_and_commutation() {
        let l = nv_p1_h();
        let nv = spin_operators(1.0).unwrap();
        let p1 = spin_operators(0.5).unwrap();
        let id = embed(&nv.identity, 0, &l).unwrap();
        assert!(max_abs(&(id - identity(&l))) == 0.0);
        let a = embed(&nv.sz, 0, &l).unwrap();
        let b = embed(&p1.sz, 1, &l).unwrap();
        assert!(max_abs(&(&a * &b - &b * &a)) == 0.0);
        // trace multiplicativity
        let tr: Complex64 = embed(&p1.sz, 2, &l).unwrap().trace();
        assert_eq!(tr, p1.sz.trace() * 6.0);
    }

    #[test]
    fn embed_errors() {
        let l = nv_p1_h();
        let p1 = spin_operators(0.5).unwrap();
        assert!(matches!(
            embed(&p1.sz, 3, &l),
            Err(Error::SiteOutOfRange { .. })
        ));
        assert!(matches!(
            embed(&p1.sz, 0, &l),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn layout_strategy() -> impl Strategy<Value = HilbertLayout> {
        prop::collection::vec(1u32..=3, 1..=3).prop_map(|spins| {
            HilbertLayout::new(
                spins
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| Site::new(format!("s{i}"), t))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn embed_matches_kronecker_index_arithmetic(
            layout in layout_strategy(),
            pick in 0usize..8,
            seed in prop::collection::vec(-1.0f64..1.0, 32),
        ) {
            let site = pick % layout.len();
            let d = layout.site_dim(site);
            let op = CMatrix::from_fn(d, d, |r, c| {
                Complex64::new(seed[(r * d + c) % 32], seed[(r + 3 * c + 7) % 32])
            });
            let big = embed(&op, site, &layout).unwrap();
            // reference via explicit Kronecker chain
            let mut chain: Option<CMatrix> = None;
            for (k, s) in layout.sites().iter().enumerate() {
                let f = if k == site { op.clone() } else { CMatrix::identity(s.dim(), s.dim()) };
                chain = Some(match chain { None => f, Some(acc) => kron(&acc, &f) });
            }
            let chain = chain.unwrap();
            for i in 0..layout.dim() {
                let li = layout.decompose(i);
                for j in 0..layout.dim() {
                    let lj = layout.decompose(j);
                    let others_equal = (0..layout.len()).all(|k| k == site || li[k] == lj[k]);
                    let expect = if others_equal { op[(li[site], lj[site])] } else { C0 };
                    prop_assert_eq!(big[(i, j)], expect);
                    prop_assert_eq!(chain[(i, j)], expect);
                }
            }
        }
    }
}
