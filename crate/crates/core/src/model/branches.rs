use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hamiltonian::ClusterHamiltonian;
use super::ClusterConfig;
use crate::error::{Error, Result};
use crate::linalg::{eigh, Eigen};
use crate::spin::CMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchOptions {
    /// Minima of neighbouring-level splittings above this value are not reported, MHz.
    pub max_gap_mhz: f64,
    /// Relative tolerance for treating eigenvalues as degenerate.
    pub degeneracy_tol: f64,
}

impl Default for BranchOptions {
    fn default() -> Self {
        Self {
            max_gap_mhz: 5.0,
            degeneracy_tol: 1e-9,
        }
    }
}

/// A local minimum of the splitting between two neighbouring levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub field: f64,
    pub gap: f64,
    /// Field interval over which the splitting stays within twice `gap`.
    pub width: f64,
    /// Tracked branch indices (lower, upper) at the minimum.
    pub branches: (usize, usize),
    /// Sorted level index of the lower partner.
    pub level: usize,
}

#[derive(Debug, Clone)]
pub struct BranchDiagram {
    pub fields: Vec<f64>,
    /// `energies[point][branch]`, MHz.
    pub energies: Vec<Vec<f64>>,
    /// Dominant product state of each branch at the first field.
    pub labels: Vec<String>,
    pub crossings: Vec<Crossing>,
}

impl BranchDiagram {
    pub fn n_branches(&self) -> usize {
        self.labels.len()
    }
}

/// Eigenvalues along a field grid with continuity assigned by eigenvector overlap.
pub fn eigen_branches(
    cfg: &ClusterConfig,
    grid: &[f64],
    opts: &BranchOptions,
) -> Result<BranchDiagram> {
    if grid.len() < 2 {
        return Err(Error::param("B_grid", "needs at least two points"));
    }
    let increasing = grid.windows(2).all(|w| w[1] > w[0]);
    let decreasing = grid.windows(2).all(|w| w[1] < w[0]);
    if !(increasing || decreasing) || grid.iter().any(|b| !b.is_finite()) {
        return Err(Error::param("B_grid", "must be strictly monotone and finite"));
    }
    let ham = ClusterHamiltonian::new(cfg)?;
    let layout = ham.layout.clone();
    let n = ham.dim();

    let eigs: Vec<Eigen> = grid.par_iter().map(|&b| eigh(&ham.at(b))).collect();

    let labels = (0..n)
        .map(|k| {
            let col = eigs[0].vectors.column(k);
            let (best, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, z)| if z.norm_sqr() > acc.1 { (i, z.norm_sqr()) } else { acc });
            layout.ket_label(best)
        })
        .collect();

    let mut energies = Vec::with_capacity(grid.len());
    // slot[k] = sorted index occupied by branch k at the current point
    let mut slots: Vec<Vec<usize>> = Vec::with_capacity(grid.len());
    energies.push(eigs[0].values.clone());
    slots.push((0..n).collect());
    let mut tracked = eigs[0].vectors.clone();

    for p in 1..grid.len() {
        let e = &eigs[p];
        let vecs = rebasis_degenerate(&tracked, e, opts.degeneracy_tol);
        let ov = (tracked.adjoint() * &vecs).map(|z| z.norm_sqr());
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
        for k in 0..n {
            for j in 0..n {
                pairs.push((ov[(k, j)], k, j));
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut branch_of_new = vec![usize::MAX; n];
        let mut new_of_branch = vec![usize::MAX; n];
        let mut weakest = f64::INFINITY;
        for (o, k, j) in pairs {
            if new_of_branch[k] == usize::MAX && branch_of_new[j] == usize::MAX {
                new_of_branch[k] = j;
                branch_of_new[j] = k;
                weakest = weakest.min(o);
            }
        }
        if weakest < 0.5 {
            return Err(Error::OverlapAmbiguity {
                field: grid[p],
                overlap: weakest,
            });
        }
        energies.push((0..n).map(|k| e.values[new_of_branch[k]]).collect());
        slots.push(new_of_branch.clone());
        tracked = CMatrix::from_fn(n, n, |i, k| vecs[(i, new_of_branch[k])]);
    }

    let crossings = find_crossings(&ham, grid, &eigs, &slots, opts);
    Ok(BranchDiagram {
        fields: grid.to_vec(),
        energies,
        labels,
        crossings,
    })
}

/// Within every cluster of degenerate eigenvalues, replace the solver's
/// arbitrary basis by the orthonormalized projections of the previous
/// tracked vectors that overlap the cluster most.
fn rebasis_degenerate(prev: &CMatrix, e: &Eigen, tol: f64) -> CMatrix {
    let n = e.values.len();
    let scale = e.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut out = e.vectors.clone();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && e.values[end] - e.values[end - 1] <= tol * scale {
            end += 1;
        }
        let m = end - start;
        if m > 1 {
            let sub = e.vectors.columns(start, m).into_owned();
            let proj = sub.adjoint() * prev; // m × n coefficients
            let mut weights: Vec<(f64, usize)> = (0..prev.ncols())
                .map(|k| (proj.column(k).norm_squared(), k))
                .collect();
            weights.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut basis: Vec<nalgebra::DVector<num_complex::Complex64>> = Vec::with_capacity(m);
            for &(w, k) in &weights {
                if basis.len() == m || w < 1e-12 {
                    break;
                }
                let mut v = &sub * proj.column(k);
                for q in &basis {
                    let c = q.dotc(&v);
                    v -= q * c;
                }
                let nv = v.norm();
                if nv > 1e-6 {
                    basis.push(v / num_complex::Complex64::new(nv, 0.0));
                }
            }
            if basis.len() == m {
                for (i, v) in basis.iter().enumerate() {
                    out.set_column(start + i, v);
                }
            }
        }
        start = end;
    }
    out
}

fn find_crossings(
    ham: &ClusterHamiltonian,
    grid: &[f64],
    eigs: &[Eigen],
    slots: &[Vec<usize>],
    opts: &BranchOptions,
) -> Vec<Crossing> {
    let n = ham.dim();
    let mut out = Vec::new();
    let splitting = |b: f64, lvl: usize| {
        let e = eigh(&ham.at(b)).values;
        e[lvl + 1] - e[lvl]
    };
    for lvl in 0..n - 1 {
        let g: Vec<f64> = eigs.iter().map(|e| e.values[lvl + 1] - e.values[lvl]).collect();
        for p in 1..grid.len() - 1 {
            if !(g[p] <= g[p - 1] && g[p] < g[p + 1]) || g[p] > opts.max_gap_mhz {
                continue;
            }
            let (mut a, mut b) = (grid[p - 1].min(grid[p + 1]), grid[p - 1].max(grid[p + 1]));
            let phi = 0.5 * (5f64.sqrt() - 1.0);
            let mut x1 = b - phi * (b - a);
            let mut x2 = a + phi * (b - a);
            let mut f1 = splitting(x1, lvl);
            let mut f2 = splitting(x2, lvl);
            for _ in 0..80 {
                if f1 < f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    f1 = splitting(x1, lvl);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    f2 = splitting(x2, lvl);
                }
                if (b - a).abs() < 1e-12 {
                    break;
                }
            }
            let field = 0.5 * (a + b);
            let gap = splitting(field, lvl).min(g[p]);
            let width = half_width(&splitting, lvl, field, 2.0 * gap, grid[p + 1] - grid[p - 1])
                + half_width(&splitting, lvl, field, 2.0 * gap, grid[p - 1] - grid[p + 1]);
            let lower = slots[p].iter().position(|&s| s == lvl).unwrap_or(lvl);
            let upper = slots[p].iter().position(|&s| s == lvl + 1).unwrap_or(lvl + 1);
            out.push(Crossing {
                field,
                gap,
                width,
                branches: (lower, upper),
                level: lvl,
            });
        }
    }
    out.sort_by(|a, b| a.field.total_cmp(&b.field).then(a.level.cmp(&b.level)));
    out
}

/// Distance from `x0` along `dir` until the splitting exceeds `limit`, by bisection.
fn half_width(f: &dyn Fn(f64, usize) -> f64, lvl: usize, x0: f64, limit: f64, dir: f64) -> f64 {
    if limit <= 0.0 {
        return 0.0;
    }
    let mut step = dir.abs().max(1e-9) * dir.signum();
    let mut grow = 0;
    while f(x0 + step, lvl) <= limit && grow < 40 {
        step *= 2.0;
        grow += 1;
    }
    let (mut lo, mut hi) = (0.0, step.abs());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(x0 + mid * dir.signum(), lvl) <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gap_estimates, matching_field};

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn uncoupled_branches_are_straight() {
        let mut cfg = ClusterConfig::three_spin(0.0, 0.0);
        cfg.couplings.clear();
        let grid = linspace(50.0, 52.5, 101);
        let d = eigen_branches(&cfg, &grid, &BranchOptions::default()).unwrap();
        for k in 0..d.n_branches() {
            let e: Vec<f64> = d.energies.iter().map(|r| r[k]).collect();
            let slope = (e[100] - e[0]) / (grid[100] - grid[0]);
            for (p, &b) in grid.iter().enumerate() {
                assert!((e[0] + slope * (b - grid[0]) - e[p]).abs() < 1e-8);
            }
        }
        assert!(d.crossings.iter().filter(|c| c.gap < 1e-6).count() >= 4);
    }

    #[test]
    fn coupled_central_structure() {
        let cfg = ClusterConfig::three_spin(0.5, 0.2);
        let g = gap_estimates(&cfg).unwrap();
        let bm = matching_field(&cfg).unwrap();
        let grid = linspace(bm - 0.1, bm + 0.1, 801);
        let d = eigen_branches(&cfg, &grid, &BranchOptions { max_gap_mhz: 1.0, ..Default::default() }).unwrap();
        let narrow: Vec<_> = d.crossings.iter().filter(|c| c.gap < 0.1).collect();
        let wide: Vec<_> = d.crossings.iter().filter(|c| c.gap >= 0.1).collect();
        assert_eq!(narrow.len(), 2, "{:?}", d.crossings);
        assert!(wide.len() >= 2, "{:?}", d.crossings);
        // Δ0 minima within 10 % of 2|V_DQ|
        for w in &wide[..2] {
            assert!((w.gap - g.delta0).abs() / g.delta0 < 0.1, "{} vs {}", w.gap, g.delta0);
        }
        // narrow crossings sit between the wide ones
        let lo = wide.iter().map(|c| c.field).fold(f64::INFINITY, f64::min);
        let hi = wide.iter().map(|c| c.field).fold(f64::NEG_INFINITY, f64::max);
        for c in &narrow {
            assert!(c.width > 0.0);
            assert!(c.field > lo - 0.05 && c.field < hi + 0.05);
        }
    }

    #[test]
    fn coarse_grid_is_rejected_or_tracked() {
        let cfg = ClusterConfig::three_spin(0.5, 0.2);
        assert!(eigen_branches(&cfg, &[51.0], &BranchOptions::default()).is_err());
        assert!(eigen_branches(&cfg, &[51.0, 50.0, 52.0], &BranchOptions::default()).is_err());
    }

    #[test]
    fn eigenvalue_sum_is_trace() {
        let cfg = ClusterConfig::three_spin(0.5, 0.2);
        let ham = ClusterHamiltonian::new(&cfg).unwrap();
        let grid = linspace(50.9, 51.4, 11);
        let d = eigen_branches(&cfg, &grid, &BranchOptions::default()).unwrap();
        for (p, &b) in grid.iter().enumerate() {
            let tr = ham.at(b).trace().re;
            let s: f64 = d.energies[p].iter().sum();
            assert!((tr - s).abs() < 1e-8 * tr.abs().max(1.0));
        }
    }

    #[test]
    fn hosts_give_nine_fold_structure() {
        let cfg = ClusterConfig::three_spin(0.5, 0.2).with_hosts(true);
        let d = eigen_branches(&cfg, &linspace(45.0, 46.0, 3), &BranchOptions::default()).unwrap();
        assert_eq!(d.n_branches(), 108);
        assert_eq!(d.n_branches() / 12, 9);
    }
}
