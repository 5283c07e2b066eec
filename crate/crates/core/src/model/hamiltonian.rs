use num_complex::Complex64;

use super::{ClusterConfig, DipolarCoupling, SiteRole};
use crate::error::{Error, Result};
use crate::spin::{embed, spin_operators_twice, CMatrix, HilbertLayout, SpinOperatorSet};

/// Geometric factors `(g0, g1, g2)` of the point-dipole coupling.
pub fn dipolar_geometry(theta: f64, phi: f64) -> (f64, Complex64, Complex64) {
    let (s, c) = theta.sin_cos();
    let g0 = 1.0 - 3.0 * c * c;
    let g1 = Complex64::from_polar(-1.5 * s * c, -phi);
    let g2 = Complex64::from_polar(-0.75 * s * s, -2.0 * phi);
    (g0, g1, g2)
}

fn ops_for(layout: &HilbertLayout, role: SiteRole) -> Result<(usize, SpinOperatorSet)> {
    let idx = layout
        .index_of(role.label())
        .ok_or_else(|| Error::MissingSite(role.label().to_string()))?;
    Ok((idx, spin_operators_twice(layout.sites()[idx].two_s)))
}

/// Point-dipole Hamiltonian for one coupling, embedded in the full space.
pub fn dipolar_hamiltonian(c: &DipolarCoupling, layout: &HilbertLayout) -> Result<CMatrix> {
    let n = layout.dim();
    if c.j == 0.0 {
        return Ok(CMatrix::zeros(n, n));
    }
    let (ia, a) = ops_for(layout, c.a)?;
    let (ib, b) = ops_for(layout, c.b)?;
    let az = embed(&a.sz, ia, layout)?;
    let ap = embed(&a.splus, ia, layout)?;
    let am = embed(&a.sminus, ia, layout)?;
    let bz = embed(&b.sz, ib, layout)?;
    let bp = embed(&b.splus, ib, layout)?;
    let bm = embed(&b.sminus, ib, layout)?;

    let (g0, g1, g2) = dipolar_geometry(c.theta, c.phi);
    let secular = &az * &bz - (&am * &bp + &ap * &bm).scale(0.25);
    let mut h = secular.scale(g0);
    h += (&ap * &bz + &az * &bp) * g1;
    h += (&am * &bz + &az * &bm) * g1.conj();
    h += (&ap * &bp) * g2;
    h += (&am * &bm) * g2.conj();
    Ok(h * Complex64::new(c.j, 0.0))
}

/// `H(B) = static + B · zeeman`, precomputed for a fixed cluster.
#[derive(Debug, Clone)]
pub struct ClusterHamiltonian {
    pub layout: HilbertLayout,
    pub static_part: CMatrix,
    /// Field-proportional part, MHz per mT.
    pub zeeman: CMatrix,
}

impl ClusterHamiltonian {
    pub fn new(cfg: &ClusterConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let n = layout.dim();
        let k = &cfg.constants;
        let (st, ct) = cfg.field_theta.sin_cos();
        let (sp, cp) = cfg.field_phi.sin_cos();
        let dir = [st * cp, st * sp, ct];

        let mut stat = CMatrix::zeros(n, n);
        let mut zee = CMatrix::zeros(n, n);

        for (idx, role) in cfg.roles().into_iter().enumerate() {
            let ops = spin_operators_twice(role.two_s());
            let projected = &ops.sx * c(dir[0]) + &ops.sy * c(dir[1]) + &ops.sz * c(dir[2]);
            let gamma = match role {
                SiteRole::Nv | SiteRole::P1 | SiteRole::Bystander => k.gamma_e,
                SiteRole::Proton => -k.gamma_h,
                SiteRole::NvHost | SiteRole::P1Host => -k.gamma_n,
            };
            zee += embed(&projected, idx, &layout)? * c(gamma);
            if role == SiteRole::Nv {
                stat += embed(&(&ops.sz * &ops.sz), idx, &layout)? * c(k.d);
            }
        }

        if cfg.include_hosts {
            for (electron, host, t) in [
                (SiteRole::Nv, SiteRole::NvHost, &cfg.hyperfine.nv),
                (SiteRole::P1, SiteRole::P1Host, &cfg.hyperfine.p1),
            ] {
                let (ie, e) = ops_for(&layout, electron)?;
                let (ih, h) = ops_for(&layout, host)?;
                let ecart = [&e.sx, &e.sy, &e.sz];
                let hcart = [&h.sx, &h.sy, &h.sz];
                let mut quad = CMatrix::zeros(h.dim(), h.dim());
                for i in 0..3 {
                    for j in 0..3 {
                        if t.a[i][j] != 0.0 {
                            let ei = embed(ecart[i], ie, &layout)?;
                            let hj = embed(hcart[j], ih, &layout)?;
                            stat += (ei * hj) * c(t.a[i][j]);
                        }
                        if t.q[i][j] != 0.0 {
                            quad += (hcart[i] * hcart[j]) * c(t.q[i][j]);
                        }
                    }
                }
                stat += embed(&quad, ih, &layout)?;
            }
        }

        for cp in &cfg.couplings {
            stat += dipolar_hamiltonian(cp, &layout)?;
        }

        Ok(Self {
            layout,
            static_part: stat,
            zeeman: zee,
        })
    }

    pub fn at(&self, b: f64) -> CMatrix {
        &self.static_part + &self.zeeman * c(b)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
}

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// Full cluster Hamiltonian at field `b` (mT), in MHz.
pub fn assemble_hamiltonian(cfg: &ClusterConfig, b: f64) -> Result<CMatrix> {
    if !(b.is_finite() && b >= 0.0) {
        return Err(Error::param("B_mT", "field must be finite and >= 0"));
    }
    Ok(ClusterHamiltonian::new(cfg)?.at(b))
}

/// Global indices of `|0,+½,↑⟩, |0,+½,↓⟩, |−1,−½,↑⟩, |−1,−½,↓⟩` in a three-spin layout.
pub fn subspace_basis(layout: &HilbertLayout) -> Result<[usize; 4]> {
    if layout.len() != 3 {
        return Err(Error::param(
            "layout",
            "the four-state subspace is defined for the NV-P1-H cluster only",
        ));
    }
    let pick = |m: [f64; 3]| {
        layout
            .index_of_projections(&m)
            .ok_or_else(|| Error::param("layout", "unexpected site spins"))
    };
    Ok([
        pick([0.0, 0.5, 0.5])?,
        pick([0.0, 0.5, -0.5])?,
        pick([-1.0, -0.5, 0.5])?,
        pick([-1.0, -0.5, -0.5])?,
    ])
}

struct SubspaceParams {
    ws: f64,
    wi: f64,
    d: f64,
    z1: f64,
    z2: f64,
    g1_2: Complex64,
    g2_1: Complex64,
    j1: f64,
    j2: f64,
}

fn subspace_params(cfg: &ClusterConfig, b: f64) -> SubspaceParams {
    let (j1, t1, p1) = cfg
        .coupling(SiteRole::Nv, SiteRole::P1)
        .map_or((0.0, 0.0, 0.0), |c| (c.j, c.theta, c.phi));
    let (j2, t2, p2) = cfg
        .coupling(SiteRole::Proton, SiteRole::P1)
        .map_or((0.0, 0.0, 0.0), |c| (c.j, c.theta, c.phi));
    let (g0_1, _, g2_1) = dipolar_geometry(t1, p1);
    let (g0_2, g1_2, _) = dipolar_geometry(t2, p2);
    SubspaceParams {
        ws: cfg.constants.gamma_e * b,
        wi: cfg.constants.gamma_h * b,
        d: cfg.constants.d,
        z1: g0_1 * j1,
        z2: g0_2 * j2,
        g1_2,
        g2_1,
        j1,
        j2,
    }
}

fn hermitian4(diag: [f64; 4], upper: [(usize, usize, Complex64); 4]) -> CMatrix {
    let mut m = CMatrix::zeros(4, 4);
    for (i, d) in diag.into_iter().enumerate() {
        m[(i, i)] = c(d);
    }
    for (i, j, v) in upper {
        m[(i, j)] = v;
        m[(j, i)] = v.conj();
    }
    m
}

/// The aligned-field four-state matrix in its commonly printed closed form:
/// `V_SS = g1·J_HP1`, `V_DQ = g2·J_NVP1` and `−Z1/2` on the `|−1,−½,↑⟩` diagonal.
pub fn printed_subspace_matrix(cfg: &ClusterConfig, b: f64) -> CMatrix {
    let p = subspace_params(cfg, b);
    let vss = p.g1_2 * p.j2;
    let vdq = p.g2_1 * p.j1;
    hermitian4(
        [
            p.ws / 2.0 - p.wi / 2.0 + p.z2 / 4.0,
            p.ws / 2.0 + p.wi / 2.0 - p.z2 / 4.0,
            -1.5 * p.ws - p.wi / 2.0 + p.d - p.z2 / 4.0 - p.z1 / 2.0,
            -1.5 * p.ws + p.wi / 2.0 + p.d + p.z2 / 4.0 + p.z1 / 2.0,
        ],
        [(0, 1, vss), (0, 2, vdq), (1, 3, vdq), (2, 3, vss)],
    )
}

/// The aligned-field four-state block evaluated from the operator algebra:
/// the double-quantum element carries the spin-1 ladder factor √2, the
/// proton flip element is `g1·J_HP1·m_P1` and changes sign with the P1 state.
pub fn exact_subspace_matrix(cfg: &ClusterConfig, b: f64) -> CMatrix {
    let p = subspace_params(cfg, b);
    let vss = p.g1_2 * (p.j2 / 2.0);
    let vdq = p.g2_1 * (std::f64::consts::SQRT_2 * p.j1);
    hermitian4(
        [
            p.ws / 2.0 - p.wi / 2.0 + p.z2 / 4.0,
            p.ws / 2.0 + p.wi / 2.0 - p.z2 / 4.0,
            -1.5 * p.ws - p.wi / 2.0 + p.d - p.z2 / 4.0 + p.z1 / 2.0,
            -1.5 * p.ws + p.wi / 2.0 + p.d + p.z2 / 4.0 + p.z1 / 2.0,
        ],
        [(0, 1, vss), (0, 2, vdq), (1, 3, vdq), (2, 3, -vss)],
    )
}
