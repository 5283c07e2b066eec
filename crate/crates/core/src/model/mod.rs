//! Cluster description and the static physics built on it.

mod branches;
mod gaps;
mod hamiltonian;

pub use branches::{eigen_branches, BranchDiagram, BranchOptions, Crossing};
pub use gaps::{gap_estimates, matching_field, matching_residual_mhz, GapEstimate, MATCH_BRACKET_MT};
pub use hamiltonian::{
    assemble_hamiltonian, dipolar_geometry, dipolar_hamiltonian, exact_subspace_matrix,
    printed_subspace_matrix, subspace_basis, ClusterHamiltonian,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::{HilbertLayout, Site};

/// Stored magnitudes; signs are applied inside the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConstants {
    #[serde(rename = "D_MHz")]
    pub d: f64,
    #[serde(rename = "gamma_e_MHz_per_mT")]
    pub gamma_e: f64,
    #[serde(rename = "gamma_H_MHz_per_mT")]
    pub gamma_h: f64,
    #[serde(rename = "gamma_N_MHz_per_mT")]
    pub gamma_n: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            d: 2870.0,
            gamma_e: 28.025,
            gamma_h: 0.042577,
            gamma_n: 0.003077,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("D_MHz", self.d),
            ("gamma_e_MHz_per_mT", self.gamma_e),
            ("gamma_H_MHz_per_mT", self.gamma_h),
            ("gamma_N_MHz_per_mT", self.gamma_n),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Which physical spin a site represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    Nv,
    P1,
    Proton,
    NvHost,
    P1Host,
    Bystander,
}

impl SiteRole {
    pub fn label(self) -> &'static str {
        match self {
            SiteRole::Nv => "NV",
            SiteRole::P1 => "P1",
            SiteRole::Proton => "H",
            SiteRole::NvHost => "N_NV",
            SiteRole::P1Host => "N_P1",
            SiteRole::Bystander => "B1",
        }
    }

    pub fn two_s(self) -> u32 {
        match self {
            SiteRole::Nv | SiteRole::NvHost | SiteRole::P1Host => 2,
            SiteRole::P1 | SiteRole::Proton | SiteRole::Bystander => 1,
        }
    }

    pub fn is_electron(self) -> bool {
        matches!(self, SiteRole::Nv | SiteRole::P1 | SiteRole::Bystander)
    }
}

/// Point-dipole coupling between two sites. Angles locate the inter-spin axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipolarCoupling {
    pub a: SiteRole,
    pub b: SiteRole,
    #[serde(rename = "j_MHz")]
    pub j: f64,
    #[serde(rename = "theta_rad")]
    pub theta: f64,
    #[serde(rename = "phi_rad")]
    pub phi: f64,
}

impl DipolarCoupling {
    pub fn new(a: SiteRole, b: SiteRole, j: f64, theta: f64, phi: f64) -> Self {
        Self { a, b, j, theta, phi }
    }

    pub fn links(&self, x: SiteRole, y: SiteRole) -> bool {
        (self.a == x && self.b == y) || (self.a == y && self.b == x)
    }
}

/// Electron–host hyperfine and host quadrupole tensors, MHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperfineTensor {
    #[serde(rename = "A_MHz")]
    pub a: [[f64; 3]; 3],
    #[serde(rename = "Q_MHz")]
    pub q: [[f64; 3]; 3],
}

impl HyperfineTensor {
    pub fn isotropic(a: f64) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = a;
        }
        Self {
            a: m,
            q: [[0.0; 3]; 3],
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let finite = self.a.iter().chain(&self.q).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::param(name, "tensor entries must be finite"));
        }
        for i in 0..3 {
            for j in 0..3 {
                if (self.q[i][j] - self.q[j][i]).abs() > 1e-12 {
                    return Err(Error::param(name, "Q must be symmetric"));
                }
            }
        }
        Ok(())
    }
}

/// Nitrogen host couplings used when hosts are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostHyperfine {
    pub nv: HyperfineTensor,
    pub p1: HyperfineTensor,
}

impl Default for HostHyperfine {
    fn default() -> Self {
        Self {
            nv: HyperfineTensor::isotropic(2.0),
            p1: HyperfineTensor::isotropic(115.0),
        }
    }
}

/// Full physical description of the spin cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default)]
    pub constants: PhysicalConstants,
    pub couplings: Vec<DipolarCoupling>,
    #[serde(default)]
    pub hyperfine: HostHyperfine,
    #[serde(rename = "field_theta_rad", default)]
    pub field_theta: f64,
    #[serde(rename = "field_phi_rad", default)]
    pub field_phi: f64,
    #[serde(default)]
    pub include_hosts: bool,
    #[serde(default)]
    pub include_bystander: bool,
}

/// Default inter-spin axis polar angle, radians.
pub const DEFAULT_PAIR_THETA: f64 = std::f64::consts::FRAC_PI_4;

impl ClusterConfig {
    /// NV–P1–¹H cluster with the default geometry: both inter-spin axes at 45°
    /// from the NV axis in the xz-plane, so the proton lies on the NV–P1 line.
    pub fn three_spin(j_nv_p1: f64, j_h_p1: f64) -> Self {
        Self {
            constants: PhysicalConstants::default(),
            couplings: vec![
                DipolarCoupling::new(SiteRole::Nv, SiteRole::P1, j_nv_p1, DEFAULT_PAIR_THETA, 0.0),
                DipolarCoupling::new(SiteRole::Proton, SiteRole::P1, j_h_p1, DEFAULT_PAIR_THETA, 0.0),
            ],
            hyperfine: HostHyperfine::default(),
            field_theta: 0.0,
            field_phi: 0.0,
            include_hosts: false,
            include_bystander: false,
        }
    }

    /// Adds a bystander P1 coupled only to the NV.
    pub fn with_bystander(mut self, j_nv_b1: f64, theta: f64, phi: f64) -> Self {
        self.include_bystander = true;
        self.couplings.retain(|c| c.a != SiteRole::Bystander && c.b != SiteRole::Bystander);
        self.couplings
            .push(DipolarCoupling::new(SiteRole::Nv, SiteRole::Bystander, j_nv_b1, theta, phi));
        self
    }

    pub fn with_hosts(mut self, on: bool) -> Self {
        self.include_hosts = on;
        self
    }

    pub fn with_field_angles(mut self, theta: f64, phi: f64) -> Self {
        self.field_theta = theta;
        self.field_phi = phi;
        self
    }

    /// Site roles in layout order.
    pub fn roles(&self) -> Vec<SiteRole> {
        let mut r = vec![SiteRole::Nv, SiteRole::P1, SiteRole::Proton];
        if self.include_hosts {
            r.push(SiteRole::NvHost);
            r.push(SiteRole::P1Host);
        }
        if self.include_bystander {
            r.push(SiteRole::Bystander);
        }
        r
    }

    pub fn layout(&self) -> HilbertLayout {
        let sites = self
            .roles()
            .into_iter()
            .map(|r| Site::new(r.label(), r.two_s()))
            .collect();
        HilbertLayout::new(sites).expect("role labels are distinct")
    }

    pub fn site_index(&self, role: SiteRole) -> Result<usize> {
        self.roles()
            .iter()
            .position(|&r| r == role)
            .ok_or_else(|| Error::MissingSite(role.label().to_string()))
    }

    /// First coupling between the two roles, if any.
    pub fn coupling(&self, x: SiteRole, y: SiteRole) -> Option<&DipolarCoupling> {
        self.couplings.iter().find(|c| c.links(x, y))
    }

    pub fn coupling_mut(&mut self, x: SiteRole, y: SiteRole) -> Option<&mut DipolarCoupling> {
        self.couplings.iter_mut().find(|c| c.links(x, y))
    }

    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        if !(self.field_theta.is_finite() && self.field_phi.is_finite()) {
            return Err(Error::param("field angles", "must be finite"));
        }
        let roles = self.roles();
        for (k, c) in self.couplings.iter().enumerate() {
            let name = format!("couplings[{k}]");
            if !(c.j.is_finite() && c.j >= 0.0) {
                return Err(Error::param(name, "j_MHz must be finite and >= 0"));
            }
            if !(c.theta.is_finite() && c.phi.is_finite()) {
                return Err(Error::param(name, "angles must be finite"));
            }
            if c.a == c.b {
                return Err(Error::param(name, "a coupling needs two distinct sites"));
            }
            for r in [c.a, c.b] {
                if !roles.contains(&r) {
                    return Err(Error::param(
                        name,
                        format!("site `{}` is not present in this cluster", r.label()),
                    ));
                }
            }
        }
        self.hyperfine.nv.validate("hyperfine.nv")?;
        self.hyperfine.p1.validate("hyperfine.p1")?;
        Ok(())
    }
}
