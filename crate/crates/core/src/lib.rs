//! Spin-ratchet dynamic nuclear polarization: an NV centre, a P1 proxy and a
//! target proton driven through level anti-crossings by magnetic-field sweeps.
//!
//! Units throughout: MHz for energies, mT for fields, ms for protocol times.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod spin;
pub mod transfer_matrix;

pub use error::{Error, Result};
pub use model::{ClusterConfig, DipolarCoupling, PhysicalConstants, SiteRole};
pub use spin::{CMatrix, HilbertLayout, Site, SpinOperatorSet};
