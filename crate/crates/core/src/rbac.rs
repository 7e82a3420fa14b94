//! RBAC configurations: who holds which role, and what each role grants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{bool_mat_prod, BinaryMatrix};

/// Flat configuration: user-role matrix `z` (N x K) and role-permission matrix `u` (K x D).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatRbacConfig {
    z: BinaryMatrix,
    u: BinaryMatrix,
}

impl FlatRbacConfig {
    pub fn new(z: BinaryMatrix, u: BinaryMatrix) -> Result<Self> {
        if z.cols() != u.rows() {
            return Err(Error::ShapeMismatch {
                op: "FlatRbacConfig::new",
                left: z.shape(),
                right: u.shape(),
            });
        }
        Ok(Self { z, u })
    }

    pub fn z(&self) -> &BinaryMatrix {
        &self.z
    }

    pub fn u(&self) -> &BinaryMatrix {
        &self.u
    }

    pub fn num_roles(&self) -> usize {
        self.u.rows()
    }

    pub fn reconstruct(&self) -> BinaryMatrix {
        bool_mat_prod(&self.z, &self.u).expect("shapes checked at construction")
    }
}

/// Two-level configuration: users to business roles (`z`, N x K), business to
/// technical roles (`v`, K x L) and technical roles to permissions (`y`, L x D).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierRbacConfig {
    z: BinaryMatrix,
    v: BinaryMatrix,
    y: BinaryMatrix,
}

impl HierRbacConfig {
    pub fn new(z: BinaryMatrix, v: BinaryMatrix, y: BinaryMatrix) -> Result<Self> {
        if z.cols() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "HierRbacConfig::new (z vs v)",
                left: z.shape(),
                right: v.shape(),
            });
        }
        if v.cols() != y.rows() {
            return Err(Error::ShapeMismatch {
                op: "HierRbacConfig::new (v vs y)",
                left: v.shape(),
                right: y.shape(),
            });
        }
        Ok(Self { z, v, y })
    }

    /// Like [`HierRbacConfig::new`] but also requires every user in exactly one
    /// business role and every permission in exactly one technical role.
    pub fn new_disjoint(z: BinaryMatrix, v: BinaryMatrix, y: BinaryMatrix) -> Result<Self> {
        for i in 0..z.rows() {
            if z.row_count_ones(i) != 1 {
                return Err(Error::InvalidConfig(format!("user {i} is not in exactly one business role")));
            }
        }
        let yt = y.transpose();
        for d in 0..yt.rows() {
            if yt.row_count_ones(d) != 1 {
                return Err(Error::InvalidConfig(format!("permission {d} is not in exactly one technical role")));
            }
        }
        Self::new(z, v, y)
    }

    pub fn z(&self) -> &BinaryMatrix {
        &self.z
    }

    pub fn v(&self) -> &BinaryMatrix {
        &self.v
    }

    pub fn y(&self) -> &BinaryMatrix {
        &self.y
    }

    pub fn num_business_roles(&self) -> usize {
        self.v.rows()
    }

    pub fn num_technical_roles(&self) -> usize {
        self.v.cols()
    }

    /// Collapse the technical layer into a flat configuration `(z, v ∘ y)`.
    pub fn flatten(&self) -> FlatRbacConfig {
        let u = bool_mat_prod(&self.v, &self.y).expect("shapes checked at construction");
        FlatRbacConfig { z: self.z.clone(), u }
    }

    /// `Z ∘ V ∘ Y`.
    pub fn reconstruct(&self) -> BinaryMatrix {
        self.flatten().reconstruct()
    }
}

/// Which model produced a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mac,
    Ddm,
    Hybrid,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mac => "mac",
            ModelKind::Ddm => "ddm",
            ModelKind::Hybrid => "hybrid",
        })
    }
}
