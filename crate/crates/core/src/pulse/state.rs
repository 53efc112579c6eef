use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use super::PulseError;
use crate::linalg::{basis, Mat4, Vec4, C64, ONE};
use crate::spin::{DOWN_NDOWN, DOWN_NUP, UP_NDOWN, UP_NUP};

/// Four-level donor state, pure or mixed, in the `(↑⇑, ↑⇓, ↓⇑, ↓⇓)` basis.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantumState {
    Pure(Vec4),
    Mixed(Mat4),
}

/// Named preparation used by configs and sequence files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preparation {
    UpNup,
    UpNdown,
    DownNup,
    DownNdown,
    /// Fully mixed nuclear spin with electron ↓.
    DownNmixed,
}

impl Preparation {
    pub fn state(self) -> QuantumState {
        match self {
            Preparation::UpNup => QuantumState::basis(UP_NUP),
            Preparation::UpNdown => QuantumState::basis(UP_NDOWN),
            Preparation::DownNup => QuantumState::basis(DOWN_NUP),
            Preparation::DownNdown => QuantumState::basis(DOWN_NDOWN),
            Preparation::DownNmixed => {
                let mut rho = Mat4::zeros();
                rho[(DOWN_NUP, DOWN_NUP)] = C64::from(0.5);
                rho[(DOWN_NDOWN, DOWN_NDOWN)] = C64::from(0.5);
                QuantumState::Mixed(rho)
            }
        }
    }
}

impl QuantumState {
    pub fn basis(level: usize) -> Self {
        QuantumState::Pure(basis(level))
    }

    pub fn pure(v: Vec4) -> Result<Self, PulseError> {
        let s = QuantumState::Pure(v);
        s.validate()?;
        Ok(s)
    }

    pub fn mixed(rho: Mat4) -> Result<Self, PulseError> {
        let s = QuantumState::Mixed(rho);
        s.validate()?;
        Ok(s)
    }

    /// Checks unit norm (pure) or Hermiticity, unit trace and positivity (mixed).
    pub fn validate(&self) -> Result<(), PulseError> {
        match self {
            QuantumState::Pure(v) => {
                let n = v.norm();
                if (n - 1.0).abs() > 1e-9 || !n.is_finite() {
                    return Err(PulseError::InvalidState(format!("norm {n} differs from 1")));
                }
            }
            QuantumState::Mixed(rho) => {
                let herm = (rho - rho.adjoint()).norm();
                if herm > 1e-9 {
                    return Err(PulseError::InvalidState(format!("density matrix not Hermitian ({herm:e})")));
                }
                let tr = rho.trace();
                if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
                    return Err(PulseError::InvalidState(format!("trace {tr} differs from 1")));
                }
                let eig = SymmetricEigen::new(*rho);
                let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
                if min < -1e-9 {
                    return Err(PulseError::InvalidState(format!("negative eigenvalue {min:e}")));
                }
            }
        }
        Ok(())
    }

    pub fn populations(&self) -> [f64; 4] {
        let mut p = [0.0; 4];
        match self {
            QuantumState::Pure(v) => {
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = v[j].norm_sqr();
                }
            }
            QuantumState::Mixed(rho) => {
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = rho[(j, j)].re;
                }
            }
        }
        p
    }

    pub fn population(&self, level: usize) -> f64 {
        self.populations()[level]
    }

    /// Probability of electron ↑.
    pub fn electron_up(&self) -> f64 {
        let p = self.populations();
        p[UP_NUP] + p[UP_NDOWN]
    }

    /// Probability of nucleus ⇑.
    pub fn nuclear_up(&self) -> f64 {
        let p = self.populations();
        p[UP_NUP] + p[DOWN_NUP]
    }

    /// `tr ρ` or `‖ψ‖²`.
    pub fn trace(&self) -> f64 {
        match self {
            QuantumState::Pure(v) => v.norm_squared(),
            QuantumState::Mixed(rho) => rho.trace().re,
        }
    }

    pub fn density_matrix(&self) -> Mat4 {
        match self {
            QuantumState::Pure(v) => v * v.adjoint(),
            QuantumState::Mixed(rho) => *rho,
        }
    }

    pub fn into_mixed(self) -> Self {
        QuantumState::Mixed(self.density_matrix())
    }

    /// Applies `U` (ψ → Uψ, ρ → UρU†).
    pub fn apply(&self, u: &Mat4) -> Self {
        match self {
            QuantumState::Pure(v) => QuantumState::Pure(u * v),
            QuantumState::Mixed(rho) => QuantumState::Mixed(u * rho * u.adjoint()),
        }
    }

    pub fn fidelity_with_basis(&self, level: usize) -> f64 {
        self.populations()[level]
    }

    pub fn is_pure(&self) -> bool {
        matches!(self, QuantumState::Pure(_))
    }

    /// Projects onto the subspace selected by `keep` and renormalises.
    /// Returns `None` if the projection has zero weight.
    pub fn project(&self, keep: impl Fn(usize) -> bool) -> Option<Self> {
        let mut p = Mat4::zeros();
        for j in 0..4 {
            if keep(j) {
                p[(j, j)] = ONE;
            }
        }
        match self {
            QuantumState::Pure(v) => {
                let w = p * v;
                let n = w.norm();
                (n > 1e-300).then(|| QuantumState::Pure(w / C64::from(n)))
            }
            QuantumState::Mixed(rho) => {
                let w = p * rho * p;
                let tr = w.trace().re;
                (tr > 1e-300).then(|| QuantumState::Mixed(w / C64::from(tr)))
            }
        }
    }
}
