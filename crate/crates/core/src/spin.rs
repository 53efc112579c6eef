//! The donor spin Hamiltonian and its closed-form frequencies.
//!
//! Basis order is fixed everywhere in the crate as
//! `(↑⇑, ↑⇓, ↓⇑, ↓⇓)`: electron arrow first, nuclear double arrow second.
//! The flip-flop qubit lives on the anti-parallel pair `(↑⇓, ↓⇑)`.
//!
//! All Hamiltonian entries are in MHz (plain frequency units, no 2π).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{hermitian_eigenvalues, Mat2, Mat4, C64, ONE, ZERO};

/// Index of `|↑⇑⟩`.
pub const UP_NUP: usize = 0;
/// Index of `|↑⇓⟩`, the upper flip-flop state.
pub const UP_NDOWN: usize = 1;
/// Index of `|↓⇑⟩`, the lower flip-flop state (qubit ground).
pub const DOWN_NUP: usize = 2;
/// Index of `|↓⇓⟩`.
pub const DOWN_NDOWN: usize = 3;

pub const LEVEL_LABELS: [&str; 4] = ["up_nup", "up_ndown", "down_nup", "down_ndown"];

#[derive(Debug, Error, PartialEq)]
pub enum SpinError {
    #[error("invalid donor parameter {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
}

/// Gyromagnetic ratios, both taken as positive numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Electron gyromagnetic ratio in GHz/T.
    pub gamma_e: f64,
    /// ³¹P nuclear gyromagnetic ratio in MHz/T.
    pub gamma_n: f64,
}

impl Default for PhysicalConstants {
    /// γ_e = 27.97 GHz/T, γ_n = 17.23 MHz/T.
    fn default() -> Self {
        Self { gamma_e: 27.97, gamma_n: 17.23 }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.gamma_e > 0.0 && self.gamma_e.is_finite()) {
            return Err(SpinError::InvalidParameter {
                field: "gamma_e",
                reason: format!("must be positive, got {}", self.gamma_e),
            });
        }
        if !(self.gamma_n > 0.0 && self.gamma_n.is_finite()) {
            return Err(SpinError::InvalidParameter {
                field: "gamma_n",
                reason: format!("must be positive, got {}", self.gamma_n),
            });
        }
        Ok(())
    }

    /// γ_e in MHz/T.
    pub fn gamma_e_mhz(&self) -> f64 {
        self.gamma_e * 1e3
    }

    /// γ₊ = γ_e + γ_n in MHz/T.
    pub fn gamma_plus(&self) -> f64 {
        self.gamma_e_mhz() + self.gamma_n
    }

    /// γ₋ = γ_e − γ_n in MHz/T.
    pub fn gamma_minus(&self) -> f64 {
        self.gamma_e_mhz() - self.gamma_n
    }
}

/// Static physics knobs of one donor at its DC operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DonorParameters {
    /// Static field in tesla.
    pub b0: f64,
    /// Hyperfine coupling at the DC operating point, MHz.
    pub a_hf: f64,
    /// ∂A/∂V of the fast-donor gate, kHz/V.
    pub stark_slope: f64,
    /// Gate voltage at which `a_hf` applies, V.
    #[serde(default)]
    pub fd_offset_voltage: f64,
}

impl Default for DonorParameters {
    fn default() -> Self {
        Self { b0: 1.0, a_hf: 114.1, stark_slope: 512.0, fd_offset_voltage: 0.0 }
    }
}

impl DonorParameters {
    pub fn new(b0: f64, a_hf: f64, stark_slope: f64) -> Result<Self, SpinError> {
        let p = Self { b0, a_hf, stark_slope, fd_offset_voltage: 0.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.b0 >= 0.0 && self.b0.is_finite()) {
            return Err(SpinError::InvalidParameter {
                field: "b0",
                reason: format!("must be >= 0, got {}", self.b0),
            });
        }
        if !(self.a_hf >= 0.0 && self.a_hf.is_finite()) {
            return Err(SpinError::InvalidParameter {
                field: "a_hf",
                reason: format!("must be >= 0, got {}", self.a_hf),
            });
        }
        if !self.stark_slope.is_finite() || !self.fd_offset_voltage.is_finite() {
            return Err(SpinError::InvalidParameter {
                field: "stark_slope",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }

    /// Hyperfine coupling (MHz) at fast-donor gate voltage `v_fd`.
    pub fn hyperfine_at(&self, v_fd: f64) -> f64 {
        self.a_hf + self.stark_slope * 1e-3 * (v_fd - self.fd_offset_voltage)
    }

    /// Same donor with the hyperfine coupling replaced.
    pub fn with_hyperfine(mut self, a_hf: f64) -> Self {
        self.a_hf = a_hf;
        self
    }
}

/// Donor parameters together with the gyromagnetic ratios they are used with.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinSystem {
    #[serde(default)]
    pub params: DonorParameters,
    #[serde(default)]
    pub constants: PhysicalConstants,
}

impl SpinSystem {
    pub fn new(params: DonorParameters, constants: PhysicalConstants) -> Self {
        Self { params, constants }
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        self.params.validate()?;
        self.constants.validate()
    }

    pub fn hamiltonian(&self) -> HamiltonianMatrix {
        build_full_hamiltonian(&self.params, &self.constants)
    }

    pub fn eigensystem(&self) -> Eigensystem {
        self.hamiltonian().eigensystem()
    }

    pub fn frequencies(&self) -> TransitionFrequencies {
        transition_frequencies(&self.params, &self.constants)
    }
}

/// Single-spin operators embedded in the two-spin space.
#[derive(Debug, Clone)]
pub struct SpinOperators {
    pub sx: Mat4,
    pub sy: Mat4,
    pub sz: Mat4,
    pub ix: Mat4,
    pub iy: Mat4,
    pub iz: Mat4,
}

impl SpinOperators {
    pub fn new() -> Self {
        let half = C64::from(0.5);
        let ihalf = C64::new(0.0, 0.5);
        let px = nalgebra::Matrix2::new(ZERO, half, half, ZERO);
        let py = nalgebra::Matrix2::new(ZERO, -ihalf, ihalf, ZERO);
        let pz = nalgebra::Matrix2::new(half, ZERO, ZERO, -half);
        let id = nalgebra::Matrix2::new(ONE, ZERO, ZERO, ONE);
        // electron is the first tensor factor: index = 2*e + n with e,n ∈ {0 = up, 1 = down}
        let kron = |a: &Mat2, b: &Mat2| -> Mat4 {
            let mut m = Mat4::zeros();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            m[(2 * i + k, 2 * j + l)] = a[(i, j)] * b[(k, l)];
                        }
                    }
                }
            }
            m
        };
        Self {
            sx: kron(&px, &id),
            sy: kron(&py, &id),
            sz: kron(&pz, &id),
            ix: kron(&id, &px),
            iy: kron(&id, &py),
            iz: kron(&id, &pz),
        }
    }

    /// Isotropic contact coupling S·I.
    pub fn contact(&self) -> Mat4 {
        self.sx * self.ix + self.sy * self.iy + self.sz * self.iz
    }
}

impl Default for SpinOperators {
    fn default() -> Self {
        Self::new()
    }
}

/// Full four-level Hamiltonian (MHz).
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianMatrix(pub Mat4);

impl HamiltonianMatrix {
    pub fn entries(&self) -> &Mat4 {
        &self.0
    }

    /// Sorted eigenvalues by general Hermitian eigendecomposition.
    pub fn eigenvalues(&self) -> [f64; 4] {
        hermitian_eigenvalues(&self.0)
    }

    /// Block-structured eigensystem with states labelled by product state.
    pub fn eigensystem(&self) -> Eigensystem {
        Eigensystem::from_hamiltonian(&self.0)
    }
}

/// Flip-flop block over `(↑⇓, ↓⇑)`, MHz.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipFlopHamiltonian(pub Mat2);

impl FlipFlopHamiltonian {
    pub fn entries(&self) -> &Mat2 {
        &self.0
    }

    /// Eigenvalues (lower, upper).
    pub fn eigenvalues(&self) -> (f64, f64) {
        let h = &self.0;
        let mean = 0.5 * (h[(0, 0)].re + h[(1, 1)].re);
        let half = 0.5 * (h[(0, 0)].re - h[(1, 1)].re);
        let r = half.hypot(h[(0, 1)].norm());
        (mean - r, mean + r)
    }

    pub fn gap(&self) -> f64 {
        let (lo, hi) = self.eigenvalues();
        hi - lo
    }
}

/// Eigenvalues and eigenvectors with column `j` adiabatically connected to
/// product state `j`.
#[derive(Debug, Clone)]
pub struct Eigensystem {
    pub energies: [f64; 4],
    /// Columns are eigenvectors in the product basis.
    pub vectors: Mat4,
}

impl Eigensystem {
    /// Diagonalises a Hamiltonian that conserves total `S_z + I_z`, i.e. whose
    /// only off-diagonal element couples `↑⇓` and `↓⇑`.
    pub fn from_hamiltonian(h: &Mat4) -> Self {
        let mut energies = [0.0; 4];
        let mut vectors = Mat4::zeros();
        for j in [UP_NUP, DOWN_NDOWN] {
            energies[j] = h[(j, j)].re;
            vectors[(j, j)] = ONE;
        }
        let d1 = h[(UP_NDOWN, UP_NDOWN)].re;
        let d2 = h[(DOWN_NUP, DOWN_NUP)].re;
        let b = h[(UP_NDOWN, DOWN_NUP)];
        let mean = 0.5 * (d1 + d2);
        let r = (0.5 * (d1 - d2)).hypot(b.norm());
        let theta = 0.5 * (2.0 * b.norm()).atan2(d1 - d2);
        let beta = b.arg();
        let (c, s) = (theta.cos(), theta.sin());
        // upper: (cos θ, sin θ e^{-iβ}); lower: (-sin θ e^{iβ}, cos θ)
        let upper = (C64::from(c), C64::from_polar(s, -beta));
        let lower = (-C64::from_polar(s, beta), C64::from(c));
        let (up_label, lo_label) = if d1 >= d2 { (UP_NDOWN, DOWN_NUP) } else { (DOWN_NUP, UP_NDOWN) };
        energies[up_label] = mean + r;
        energies[lo_label] = mean - r;
        vectors[(UP_NDOWN, up_label)] = upper.0;
        vectors[(DOWN_NUP, up_label)] = upper.1;
        vectors[(UP_NDOWN, lo_label)] = lower.0;
        vectors[(DOWN_NUP, lo_label)] = lower.1;
        Self { energies, vectors }
    }

    /// `E_j − E_k` in MHz.
    pub fn transition(&self, j: usize, k: usize) -> f64 {
        self.energies[j] - self.energies[k]
    }
}

/// Resonance frequencies of the four magnetic transitions and the flip-flop
/// transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransitionFrequencies {
    /// Electron resonance with nucleus ⇓, GHz.
    pub esr1: f64,
    /// Electron resonance with nucleus ⇑, GHz.
    pub esr2: f64,
    /// Nuclear resonance with electron ↓, MHz.
    pub nmr1: f64,
    /// Nuclear resonance with electron ↑, MHz.
    pub nmr2: f64,
    /// Flip-flop resonance, GHz.
    pub ff: f64,
    /// Hyperfine coupling the frequencies were built from, MHz.
    pub a_hf: f64,
}

impl TransitionFrequencies {
    /// `esr2 − esr1`, which is `A` by construction (MHz).
    pub fn esr_splitting(&self) -> f64 {
        self.a_hf
    }

    /// `nmr1 + nmr2`, which is `A` by construction (MHz).
    pub fn nmr_sum(&self) -> f64 {
        self.a_hf
    }
}

/// Full Hamiltonian written entry by entry in the product basis.
pub fn build_full_hamiltonian(params: &DonorParameters, constants: &PhysicalConstants) -> HamiltonianMatrix {
    let gp = constants.gamma_plus() * params.b0;
    let gm = constants.gamma_minus() * params.b0;
    let a = params.a_hf;
    let mut h = Mat4::zeros();
    h[(UP_NUP, UP_NUP)] = C64::from(0.5 * (gm + 0.5 * a));
    h[(UP_NDOWN, UP_NDOWN)] = C64::from(0.5 * (gp - 0.5 * a));
    h[(DOWN_NUP, DOWN_NUP)] = C64::from(0.5 * (-gp - 0.5 * a));
    h[(DOWN_NDOWN, DOWN_NDOWN)] = C64::from(0.5 * (-gm + 0.5 * a));
    h[(UP_NDOWN, DOWN_NUP)] = C64::from(0.5 * a);
    h[(DOWN_NUP, UP_NDOWN)] = C64::from(0.5 * a);
    HamiltonianMatrix(h)
}

/// The `(↑⇓, ↓⇑)` block of the full Hamiltonian, including its `−A/4` offset.
pub fn truncate_flipflop(h: &HamiltonianMatrix) -> FlipFlopHamiltonian {
    let m = &h.0;
    FlipFlopHamiltonian(Mat2::new(
        m[(UP_NDOWN, UP_NDOWN)],
        m[(UP_NDOWN, DOWN_NUP)],
        m[(DOWN_NUP, UP_NDOWN)],
        m[(DOWN_NUP, DOWN_NUP)],
    ))
}

pub fn transition_frequencies(params: &DonorParameters, constants: &PhysicalConstants) -> TransitionFrequencies {
    let a = params.a_hf;
    let ze = constants.gamma_e_mhz() * params.b0;
    let zn = constants.gamma_n * params.b0;
    let zp = constants.gamma_plus() * params.b0;
    TransitionFrequencies {
        esr1: (ze - 0.5 * a) * 1e-3,
        esr2: (ze + 0.5 * a) * 1e-3,
        nmr1: 0.5 * a + zn,
        nmr2: 0.5 * a - zn,
        ff: zp.hypot(a) * 1e-3,
        a_hf: a,
    }
}

/// Flip-flop Rabi frequency in kHz for a Stark slope in kHz/V and a drive
/// amplitude at the gate in volts.
pub fn flipflop_rabi_frequency(stark_slope: f64, drive_amplitude_at_gate: f64) -> f64 {
    0.5 * stark_slope * drive_amplitude_at_gate
}

/// Field at which the flip-flop resonance sits at `ff_ghz` for hyperfine
/// `a_hf` (MHz). Returns `None` when `ff_ghz` is below `A`.
pub fn field_for_flipflop(ff_ghz: f64, a_hf: f64, constants: &PhysicalConstants) -> Option<f64> {
    let ff = ff_ghz * 1e3;
    if ff < a_hf {
        return None;
    }
    Some((ff * ff - a_hf * a_hf).sqrt() / constants.gamma_plus())
}
