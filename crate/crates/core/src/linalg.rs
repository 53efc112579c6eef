//! Small dense linear algebra over the four-level donor Hilbert space.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type Mat4 = Matrix4<C64>;
pub type Vec4 = Vector4<C64>;
pub type Mat2 = Matrix2<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Off-diagonal magnitude below which two levels are treated as uncoupled.
const COUPLING_EPS: f64 = 1e-300;

pub fn cis(theta: f64) -> C64 {
    C64::new(theta.cos(), theta.sin())
}

/// `exp(-i·theta·H)` for a Hermitian 2×2 matrix, in closed form.
pub fn expm_i_2x2(h: &Mat2, theta: f64) -> Mat2 {
    let mean = 0.5 * (h[(0, 0)].re + h[(1, 1)].re);
    let half_diff = 0.5 * (h[(0, 0)].re - h[(1, 1)].re);
    let b = h[(0, 1)];
    let r = (half_diff * half_diff + b.norm_sqr()).sqrt();
    let phase = cis(-theta * mean);
    let (c, s_over_r) = if r * theta.abs() < 1e-8 {
        // series limit keeps sin(θr)/r finite as r → 0
        (1.0 - 0.5 * (r * theta).powi(2), theta * (1.0 - (r * theta).powi(2) / 6.0))
    } else {
        ((r * theta).cos(), (r * theta).sin() / r)
    };
    let mi = -I * s_over_r;
    Mat2::new(
        phase * (C64::from(c) + mi * half_diff),
        phase * mi * b,
        phase * mi * b.conj(),
        phase * (C64::from(c) - mi * half_diff),
    )
}

/// Connected components of the coupling graph of a Hermitian 4×4 matrix.
fn components(h: &Mat4) -> Vec<Vec<usize>> {
    let mut label = [usize::MAX; 4];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..4 {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(j) = stack.pop() {
            members.push(j);
            for k in 0..4 {
                if label[k] == usize::MAX && h[(j, k)].norm() > COUPLING_EPS {
                    label[k] = id;
                    stack.push(k);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// `exp(-i·theta·H)` for Hermitian `H`.
///
/// Block structure is exploited: uncoupled levels pick up a phase, coupled
/// pairs use the closed form, anything larger falls back to a full
/// eigendecomposition.
pub fn expm_i(h: &Mat4, theta: f64) -> Mat4 {
    let comps = components(h);
    if comps.iter().any(|c| c.len() > 2) {
        return expm_i_eigen(h, theta);
    }
    let mut u = Mat4::zeros();
    for comp in comps {
        match comp.as_slice() {
            [j] => u[(*j, *j)] = cis(-theta * h[(*j, *j)].re),
            [j, k] => {
                let sub = Mat2::new(h[(*j, *j)], h[(*j, *k)], h[(*k, *j)], h[(*k, *k)]);
                let e = expm_i_2x2(&sub, theta);
                u[(*j, *j)] = e[(0, 0)];
                u[(*j, *k)] = e[(0, 1)];
                u[(*k, *j)] = e[(1, 0)];
                u[(*k, *k)] = e[(1, 1)];
            }
            _ => unreachable!(),
        }
    }
    u
}

/// `exp(-i·theta·H)` through a full Hermitian eigendecomposition.
pub fn expm_i_eigen(h: &Mat4, theta: f64) -> Mat4 {
    let eig = SymmetricEigen::new(*h);
    let v = eig.eigenvectors;
    let mut d = Mat4::zeros();
    for j in 0..4 {
        d[(j, j)] = cis(-theta * eig.eigenvalues[j]);
    }
    v * d * v.adjoint()
}

/// Sorted eigenvalues of a Hermitian 4×4 matrix by general eigendecomposition.
pub fn hermitian_eigenvalues(h: &Mat4) -> [f64; 4] {
    let eig = SymmetricEigen::new(*h);
    let mut out = [0.0; 4];
    for (o, e) in out.iter_mut().zip(eig.eigenvalues.iter()) {
        *o = *e;
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Frobenius norm.
pub fn frobenius(m: &Mat4) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn basis(j: usize) -> Vec4 {
    let mut v = Vec4::zeros();
    v[j] = ONE;
    v
}

pub fn is_unitary(u: &Mat4, tol: f64) -> bool {
    frobenius(&(u.adjoint() * u - Mat4::identity())) < tol
}
