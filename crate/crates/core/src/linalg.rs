//! Small dense complex-matrix kernel.
//!
//! Everything here is sized for waveguide arrays (n of order ten at most), so
//! the Hermitian eigensolver is a plain cyclic Jacobi iteration. The same
//! factorization drives the unitary exponential, its adjoint derivative and
//! the principal matrix logarithm.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense square complex matrix.
pub type ComplexMatrix = Array2<Complex64>;

const MAX_SWEEPS: usize = 100;

/// Hermitian matrix, `m[j][k] == conj(m[k][j])` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(ComplexMatrix);

impl HermitianMatrix {
    pub fn zeros(dim: usize) -> Self {
        HermitianMatrix(Array2::zeros((dim, dim)))
    }

    /// Takes the Hermitian part `(m + m†)/2` of an arbitrary square matrix.
    pub fn project(m: &ComplexMatrix) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square matrix required");
        let n = m.nrows();
        let mut out = Array2::zeros((n, n));
        for j in 0..n {
            out[[j, j]] = Complex64::new(m[[j, j]].re, 0.0);
            for k in (j + 1)..n {
                let v = (m[[j, k]] + m[[k, j]].conj()) * 0.5;
                out[[j, k]] = v;
                out[[k, j]] = v.conj();
            }
        }
        HermitianMatrix(out)
    }

    /// Builds a real symmetric matrix from its upper triangle.
    pub fn from_real_symmetric(m: &Array2<f64>) -> Self {
        HermitianMatrix::project(&m.mapv(|x| Complex64::new(x, 0.0)))
    }

    /// Accepts `m` only if it is Hermitian to within `tol` (max-abs), then
    /// symmetrizes it exactly.
    pub fn try_new(m: ComplexMatrix, tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        for j in 0..n {
            for k in j..n {
                let d = (m[[j, k]] - m[[k, j]].conj()).norm();
                if !d.is_finite() || d > tol {
                    return Err(Error::Contract(format!(
                        "matrix is not Hermitian: |m[{j}][{k}] - conj(m[{k}][{j}])| = {d:e}"
                    )));
                }
            }
        }
        Ok(HermitianMatrix::project(&m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        HermitianMatrix(self.0.mapv(|x| x * s))
    }

    pub fn add(&self, other: &HermitianMatrix) -> Self {
        HermitianMatrix(&self.0 + &other.0)
    }

    /// `self + c I`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut m = self.0.clone();
        for j in 0..m.nrows() {
            m[[j, j]].re += c;
        }
        HermitianMatrix(m)
    }
}

impl std::ops::Index<[usize; 2]> for HermitianMatrix {
    type Output = Complex64;
    fn index(&self, idx: [usize; 2]) -> &Complex64 {
        &self.0[idx]
    }
}

/// Eigendecomposition `h = V diag(eigenvalues) V†` with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: ComplexMatrix,
}

impl Spectrum {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let d: Vec<Complex64> = self
            .eigenvalues
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        spectral_map(&self.eigenvectors, &d)
    }
}

/// Hermitian eigendecomposition by cyclic complex Jacobi rotations.
///
/// The mean of the diagonal is removed before iterating and added back to the
/// eigenvalues; propagation constants carry a large common offset that would
/// otherwise dominate the convergence threshold.
pub fn herm_eig(h: &HermitianMatrix) -> Result<Spectrum> {
    let n = h.dim();
    let m = h.as_matrix();
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Contract("herm_eig: non-finite entry".into()));
    }
    let shift = (0..n).map(|j| m[[j, j]].re).sum::<f64>() / n as f64;
    let mut a = m.clone();
    for j in 0..n {
        a[[j, j]] = Complex64::new(a[[j, j]].re - shift, 0.0);
    }
    let mut v: ComplexMatrix = Array2::from_diag_elem(n, Complex64::new(1.0, 0.0));

    let scale = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mut converged = n < 2 || scale == 0.0;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                jacobi_rotate(&mut a, &mut v, p, q);
            }
        }
        let off: f64 = (0..n)
            .flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k)))
            .map(|(j, k)| a[[j, k]].norm_sqr())
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[[x, x]].re.total_cmp(&a[[y, y]].re));
    let eigenvalues = order.iter().map(|&k| a[[k, k]].re + shift).collect();
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn jacobi_rotate(a: &mut ComplexMatrix, v: &mut ComplexMatrix, p: usize, q: usize) {
    let n = a.nrows();
    let apq = a[[p, q]];
    let mag = apq.norm();
    if mag == 0.0 {
        return;
    }
    // Rotate the phase of a[p][q] away: D = diag(.., e^{-i phi} at q, ..).
    let phase = apq / mag;
    let dq = phase.conj();
    for k in 0..n {
        a[[k, q]] *= dq;
        v[[k, q]] *= dq;
    }
    for k in 0..n {
        a[[q, k]] *= phase;
    }
    a[[p, q]] = Complex64::new(mag, 0.0);
    a[[q, p]] = Complex64::new(mag, 0.0);

    let app = a[[p, p]].re;
    let aqq = a[[q, q]].re;
    let theta = (aqq - app) / (2.0 * mag);
    let t = if theta.is_infinite() {
        0.0
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a[[k, p]];
        let akq = a[[k, q]];
        a[[k, p]] = akp * c - akq * s;
        a[[k, q]] = akp * s + akq * c;
        let vkp = v[[k, p]];
        let vkq = v[[k, q]];
        v[[k, p]] = vkp * c - vkq * s;
        v[[k, q]] = vkp * s + vkq * c;
    }
    for k in 0..n {
        let apk = a[[p, k]];
        let aqk = a[[q, k]];
        a[[p, k]] = apk * c - aqk * s;
        a[[q, k]] = apk * s + aqk * c;
    }
    a[[p, q]] = Complex64::new(0.0, 0.0);
    a[[q, p]] = Complex64::new(0.0, 0.0);
    a[[p, p]] = Complex64::new(a[[p, p]].re, 0.0);
    a[[q, q]] = Complex64::new(a[[q, q]].re, 0.0);
}

/// `V diag(d) V†`.
pub fn spectral_map(v: &ComplexMatrix, d: &[Complex64]) -> ComplexMatrix {
    let n = v.nrows();
    let mut out = Array2::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, dm) in d.iter().enumerate() {
                acc += v[[j, m]] * dm * v[[k, m]].conj();
            }
            out[[j, k]] = acc;
        }
    }
    out
}

/// Evolution operator `U = exp(-i h l)` of a length-`l` propagation.
pub fn mat_exp_unitary(h: &HermitianMatrix, l: f64) -> Result<ComplexMatrix> {
    Ok(exp_from_spectrum(&herm_eig(h)?, l))
}

pub fn exp_from_spectrum(spec: &Spectrum, l: f64) -> ComplexMatrix {
    let d: Vec<Complex64> = spec
        .eigenvalues
        .iter()
        .map(|&x| Complex64::from_polar(1.0, -x * l))
        .collect();
    spectral_map(&spec.eigenvectors, &d)
}

/// Frobenius norm of `u† u - I`.
pub fn unitarity_defect(u: &ComplexMatrix) -> f64 {
    let n = u.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for k in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for m in 0..n {
                s += u[[m, j]].conj() * u[[m, k]];
            }
            if j == k {
                s -= 1.0;
            }
            acc += s.norm_sqr();
        }
    }
    acc.sqrt()
}

/// Principal Hamiltonian `H = (i/l) log u`, with every eigenvalue of `H l`
/// in `(-pi, pi]`. Eigenphases within 1e-9 of `-pi` are sent to `+pi`.
pub fn mat_log_unitary(u: &ComplexMatrix, l: f64) -> Result<HermitianMatrix> {
    if u.nrows() != u.ncols() {
        return Err(Error::Shape("mat_log_unitary: non-square input".into()));
    }
    let defect = unitarity_defect(u);
    if !(defect <= 1e-8) {
        return Err(Error::Contract(format!(
            "mat_log_unitary: input is not unitary (||U^dag U - I||_F = {defect:e})"
        )));
    }
    let n = u.nrows();
    // A unitary is normal, so (U + U†)/2 and (U - U†)/2i commute and share
    // eigenvectors. A generic mix of the two separates distinct eigenphases;
    // a second mixing weight covers the accidental coincidences.
    let uh = u.t().mapv(|z| z.conj());
    let re_part = (u + &uh).mapv(|z| z * 0.5);
    let im_part = (u - &uh).mapv(|z| z * Complex64::new(0.0, -0.5));
    let mut best: Option<(f64, ComplexMatrix)> = None;
    for gamma in [
        0.577_215_664_901_532_9,
        1.324_717_957_244_746,
        -2.718_281_828_459_045,
    ] {
        let mix = HermitianMatrix::project(&(&re_part + &im_part.mapv(|z| z * gamma)));
        let spec = herm_eig(&mix)?;
        let vecs = spec.eigenvectors;
        let d = vecs.t().mapv(|z| z.conj()).dot(u).dot(&vecs);
        let off: f64 = (0..n)
            .flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k)))
            .map(|(j, k)| d[[j, k]].norm_sqr())
            .sum::<f64>()
            .sqrt();
        let better = best.as_ref().map_or(true, |(b, _)| off < *b);
        if better {
            best = Some((off, vecs));
        }
        if off < 1e-10 {
            break;
        }
    }
    let (_, vecs) = best.expect("at least one mixing weight tried");
    let d = vecs.t().mapv(|z| z.conj()).dot(u).dot(&vecs);
    let phases: Vec<Complex64> = (0..n)
        .map(|k| {
            let mut theta = -d[[k, k]].arg();
            if theta <= -std::f64::consts::PI + 1e-9 {
                theta += 2.0 * std::f64::consts::PI;
            }
            Complex64::new(theta / l, 0.0)
        })
        .collect();
    Ok(HermitianMatrix::project(&spectral_map(&vecs, &phases)))
}

/// Divided difference of `x -> exp(-i x l)` at `(a, b)`.
///
/// Uses `exp(-ia l) - exp(-ib l) = -2i exp(-i(a+b)l/2) sin((a-b)l/2)` so the
/// quotient stays accurate for close eigenvalues, and switches to the
/// confluent limit `-i l exp(-i a l)` below the degeneracy tolerance.
fn exp_divided_difference(a: f64, b: f64, l: f64, tol: f64) -> Complex64 {
    let mid = Complex64::from_polar(1.0, -0.5 * (a + b) * l);
    let delta = a - b;
    if delta.abs() < tol {
        return Complex64::new(0.0, -l) * mid;
    }
    Complex64::new(0.0, -2.0 * (0.5 * delta * l).sin() / delta) * mid
}

/// Degeneracy tolerance for the confluent branch of the divided differences.
pub fn degeneracy_tolerance(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    1e-9 * max.max(1.0)
}

/// Reverse-mode sensitivity of `U = exp(-i h l)` with respect to `h`.
///
/// `upstream` holds `dL/dRe(U) + i dL/dIm(U)` for a real scalar `L`. The
/// result `G` is the Hermitian matrix with `dL = Re tr(G† dH)` for every
/// Hermitian perturbation `dH`.
pub fn exp_frechet_adjoint(
    h: &HermitianMatrix,
    l: f64,
    upstream: &ComplexMatrix,
) -> Result<HermitianMatrix> {
    let spec = herm_eig(h)?;
    Ok(exp_adjoint_from_spectrum(&spec, l, upstream))
}

pub fn exp_adjoint_from_spectrum(
    spec: &Spectrum,
    l: f64,
    upstream: &ComplexMatrix,
) -> HermitianMatrix {
    let n = spec.eigenvalues.len();
    let v = &spec.eigenvectors;
    let tol = degeneracy_tolerance(&spec.eigenvalues);
    let zero = Complex64::new(0.0, 0.0);
    // t = G V, then x = conj(phi) * (V† t), then out = V x V†.
    let mut t = vec![zero; n * n];
    for a in 0..n {
        for k in 0..n {
            let mut acc = zero;
            for b in 0..n {
                acc += upstream[[a, b]] * v[[b, k]];
            }
            t[a * n + k] = acc;
        }
    }
    let mut x = vec![zero; n * n];
    for j in 0..n {
        for k in 0..n {
            let mut acc = zero;
            for a in 0..n {
                acc += v[[a, j]].conj() * t[a * n + k];
            }
            let phi = exp_divided_difference(spec.eigenvalues[j], spec.eigenvalues[k], l, tol);
            x[j * n + k] = phi.conj() * acc;
        }
    }
    for a in 0..n {
        for k in 0..n {
            let mut acc = zero;
            for j in 0..n {
                acc += v[[a, j]] * x[j * n + k];
            }
            t[a * n + k] = acc;
        }
    }
    let mut out = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let mut acc = zero;
            for k in 0..n {
                acc += t[a * n + k] * v[[b, k]].conj();
            }
            out[[a, b]] = acc;
        }
    }
    HermitianMatrix::project(&out)
}
