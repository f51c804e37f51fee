//! Comparison tools: MSE, gate infidelity, and recovery of complex amplitudes
//! and unitaries from Mach-Zehnder detector powers.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{unitarity_defect, ComplexMatrix};

/// Mean of squared differences.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("mse of empty arrays".into()));
    }
    let s: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `1 - |tr(u† v)|^2 / d^2`, clamped to `[0, 1]`.
pub fn gate_infidelity(u: &ComplexMatrix, v: &ComplexMatrix) -> Result<f64> {
    if u.dim() != v.dim() || u.nrows() != u.ncols() {
        return Err(Error::Shape(format!("{:?} vs {:?}", u.dim(), v.dim())));
    }
    for m in [u, v] {
        let d = unitarity_defect(m);
        if !(d <= 1e-8) {
            return Err(Error::Contract(format!(
                "gate_infidelity: operand not unitary ({d:e})"
            )));
        }
    }
    Ok(infidelity_unchecked(u, v))
}

/// [`gate_infidelity`] without the unitarity precondition, for matrices that
/// are unitary by construction.
pub fn infidelity_unchecked(u: &ComplexMatrix, v: &ComplexMatrix) -> f64 {
    let d = u.nrows() as f64;
    let tr: Complex64 = u.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
    (1.0 - tr.norm_sqr() / (d * d)).clamp(0.0, 1.0)
}

/// Detector powers of one output channel at reference phases 0 and pi/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferometerPair {
    pub p0: f64,
    pub p_half: f64,
}

impl InterferometerPair {
    pub fn from_amplitude(a: Complex64) -> Self {
        let (p0, p_half) = crate::simulator::interferometer_pair(a);
        InterferometerPair { p0, p_half }
    }

    /// Largest violation of `|a|^2 + 1 + 2 Re a = 4 P(0)` and
    /// `|a|^2 + 1 + 2 Im a = 4 P(pi/2)`.
    pub fn residual(&self, a: Complex64) -> f64 {
        let s = a.norm_sqr();
        let r0 = s + 1.0 + 2.0 * a.re - 4.0 * self.p0;
        let r1 = s + 1.0 + 2.0 * a.im - 4.0 * self.p_half;
        r0.abs().max(r1.abs())
    }

    /// Every amplitude with `|a| <= 1` reproducing this pair, ascending `|a|`.
    ///
    /// With `A = 4P(0) - 1` and `B = 4P(pi/2) - 1`, the squared magnitude
    /// `s` solves `s^2 - (A + B + 2) s + (A^2 + B^2)/2 = 0` and then
    /// `a = ((A - s) + i (B - s)) / 2`. The two roots are `|a|^2` and
    /// `|a + 1 + i|^2`, so whenever both are at most 1 the pair alone cannot
    /// tell the two amplitudes apart.
    pub fn candidates(&self) -> Vec<Complex64> {
        let a = 4.0 * self.p0 - 1.0;
        let b = 4.0 * self.p_half - 1.0;
        let sum = a + b + 2.0;
        let disc = (sum * sum - 2.0 * (a * a + b * b)).max(0.0);
        let root = disc.sqrt();
        let mut out = Vec::with_capacity(2);
        for s in [0.5 * (sum - root), 0.5 * (sum + root)] {
            if s <= 1.0 + 1e-9 && s >= -1e-9 {
                let s = s.max(0.0);
                let cand = Complex64::new(0.5 * (a - s), 0.5 * (b - s));
                if out.iter().all(|c: &Complex64| (c - cand).norm() > 1e-12) {
                    out.push(cand);
                }
            }
        }
        if out.is_empty() {
            // closest admissible point: the smaller root, clamped into the disk
            let s = (0.5 * (sum - root)).clamp(0.0, 1.0);
            out.push(Complex64::new(0.5 * (a - s), 0.5 * (b - s)));
        }
        out
    }
}

/// Recovers `a` from its detector powers.
///
/// Among the admissible roots the one with the smaller equation residual
/// wins; residuals within 1e-12 of each other count as a tie, which goes to
/// the smaller `|a|`.
pub fn reconstruct_amplitude(pair: InterferometerPair) -> Result<Complex64> {
    const TIE: f64 = 1e-12;
    let best = pair
        .candidates()
        .into_iter()
        .map(|c| (pair.residual(c), c))
        .reduce(|best, next| {
            let tie = (best.0 - next.0).abs() <= TIE;
            let take = if tie {
                next.1.norm() < best.1.norm()
            } else {
                next.0 < best.0
            };
            if take {
                next
            } else {
                best
            }
        })
        .expect("candidates never empty");
    if best.0 >= 1e-6 {
        return Err(Error::Reconstruction { residual: best.0 });
    }
    Ok(best.1)
}

/// Unitary assembled from one step of quantum-mode readings.
#[derive(Debug, Clone)]
pub struct AssembledUnitary {
    pub matrix: ComplexMatrix,
    /// `||U† U - I||_F` of the assembly.
    pub residual: f64,
    /// Set when `residual` exceeds 1e-6.
    pub flagged: bool,
}

/// Builds `U` column by column from a `2n^2` quantum-mode reading.
///
/// Entries whose detector pair admits two amplitudes are resolved jointly:
/// every column picks the combination of roots that is closest to unit norm
/// and orthogonal to the columns already fixed.
pub fn unitary_from_trace(step: &[f64]) -> Result<AssembledUnitary> {
    let n = ((step.len() / 2) as f64).sqrt().round() as usize;
    if n == 0 || 2 * n * n != step.len() {
        return Err(Error::Shape(format!("{} values is not 2n^2", step.len())));
    }
    let mut u: ComplexMatrix = Array2::zeros((n, n));
    for m in 0..n {
        let block = &step[m * 2 * n..(m + 1) * 2 * n];
        let cands: Vec<Vec<Complex64>> = (0..n)
            .map(|k| {
                InterferometerPair {
                    p0: block[2 * k],
                    p_half: block[2 * k + 1],
                }
                .candidates()
            })
            .collect();
        let combos: usize = cands.iter().map(Vec::len).product();
        let mut best: Option<(f64, Vec<Complex64>)> = None;
        for code in 0..combos {
            let mut rem = code;
            let col: Vec<Complex64> = cands
                .iter()
                .map(|c| {
                    let pick = c[rem % c.len()];
                    rem /= c.len();
                    pick
                })
                .collect();
            let norm_err = col.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0;
            let mut score = norm_err * norm_err;
            for prev in 0..m {
                let ip: Complex64 = (0..n).map(|k| u[[k, prev]].conj() * col[k]).sum();
                score += ip.norm_sqr();
            }
            if best.as_ref().map_or(true, |(s, _)| score < *s) {
                best = Some((score, col));
            }
        }
        let (_, col) = best.expect("at least one combination");
        for (k, z) in col.into_iter().enumerate() {
            u[[k, m]] = z;
        }
    }
    let residual = unitarity_defect(&u);
    Ok(AssembledUnitary {
        matrix: u,
        residual,
        flagged: !(residual <= 1e-6),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mat_exp_unitary, HermitianMatrix};
    use crate::simulator::{measure_unitary, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn x13() -> ComplexMatrix {
        let mut m = Array2::zeros((3, 3));
        m[[0, 2]] = c(1.0, 0.0);
        m[[2, 0]] = c(1.0, 0.0);
        m[[1, 1]] = c(1.0, 0.0);
        m
    }

    fn random_unitary(rng: &mut ChaCha8Rng, n: usize) -> ComplexMatrix {
        let h = Array2::from_shape_fn((n, n), |_| {
            c(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        });
        mat_exp_unitary(&HermitianMatrix::project(&h), 1.0).unwrap()
    }

    #[test]
    fn mse_basic() {
        let a = Array2::from_elem((3, 4), 0.5);
        assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        let b = a.mapv(|x| x + 0.01);
        assert!((mse(a.view(), b.view()).unwrap() - 1e-4).abs() < 1e-15);
        assert!(mse(a.view(), Array2::zeros((4, 3)).view()).is_err());
    }

    #[test]
    fn infidelity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_unitary(&mut rng, 3);
        assert!(gate_infidelity(&u, &u).unwrap() < 1e-14);
        let phased = u.mapv(|z| z * Complex64::from_polar(1.0, 1.234));
        assert!(gate_infidelity(&u, &phased).unwrap() < 1e-14);
        let f = gate_infidelity(&Array2::eye(3), &x13()).unwrap();
        assert!((f - 8.0 / 9.0).abs() < 1e-15);
        let v = random_unitary(&mut rng, 3);
        let f1 = gate_infidelity(&u, &v).unwrap();
        let f2 = gate_infidelity(&v, &u).unwrap();
        assert!((f1 - f2).abs() < 1e-15 && (0.0..=1.0).contains(&f1));
        assert!(gate_infidelity(&u, &Array2::eye(2)).is_err());
        assert!(gate_infidelity(&u, &Array2::from_elem((3, 3), c(1.0, 0.0))).is_err());
    }

    #[test]
    fn amplitude_examples() {
        let a = reconstruct_amplitude(InterferometerPair {
            p0: 1.0,
            p_half: 0.5,
        })
        .unwrap();
        assert!((a - c(1.0, 0.0)).norm() < 1e-15);
        let a = reconstruct_amplitude(InterferometerPair {
            p0: 0.25,
            p_half: 0.25,
        })
        .unwrap();
        assert!(a.norm() < 1e-15);
        assert!(matches!(
            reconstruct_amplitude(InterferometerPair {
                p0: 3.0,
                p_half: 0.0
            }),
            Err(Error::Reconstruction { .. })
        ));
    }

    #[test]
    fn ambiguous_pair_has_two_roots() {
        let a = c(-0.6, -0.6);
        let b = c(-0.4, -0.4);
        let pa = InterferometerPair::from_amplitude(a);
        let pb = InterferometerPair::from_amplitude(b);
        assert!((pa.p0 - pb.p0).abs() < 1e-15 && (pa.p_half - pb.p_half).abs() < 1e-15);
        let cands = pa.candidates();
        assert_eq!(cands.len(), 2);
        // tie goes to the smaller magnitude
        assert!((reconstruct_amplitude(pa).unwrap() - b).norm() < 1e-12);
    }

    #[test]
    fn roundtrip_outside_ambiguous_lens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 1000 {
            let r = rng.random_range(0.0f64..1.0).sqrt();
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let a = Complex64::from_polar(r, phi);
            // the partner root |a + 1 + i|^2 is inadmissible or larger
            if (a + c(1.0, 1.0)).norm_sqr() <= a.norm_sqr() {
                continue;
            }
            let back = reconstruct_amplitude(InterferometerPair::from_amplitude(a)).unwrap();
            assert!((back - a).norm() < 1e-10, "{a} -> {back}");
            checked += 1;
        }
    }

    #[test]
    fn unitary_assembly_roundtrip() {
        let u: ComplexMatrix = Array2::eye(3);
        let mut step = vec![0.0; 18];
        measure_unitary(&u, Mode::Quantum, None, &mut step).unwrap();
        let a = unitary_from_trace(&step).unwrap();
        assert!((a.matrix - &u).iter().all(|z| z.norm() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let u = random_unitary(&mut rng, 3);
            measure_unitary(&u, Mode::Quantum, None, &mut step).unwrap();
            let a = unitary_from_trace(&step).unwrap();
            assert!(!a.flagged);
            assert!(a.residual < 1e-8);
            let err = (&a.matrix - &u)
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "err {err}");
        }
        assert!(unitary_from_trace(&[0.0; 17]).is_err());
    }
}
