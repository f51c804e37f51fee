//! Ground-truth physics of the waveguide chip.
//!
//! Voltages on `2n` electrodes set the propagation constants and the
//! nearest-neighbour couplings of a tridiagonal Hamiltonian. Before they do,
//! a trapped-charge state low-pass filters every electrode, which is what
//! gives the chip its memory. Outputs are either loss-weighted normalized
//! powers (classical) or Mach-Zehnder detector powers (quantum).

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{mat_exp_unitary, ComplexMatrix, HermitianMatrix};

/// Which measurement the chip is read out with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normalized output powers, `n` channels per input waveguide.
    Classical,
    /// Interferometer powers at reference phases 0 and pi/2, `2n` channels
    /// per input waveguide.
    Quantum,
}

impl Mode {
    /// Measurement channels per time step for an `n`-waveguide chip.
    pub fn channels(self, n: usize) -> usize {
        match self {
            Mode::Classical => n * n,
            Mode::Quantum => 2 * n * n,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Classical => "classical",
            Mode::Quantum => "quantum",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classical" => Ok(Mode::Classical),
            "quantum" => Ok(Mode::Quantum),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Trapped-charge distortion: `q[t+1] = q[t] + dt (v[t]/tau_charge - q[t]/tau_diffuse)`
/// and the waveguide sees `v[t] - gain q[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionParams {
    /// ms
    pub tau_charge: f64,
    /// ms
    pub tau_diffuse: f64,
    pub gain: f64,
}

impl Default for DistortionParams {
    fn default() -> Self {
        DistortionParams {
            tau_charge: 20.0,
            tau_diffuse: 50.0,
            gain: 0.3,
        }
    }
}

/// Physical and measurement constants of the simulated chip.
///
/// Lengths are in meters, couplings in rad/m, voltages in volts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipParams {
    pub n: usize,
    pub lambda: f64,
    pub l: f64,
    pub n0: f64,
    pub delta_n: f64,
    pub c0: f64,
    pub delta_c1: f64,
    pub delta_c2: f64,
    pub eps: Vec<f64>,
    pub v_max: f64,
    pub distortion: DistortionParams,
    /// Optional `(2n-1) x 2n` map from electrode voltages to the `n` waveguide
    /// fields followed by the `n-1` gap fields. `None` is the adjacent-pair
    /// default of [`electrode_fields`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electrode_map: Option<Vec<Vec<f64>>>,
}

impl Default for ChipParams {
    fn default() -> Self {
        ChipParams {
            n: 3,
            lambda: 808e-9,
            l: 3.6e-2,
            n0: 2.1753,
            delta_n: 5e-6,
            c0: 100.0,
            delta_c1: 1.5,
            delta_c2: -1.3,
            eps: vec![0.9, 0.8, 0.5],
            v_max: 10.0,
            distortion: DistortionParams::default(),
            electrode_map: None,
        }
    }
}

/// Same fields as [`ChipParams`], every one optional, for config parsing.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChipParams {
    n: Option<usize>,
    lambda: Option<f64>,
    l: Option<f64>,
    n0: Option<f64>,
    delta_n: Option<f64>,
    c0: Option<f64>,
    delta_c1: Option<f64>,
    delta_c2: Option<f64>,
    eps: Option<Vec<f64>>,
    v_max: Option<f64>,
    distortion: Option<DistortionParams>,
    electrode_map: Option<Vec<Vec<f64>>>,
}

impl ChipParams {
    /// Parses a TOML document; absent keys take the default device values.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawChipParams =
            toml::from_str(text).map_err(|e| Error::Config(format!("chip params: {e}")))?;
        let d = ChipParams::default();
        let n = raw.n.unwrap_or(d.n);
        let eps = match raw.eps {
            Some(e) => e,
            None if n == d.n => d.eps,
            None => vec![1.0; n],
        };
        let p = ChipParams {
            n,
            lambda: raw.lambda.unwrap_or(d.lambda),
            l: raw.l.unwrap_or(d.l),
            n0: raw.n0.unwrap_or(d.n0),
            delta_n: raw.delta_n.unwrap_or(d.delta_n),
            c0: raw.c0.unwrap_or(d.c0),
            delta_c1: raw.delta_c1.unwrap_or(d.delta_c1),
            delta_c2: raw.delta_c2.unwrap_or(d.delta_c2),
            eps,
            v_max: raw.v_max.unwrap_or(d.v_max),
            distortion: raw.distortion.unwrap_or(d.distortion),
            electrode_map: raw.electrode_map,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("chip params serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 2 {
            return bad(format!("n must be >= 2, got {}", self.n));
        }
        if !(self.lambda > 0.0 && self.l > 0.0) {
            return bad("lambda and l must be positive".into());
        }
        if self.eps.len() != self.n {
            return bad(format!(
                "eps has {} entries, expected {}",
                self.eps.len(),
                self.n
            ));
        }
        if self.eps.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return bad("eps entries must lie in (0, 1]".into());
        }
        if !(self.v_max > 0.0) {
            return bad("v_max must be positive".into());
        }
        let d = &self.distortion;
        if !(d.tau_charge > 0.0 && d.tau_diffuse > 0.0) {
            return bad("distortion time constants must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.gain) {
            return bad("distortion gain must lie in [0, 1]".into());
        }
        if let Some(map) = &self.electrode_map {
            if map.len() != 2 * self.n - 1 || map.iter().any(|r| r.len() != 2 * self.n) {
                return bad(format!(
                    "electrode_map must be {}x{}",
                    2 * self.n - 1,
                    2 * self.n
                ));
            }
        }
        Ok(())
    }

    pub fn electrodes(&self) -> usize {
        2 * self.n
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("chip params serialize");
        hex::encode(Sha256::digest(&json))
    }

    /// Propagation constant per unit refractive index, `2 pi / lambda`.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.lambda
    }
}

/// Time-sampled voltages, `samples[t][e]` on electrode `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageSequence {
    /// ms
    pub dt: f64,
    pub samples: Array2<f64>,
}

impl VoltageSequence {
    pub fn zeros(dt: f64, steps: usize, electrodes: usize) -> Self {
        VoltageSequence {
            dt,
            samples: Array2::zeros((steps, electrodes)),
        }
    }

    pub fn steps(&self) -> usize {
        self.samples.nrows()
    }
}

/// Time-sampled measurement record, `channels[t][c]`.
///
/// Channel `c = m * w + j` belongs to input waveguide `m` with block width
/// `w = n` (classical: power at waveguide `j`) or `w = 2n` (quantum: `j = 2k`
/// is `P_k(0)`, `j = 2k + 1` is `P_k(pi/2)`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTrace {
    pub dt: f64,
    pub mode: Mode,
    pub channels: Array2<f64>,
}

/// Waveguide fields `(dv_wg, dv_gap)` from the electrode voltages.
///
/// Default map: waveguide `i` sits between electrodes `2i` and `2i+1`, the gap
/// between waveguides `i` and `i+1` between electrodes `2i+1` and `2i+2`.
pub fn electrode_fields(v: ArrayView1<f64>, params: &ChipParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = params.n;
    if v.len() != 2 * n {
        return Err(Error::Contract(format!(
            "expected {} electrode voltages, got {}",
            2 * n,
            v.len()
        )));
    }
    if let Some(map) = &params.electrode_map {
        let row = |r: &Vec<f64>| r.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
        let wg = map[..n].iter().map(row).collect();
        let gap = map[n..].iter().map(row).collect();
        return Ok((wg, gap));
    }
    let wg = (0..n).map(|i| v[2 * i] - v[2 * i + 1]).collect();
    let gap = (0..n - 1).map(|i| v[2 * i + 1] - v[2 * i + 2]).collect();
    Ok((wg, gap))
}

/// Tridiagonal real Hamiltonian (rad/m) for one voltage vector.
pub fn build_hamiltonian(v: ArrayView1<f64>, params: &ChipParams) -> Result<HermitianMatrix> {
    let n = params.n;
    let (wg, gap) = electrode_fields(v, params)?;
    let k = params.wavenumber();
    let mut h = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        h[[i, i]] = k * (params.n0 + params.delta_n * wg[i]);
    }
    for i in 0..n - 1 {
        let c = params.c0 + params.delta_c1 * gap[i] + params.delta_c2 * (wg[i] + wg[i + 1]);
        h[[i, i + 1]] = c;
        h[[i + 1, i]] = c;
    }
    Ok(HermitianMatrix::from_real_symmetric(&h))
}

/// Voltages actually felt by the waveguides after trapped-charge drift.
pub fn distort(v: &VoltageSequence, params: &ChipParams) -> VoltageSequence {
    let d = &params.distortion;
    let mut out = v.samples.clone();
    let mut q = Array1::<f64>::zeros(v.samples.ncols());
    for (t, row) in v.samples.outer_iter().enumerate() {
        for (e, &x) in row.iter().enumerate() {
            out[[t, e]] = x - d.gain * q[e];
            q[e] += v.dt * (x / d.tau_charge - q[e] / d.tau_diffuse);
        }
    }
    VoltageSequence {
        dt: v.dt,
        samples: out,
    }
}

/// Loss-weighted, renormalized powers `eps_k p_k / sum_i eps_i p_i`.
pub fn apply_coupling_loss(p: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if p.len() != eps.len() {
        return Err(Error::Shape(format!(
            "{} powers vs {} loss coefficients",
            p.len(),
            eps.len()
        )));
    }
    if p.iter().any(|&x| x < 0.0) || eps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Contract("powers must be >= 0 and eps > 0".into()));
    }
    let total: f64 = p.iter().zip(eps).map(|(a, b)| a * b).sum();
    if !(total > 0.0) {
        return Err(Error::Contract("all-zero power vector".into()));
    }
    Ok(p.iter().zip(eps).map(|(a, b)| a * b / total).collect())
}

/// Detector powers `(P(0), P(pi/2)) = (|a + 1|^2 / 4, |a + i|^2 / 4)`.
pub fn interferometer_pair(a: Complex64) -> (f64, f64) {
    (
        0.25 * (a + Complex64::new(1.0, 0.0)).norm_sqr(),
        0.25 * (a + Complex64::new(0.0, 1.0)).norm_sqr(),
    )
}

/// One time step of measurements for evolution `u`, written into `out`.
/// `eps = None` skips the coupling loss in classical mode.
pub fn measure_unitary(
    u: &ComplexMatrix,
    mode: Mode,
    eps: Option<&[f64]>,
    out: &mut [f64],
) -> Result<()> {
    let n = u.nrows();
    assert_eq!(out.len(), mode.channels(n));
    for m in 0..n {
        match mode {
            Mode::Classical => {
                let p: Vec<f64> = (0..n).map(|k| u[[k, m]].norm_sqr()).collect();
                let block = &mut out[m * n..(m + 1) * n];
                match eps {
                    Some(e) => block.copy_from_slice(&apply_coupling_loss(&p, e)?),
                    None => block.copy_from_slice(&p),
                }
            }
            Mode::Quantum => {
                for k in 0..n {
                    let (p0, ph) = interferometer_pair(u[[k, m]]);
                    out[m * 2 * n + 2 * k] = p0;
                    out[m * 2 * n + 2 * k + 1] = ph;
                }
            }
        }
    }
    Ok(())
}

/// Runs the chip on a voltage sequence. The coupling loss applies only in
/// classical mode.
pub fn simulate(v: &VoltageSequence, params: &ChipParams, mode: Mode) -> Result<MeasurementTrace> {
    Ok(simulate_with_unitaries(v, params, mode)?.0)
}

/// [`simulate`] that also returns the evolution operator of every step.
pub fn simulate_with_unitaries(
    v: &VoltageSequence,
    params: &ChipParams,
    mode: Mode,
) -> Result<(MeasurementTrace, Vec<ComplexMatrix>)> {
    if v.samples.ncols() != params.electrodes() {
        return Err(Error::Contract(format!(
            "voltage sequence has {} electrodes, chip has {}",
            v.samples.ncols(),
            params.electrodes()
        )));
    }
    if v.samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("non-finite voltage sample".into()));
    }
    let eff = distort(v, params);
    let n = params.n;
    let mut channels = Array2::zeros((v.steps(), mode.channels(n)));
    let mut unitaries = Vec::with_capacity(v.steps());
    let eps = match mode {
        Mode::Classical => Some(params.eps.as_slice()),
        Mode::Quantum => None,
    };
    for (t, row) in eff.samples.outer_iter().enumerate() {
        let h = build_hamiltonian(row, params)?;
        let u = mat_exp_unitary(&h, params.l)?;
        let mut out = channels.row_mut(t);
        measure_unitary(&u, mode, eps, out.as_slice_mut().expect("row-major"))?;
        unitaries.push(u);
    }
    Ok((
        MeasurementTrace {
            dt: v.dt,
            mode,
            channels,
        },
        unitaries,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, s};

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fields_from_electrodes() {
        let p = ChipParams::default();
        let (wg, gap) = electrode_fields(arr1(&[0.0; 6]).view(), &p).unwrap();
        assert_eq!(wg, vec![0.0; 3]);
        assert_eq!(gap, vec![0.0; 2]);

        let (wg, gap) = electrode_fields(arr1(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).view(), &p).unwrap();
        assert_eq!(wg, vec![-1.0, 0.0, 0.0]);
        assert_eq!(gap, vec![1.0, 0.0]);

        let (wg, gap) = electrode_fields(arr1(&[2.5; 6]).view(), &p).unwrap();
        assert!(wg.iter().chain(&gap).all(|&x| x == 0.0));

        assert!(electrode_fields(arr1(&[0.0; 5]).view(), &p).is_err());
    }

    #[test]
    fn custom_electrode_map() {
        let mut p = ChipParams::default();
        let mut map = vec![vec![0.0; 6]; 5];
        map[0][3] = 2.0;
        map[4][5] = -1.0;
        p.electrode_map = Some(map);
        p.validate().unwrap();
        let (wg, gap) = electrode_fields(arr1(&[0.0, 0.0, 0.0, 1.5, 0.0, 4.0]).view(), &p).unwrap();
        assert_eq!(wg, vec![3.0, 0.0, 0.0]);
        assert_eq!(gap, vec![0.0, -4.0]);
    }

    #[test]
    fn zero_voltage_hamiltonian() {
        let p = ChipParams::default();
        let h = build_hamiltonian(arr1(&[0.0; 6]).view(), &p).unwrap();
        let beta = 2.0 * PI / 808e-9 * 2.1753;
        for i in 0..3 {
            assert!(approx(h[[i, i]].re, beta, 1e-6));
            assert!(approx(h[[i, i]].re / 1e7, 1.69156, 1e-5));
        }
        assert_eq!(h[[0, 1]].re, 100.0);
        assert_eq!(h[[1, 2]].re, 100.0);
        assert_eq!(h[[0, 2]].re, 0.0);
    }

    #[test]
    fn single_electrode_hamiltonian() {
        let p = ChipParams::default();
        let h0 = build_hamiltonian(arr1(&[0.0; 6]).view(), &p).unwrap();
        let h = build_hamiltonian(arr1(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).view(), &p).unwrap();
        let shift = 2.0 * PI / 808e-9 * 5e-6 * -1.0;
        assert!(approx(h[[0, 0]].re - h0[[0, 0]].re, shift, 1e-6));
        assert!(approx(
            h[[0, 1]].re,
            100.0 + 1.5 * 1.0 + (-1.3) * (-1.0),
            1e-12
        ));
        assert!(approx(h[[1, 2]].re, 100.0, 1e-12));
    }

    #[test]
    fn decoupled_limit_is_voltage_independent() {
        let mut p = ChipParams::default();
        p.delta_n = 0.0;
        p.delta_c1 = 0.0;
        p.delta_c2 = 0.0;
        let a = build_hamiltonian(arr1(&[0.0; 6]).view(), &p).unwrap();
        let b = build_hamiltonian(arr1(&[0.0, 3.0, -2.0, 5.0, 1.0, 0.0]).view(), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distortion_trivial_cases() {
        let p = ChipParams::default();
        let z = VoltageSequence::zeros(0.2, 50, 6);
        assert_eq!(distort(&z, &p).samples, z.samples);

        let mut p0 = p.clone();
        p0.distortion.gain = 0.0;
        let mut v = VoltageSequence::zeros(0.2, 50, 6);
        v.samples.slice_mut(s![10..30, 1..5]).fill(3.0);
        assert_eq!(distort(&v, &p0).samples, v.samples);
    }

    #[test]
    fn distortion_decays_after_step() {
        let p = ChipParams::default();
        let dt = 0.2;
        let mut v = VoltageSequence::zeros(dt, 400, 6);
        v.samples.slice_mut(s![0..100, 1]).fill(1.0);
        let out = distort(&v, &p);
        // closed form: during the step q[t] = A (1 - r^t) with r = 1 - dt/tau_d,
        // A = tau_d / tau_c, afterwards q decays by r per sample.
        let d = &p.distortion;
        let r = 1.0 - dt / d.tau_diffuse;
        let a = d.tau_diffuse / d.tau_charge;
        for t in 0..100 {
            let q = a * (1.0 - r.powi(t as i32));
            assert!(approx(out.samples[[t, 1]], 1.0 - d.gain * q, 1e-12));
        }
        let q_end = a * (1.0 - r.powi(100));
        for t in 100..400 {
            let q = q_end * r.powi(t as i32 - 100);
            assert!(approx(out.samples[[t, 1]], -d.gain * q, 1e-12));
        }
        // memory: still non-zero long after the pulse
        assert!(out.samples[[399, 1]].abs() > 1e-3);
        assert_eq!(out.samples[[250, 0]], 0.0);
    }

    #[test]
    fn coupling_loss_examples() {
        let out = apply_coupling_loss(&[0.2, 0.3, 0.5], &[1.0, 1.0, 1.0]).unwrap();
        for (a, b) in out.iter().zip([0.2, 0.3, 0.5]) {
            assert!(approx(*a, b, 1e-15));
        }
        let third = 1.0 / 3.0;
        let out = apply_coupling_loss(&[third; 3], &[0.9, 0.8, 0.5]).unwrap();
        for (a, b) in out.iter().zip([0.40909, 0.36364, 0.22727]) {
            assert!(approx(*a, b, 5e-6));
        }
        assert_eq!(
            apply_coupling_loss(&[1.0, 0.0, 0.0], &[0.3, 0.8, 0.5]).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert!(apply_coupling_loss(&[0.0; 3], &[0.9, 0.8, 0.5]).is_err());
    }

    #[test]
    fn static_chip_gives_constant_trace() {
        let mut p = ChipParams::default();
        p.delta_n = 0.0;
        p.delta_c1 = 0.0;
        p.delta_c2 = 0.0;
        p.eps = vec![1.0; 3];
        let mut v = VoltageSequence::zeros(0.2, 40, 6);
        v.samples.slice_mut(s![5..20, 1..5]).fill(-4.0);
        let tr = simulate(&v, &p, Mode::Classical).unwrap();
        for t in 1..40 {
            for c in 0..9 {
                assert!(approx(tr.channels[[t, c]], tr.channels[[0, c]], 1e-12));
            }
        }
    }

    #[test]
    fn classical_blocks_sum_to_one() {
        let p = ChipParams::default();
        let mut v = VoltageSequence::zeros(0.2, 60, 6);
        v.samples.slice_mut(s![10..40, 1..5]).assign(
            &ndarray::arr2(&[[1.0, -3.0, 4.5, 2.0]])
                .broadcast((30, 4))
                .unwrap(),
        );
        let tr = simulate(&v, &p, Mode::Classical).unwrap();
        assert_eq!(tr.channels.ncols(), 9);
        for row in tr.channels.outer_iter() {
            for m in 0..3 {
                let s: f64 = row.slice(s![m * 3..m * 3 + 3]).sum();
                assert!(approx(s, 1.0, 1e-9));
            }
        }
    }

    #[test]
    fn quantum_identity_readout() {
        let u: ComplexMatrix = Array2::eye(3);
        let mut out = vec![0.0; 18];
        measure_unitary(&u, Mode::Quantum, None, &mut out).unwrap();
        assert!(approx(out[0], 1.0, 1e-15));
        assert!(approx(out[1], 0.5, 1e-15));
        assert!(approx(out[2], 0.25, 1e-15) && approx(out[3], 0.25, 1e-15));
    }

    #[test]
    fn pointwise_without_distortion() {
        let mut p = ChipParams::default();
        p.distortion.gain = 0.0;
        let mut v = VoltageSequence::zeros(0.2, 6, 6);
        for t in 0..6 {
            for e in 1..5 {
                v.samples[[t, e]] = (t as f64 - 2.5) * (e as f64 - 2.0);
            }
        }
        let a = simulate(&v, &p, Mode::Classical).unwrap();
        let mut w = v.clone();
        for e in 0..6 {
            w.samples.swap([1, e], [4, e]);
        }
        let b = simulate(&w, &p, Mode::Classical).unwrap();
        assert_eq!(a.channels.row(1), b.channels.row(4));
        assert_eq!(a.channels.row(4), b.channels.row(1));
        assert_eq!(a.channels.row(0), b.channels.row(0));
    }

    #[test]
    fn config_defaults_and_overrides() {
        let p = ChipParams::from_toml_str("").unwrap();
        assert_eq!(p, ChipParams::default());
        let p = ChipParams::from_toml_str("c0 = 80.0\n[distortion]\ngain = 0.0\n").unwrap();
        assert_eq!(p.c0, 80.0);
        assert_eq!(p.distortion.gain, 0.0);
        assert_eq!(p.distortion.tau_charge, 20.0);
        assert!(ChipParams::from_toml_str("n = 1").is_err());
        assert!(ChipParams::from_toml_str("eps = [0.9, 1.5, 0.5]").is_err());
        assert!(ChipParams::from_toml_str("bogus = 1").is_err());
        let q = ChipParams::from_toml_str(&p.to_toml_string()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
        assert_ne!(p.digest(), ChipParams::default().digest());
    }
}
