//! The graybox chip model.
//!
//! Voltages `(B, T, 2n)` go through a GRU and a time-distributed linear head
//! whose outputs fill a Hermitian interaction term. Adding the learned
//! zero-voltage term gives the per-step generator, which is exponentiated and
//! measured for every basis input: ε-weighted normalized powers in classical
//! mode, interferometer powers in quantum mode.
//!
//! Internally the generator is kept in radians (`K = H l`, `U = exp(-iK)`);
//! the chip length only enters when reporting `H` in rad/m.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{
    gru_forward, linear_timedistributed, load_tensors, save_tensors, uniform, GruWeights,
    LrSchedule, ParamSet, Rmsprop, RmspropConfig, Tape, Tensor, Var,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{
    exp_adjoint_from_spectrum, exp_from_spectrum, herm_eig, ComplexMatrix, HermitianMatrix,
    Spectrum,
};
use crate::simulator::{ChipParams, MeasurementTrace, Mode, VoltageSequence};

/// Architecture settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayboxConfig {
    pub n: usize,
    pub hidden: usize,
    pub mode: Mode,
    /// Chip length in meters.
    pub l: f64,
}

impl GrayboxConfig {
    pub fn new(n: usize, mode: Mode, l: f64) -> Self {
        GrayboxConfig {
            n,
            hidden: 60,
            mode,
            l,
        }
    }

    pub fn for_chip(params: &ChipParams, mode: Mode) -> Self {
        Self::new(params.n, mode, params.l)
    }

    pub fn input_width(&self) -> usize {
        2 * self.n
    }

    /// `n(n+1)/2` real symmetric entries, or `n^2` Hermitian coordinates.
    pub fn head_width(&self) -> usize {
        match self.mode {
            Mode::Classical => self.n * (self.n + 1) / 2,
            Mode::Quantum => self.n * self.n,
        }
    }

    pub fn channels(&self) -> usize {
        self.mode.channels(self.n)
    }
}

/// Upper-triangle positions `(j, k)`, `j <= k`, in row-major order.
pub fn upper_indices(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|j| (j..n).map(move |k| (j, k))).collect()
}

/// Hermitian matrix from head-style coordinates.
///
/// Classical: `values` is the upper triangle; the matrix is `A + A^T` with
/// the diagonal multiplied by `diag_scale` (2 reproduces the literal sum with
/// the transpose). Quantum: `values` is an `n x n` row-major block whose upper
/// triangle holds real parts and strict lower triangle imaginary parts, so
/// `K[j][k] = M[j][k] - i M[k][j]` for `j < k`.
pub fn hermitize(values: &[f64], n: usize, mode: Mode, diag_scale: f64) -> ComplexMatrix {
    let mut k = Array2::zeros((n, n));
    match mode {
        Mode::Classical => {
            for (&v, (a, b)) in values.iter().zip(upper_indices(n)) {
                if a == b {
                    k[[a, a]] = Complex64::new(diag_scale * v, 0.0);
                } else {
                    k[[a, b]] = Complex64::new(v, 0.0);
                    k[[b, a]] = Complex64::new(v, 0.0);
                }
            }
        }
        Mode::Quantum => {
            for a in 0..n {
                k[[a, a]] = Complex64::new(diag_scale * values[a * n + a], 0.0);
                for b in a + 1..n {
                    let z = Complex64::new(values[a * n + b], -values[b * n + a]);
                    k[[a, b]] = z;
                    k[[b, a]] = z.conj();
                }
            }
        }
    }
    k
}

/// Pulls a Hermitian gradient `G` (with `dL = Re tr(G† dK)`) back onto the
/// coordinates of [`hermitize`], accumulating into `out`.
fn hermitize_grad(g: &ComplexMatrix, n: usize, mode: Mode, diag_scale: f64, out: &mut [f64]) {
    match mode {
        Mode::Classical => {
            for (o, (a, b)) in out.iter_mut().zip(upper_indices(n)) {
                *o += if a == b {
                    diag_scale * g[[a, a]].re
                } else {
                    2.0 * g[[a, b]].re
                };
            }
        }
        Mode::Quantum => {
            for a in 0..n {
                out[a * n + a] += diag_scale * g[[a, a]].re;
                for b in a + 1..n {
                    out[a * n + b] += 2.0 * g[[a, b]].re;
                    out[b * n + a] -= 2.0 * g[[a, b]].im;
                }
            }
        }
    }
}

/// Generator `H = (K_I + K_0) / l` in rad/m for one head output.
pub fn construct_hamiltonian(
    head_out: &[f64],
    h0_params: &[f64],
    cfg: &GrayboxConfig,
) -> Result<HermitianMatrix> {
    let w = cfg.head_width();
    if head_out.len() != w || h0_params.len() != w {
        return Err(Error::Shape(format!(
            "expected {w} head and zero-voltage values, got {} and {}",
            head_out.len(),
            h0_params.len()
        )));
    }
    let k = hermitize(head_out, cfg.n, cfg.mode, 2.0) + hermitize(h0_params, cfg.n, cfg.mode, 1.0);
    Ok(HermitianMatrix::project(&k.mapv(|z| z / cfg.l)))
}

/// Writes the measurements of evolution `u` into `out`: classical blocks are
/// `|U_km|^2`, ε-weighted and renormalized when `eps` is given; quantum
/// blocks are `(|U_km + 1|^2, |U_km + i|^2) / 4` pairs.
fn measure(u: &ComplexMatrix, mode: Mode, eps: Option<&[f64]>, out: &mut [f64]) {
    let n = u.nrows();
    for m in 0..n {
        match mode {
            Mode::Classical => {
                let block = &mut out[m * n..(m + 1) * n];
                for k in 0..n {
                    block[k] = u[[k, m]].norm_sqr();
                }
                if let Some(e) = eps {
                    let s: f64 = block.iter().zip(e).map(|(p, e)| p * e).sum();
                    for (p, e) in block.iter_mut().zip(e) {
                        *p = *p * e / s;
                    }
                }
            }
            Mode::Quantum => {
                for k in 0..n {
                    let a = u[[k, m]];
                    out[m * 2 * n + 2 * k] = 0.25 * (a + 1.0).norm_sqr();
                    out[m * 2 * n + 2 * k + 1] = 0.25 * (a + Complex64::i()).norm_sqr();
                }
            }
        }
    }
}

/// Reverse of [`measure`]: returns `dL/dRe U + i dL/dIm U` and adds the
/// gradient with respect to `log eps` into `g_log_eps`.
fn measure_grad(
    u: &ComplexMatrix,
    mode: Mode,
    eps: Option<&[f64]>,
    gy: &[f64],
    g_log_eps: Option<&mut [f64]>,
) -> ComplexMatrix {
    let n = u.nrows();
    let mut gu = Array2::zeros((n, n));
    match mode {
        Mode::Classical => match eps {
            Some(e) => {
                let mut gle = g_log_eps;
                for m in 0..n {
                    let p: Vec<f64> = (0..n).map(|k| u[[k, m]].norm_sqr()).collect();
                    let s: f64 = p.iter().zip(e).map(|(p, e)| p * e).sum();
                    let g = &gy[m * n..(m + 1) * n];
                    let dot: f64 = (0..n).map(|k| g[k] * e[k] * p[k] / s).sum();
                    for j in 0..n {
                        let common = (g[j] - dot) / s;
                        gu[[j, m]] = u[[j, m]] * (2.0 * e[j] * common);
                        if let Some(gl) = gle.as_deref_mut() {
                            gl[j] += e[j] * p[j] * common;
                        }
                    }
                }
            }
            None => {
                for m in 0..n {
                    for k in 0..n {
                        gu[[k, m]] = u[[k, m]] * (2.0 * gy[m * n + k]);
                    }
                }
            }
        },
        Mode::Quantum => {
            for m in 0..n {
                for k in 0..n {
                    let a = u[[k, m]];
                    let g0 = gy[m * 2 * n + 2 * k];
                    let gh = gy[m * 2 * n + 2 * k + 1];
                    gu[[k, m]] = (a + 1.0) * (0.5 * g0) + (a + Complex64::i()) * (0.5 * gh);
                }
            }
        }
    }
    gu
}

struct StepState {
    spec: Spectrum,
    u: ComplexMatrix,
}

fn step_state(head: &[f64], k0: &ComplexMatrix, n: usize, mode: Mode) -> Result<StepState> {
    let k = hermitize(head, n, mode, 2.0) + k0;
    let spec = herm_eig(&HermitianMatrix::project(&k))?;
    let u = exp_from_spectrum(&spec, 1.0);
    Ok(StepState { spec, u })
}

/// Differentiable physics layers: head outputs `(B, T, w)` to measurements
/// `(B, T, C)`. `log_eps = None` removes the coupling-loss layer.
pub fn physics<'t>(
    head: Var<'t>,
    h0: Var<'t>,
    log_eps: Option<Var<'t>>,
    n: usize,
    mode: Mode,
) -> Result<Var<'t>> {
    let tape = head.tape();
    let hv = head.value();
    let shape = hv.shape().to_vec();
    let w = *shape.last().expect("rank-3");
    let (nb, nt) = (shape[0], shape[1]);
    let h0v = h0.value().iter().copied().collect::<Vec<f64>>();
    let k0 = hermitize(&h0v, n, mode, 1.0);
    let eps: Option<Vec<f64>> = log_eps.map(|v| v.value().iter().map(|x| x.exp()).collect());
    let channels = mode.channels(n);
    let flat = hv
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nb * nt, w))
        .expect("size");
    let results: Vec<(StepState, Vec<f64>)> = (0..nb * nt)
        .into_par_iter()
        .map(|i| {
            let st = step_state(flat.row(i).as_slice().expect("row"), &k0, n, mode)?;
            let mut y = vec![0.0; channels];
            measure(&st.u, mode, eps.as_deref(), &mut y);
            Ok((st, y))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(nb * nt * channels);
    let mut states = Vec::with_capacity(nb * nt);
    for (st, y) in results {
        out.extend(y);
        states.push(st);
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[nb, nt, channels]), out).expect("size");
    let mut parents = vec![head, h0];
    if let Some(le) = log_eps {
        parents.push(le);
    }
    let n_eps = eps.as_ref().map_or(0, Vec::len);
    Ok(tape.custom(&parents, out, move |g| {
        let gflat = g
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((nb * nt, channels))
            .expect("size");
        let per_item: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = states
            .par_iter()
            .enumerate()
            .map(|(i, st)| {
                let gy = gflat.row(i);
                let mut gle = vec![0.0; n_eps];
                let gu = measure_grad(
                    &st.u,
                    mode,
                    eps.as_deref(),
                    gy.as_slice().expect("row"),
                    if n_eps > 0 { Some(&mut gle) } else { None },
                );
                let gk = exp_adjoint_from_spectrum(&st.spec, 1.0, &gu).into_matrix();
                let mut ghead = vec![0.0; w];
                hermitize_grad(&gk, n, mode, 2.0, &mut ghead);
                let mut gh0 = vec![0.0; w];
                hermitize_grad(&gk, n, mode, 1.0, &mut gh0);
                (ghead, gh0, gle)
            })
            .collect();
        let mut ghead = Array2::<f64>::zeros((nb * nt, w));
        let mut gh0 = Array1::<f64>::zeros(w);
        let mut gle = Array1::<f64>::zeros(n_eps);
        for (i, (a, b, c)) in per_item.into_iter().enumerate() {
            ghead.row_mut(i).assign(&Array1::from(a));
            gh0 += &Array1::from(b);
            gle += &Array1::from(c);
        }
        let mut grads = vec![
            Some(
                ghead
                    .into_shape_with_order(IxDyn(&[nb, nt, w]))
                    .expect("size"),
            ),
            Some(gh0.into_dyn()),
        ];
        if n_eps > 0 {
            grads.push(Some(gle.into_dyn()));
        }
        grads
    }))
}

/// Metadata stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: GrayboxConfig,
    pub stage1_done: bool,
    pub stage2_done: bool,
    /// Digest of the chip parameters the training data came from.
    pub params_digest: Option<String>,
    pub stage1_mse: Option<f64>,
}

/// All learnable state of the graybox model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub meta: ModelMeta,
    pub params: ParamSet,
    pub gru: GruWeights,
    pub head_w: usize,
    pub head_b: usize,
    pub h0: usize,
    pub log_eps: usize,
}

impl ModelState {
    /// Fresh model: recurrent weights and biases and the head matrix uniform
    /// in `+-1/sqrt(hidden)`, zero head bias, zero `H_0`, unit ε.
    pub fn new(config: GrayboxConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gru = GruWeights::init(
            &mut params,
            "gru",
            config.input_width(),
            config.hidden,
            &mut rng,
        );
        let hw = config.head_width();
        let head_w = params.add(
            "head.w",
            uniform(
                &mut rng,
                &[hw, config.hidden],
                1.0 / (config.hidden as f64).sqrt(),
            ),
            true,
        );
        let head_b = params.add("head.b", ArrayD::zeros(vec![hw]), true);
        let h0 = params.add("h0", ArrayD::zeros(vec![hw]), true);
        let log_eps = params.add(
            "log_eps",
            ArrayD::zeros(vec![config.n]),
            config.mode == Mode::Classical,
        );
        ModelState {
            meta: ModelMeta {
                config,
                stage1_done: false,
                stage2_done: false,
                params_digest: None,
                stage1_mse: None,
            },
            params,
            gru,
            head_w,
            head_b,
            h0,
            log_eps,
        }
    }

    pub fn config(&self) -> &GrayboxConfig {
        &self.meta.config
    }

    pub fn h0_values(&self) -> Vec<f64> {
        self.params.get(self.h0).value.iter().copied().collect()
    }

    /// Loss coefficients normalized so the largest is 1.
    pub fn eps(&self) -> Vec<f64> {
        let e: Vec<f64> = self
            .params
            .get(self.log_eps)
            .value
            .iter()
            .map(|x| x.exp())
            .collect();
        let max = e.iter().fold(0.0_f64, |m, &x| m.max(x));
        e.iter().map(|x| x / max).collect()
    }

    /// Learned zero-voltage Hamiltonian, rad/m.
    pub fn h0_matrix(&self) -> HermitianMatrix {
        let cfg = self.config();
        let k = hermitize(&self.h0_values(), cfg.n, cfg.mode, 1.0);
        HermitianMatrix::project(&k.mapv(|z| z / cfg.l))
    }

    /// Sets which parameter groups the optimizer may change.
    fn set_stage(&mut self, stage: u8) {
        let dynamic = stage == 2;
        for name in ["gru.w", "gru.u", "gru.b", "head.w", "head.b"] {
            self.params.set_trainable(name, dynamic);
        }
        self.params.set_trainable("h0", stage == 1);
        self.params.set_trainable(
            "log_eps",
            stage == 1 && self.config().mode == Mode::Classical,
        );
    }

    /// Records the model's prediction graph for a `(B, T, 2n)` batch.
    /// `leaf` decides how each parameter enters the tape, which lets callers
    /// embed the model frozen.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        with_loss: bool,
        leaf: &dyn Fn(&'t Tape, usize) -> Var<'t>,
    ) -> Result<Var<'t>> {
        let cfg = self.config();
        let hs = gru_forward(
            x,
            leaf(tape, self.gru.w),
            leaf(tape, self.gru.u),
            leaf(tape, self.gru.b),
            None,
        );
        let head = linear_timedistributed(hs, leaf(tape, self.head_w), leaf(tape, self.head_b));
        let log_eps = (with_loss && cfg.mode == Mode::Classical).then(|| leaf(tape, self.log_eps));
        physics(head, leaf(tape, self.h0), log_eps, cfg.n, cfg.mode)
    }

    /// Measurement predictions for a `(B, T, 2n)` batch.
    pub fn predict(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone().into_dyn());
        let y = self.forward_tape(&tape, xv, true, &|t, i| {
            t.constant(self.params.get(i).value.clone())
        })?;
        Ok(y.value()
            .as_ref()
            .clone()
            .into_dimensionality()
            .expect("rank-3"))
    }

    /// Interaction-head outputs `(T, w)` for one sequence.
    fn head_outputs(&self, v: &VoltageSequence) -> Array2<f64> {
        let tape = Tape::new();
        let x = v.samples.clone().insert_axis(Axis(0)).into_dyn();
        let c = |i: usize| tape.constant(self.params.get(i).value.clone());
        let hs = gru_forward(
            tape.constant(x),
            c(self.gru.w),
            c(self.gru.u),
            c(self.gru.b),
            None,
        );
        let head = linear_timedistributed(hs, c(self.head_w), c(self.head_b));
        let hv = head.value();
        hv.index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("rank-2")
    }

    /// Per-layer predictions for one voltage sequence.
    pub fn forward(&self, v: &VoltageSequence) -> Result<PredictionBundle> {
        let cfg = *self.config();
        if v.samples.ncols() != cfg.input_width() {
            return Err(Error::Shape(format!(
                "model takes {} electrodes, sequence has {}",
                cfg.input_width(),
                v.samples.ncols()
            )));
        }
        let n = cfg.n;
        let heads = self.head_outputs(v);
        let h0 = self.h0_values();
        let k0 = hermitize(&h0, n, cfg.mode, 1.0);
        let eps_raw: Vec<f64> = self
            .params
            .get(self.log_eps)
            .value
            .iter()
            .map(|x| x.exp())
            .collect();
        let eps = (cfg.mode == Mode::Classical).then_some(eps_raw.as_slice());
        let steps = v.steps();
        let mut bundle = PredictionBundle {
            h_interaction: Vec::with_capacity(steps),
            h_total: Vec::with_capacity(steps),
            u: Vec::with_capacity(steps),
            ideal_outputs: Array2::zeros((steps, n * n)),
            measured_outputs: MeasurementTrace {
                dt: v.dt,
                mode: cfg.mode,
                channels: Array2::zeros((steps, cfg.channels())),
            },
        };
        for t in 0..steps {
            let head = heads.row(t);
            let head = head.as_slice().expect("row");
            let ki = hermitize(head, n, cfg.mode, 2.0);
            let st = step_state(head, &k0, n, cfg.mode)?;
            let mut ideal = bundle.ideal_outputs.row_mut(t);
            measure(
                &st.u,
                Mode::Classical,
                None,
                ideal.as_slice_mut().expect("row"),
            );
            let mut meas = bundle.measured_outputs.channels.row_mut(t);
            measure(&st.u, cfg.mode, eps, meas.as_slice_mut().expect("row"));
            let hi = HermitianMatrix::project(&ki.mapv(|z| z / cfg.l));
            // Exact sum of the stored parts, so h_total - h_interaction == H_0.
            let ht = hi.add(&self.h0_matrix());
            bundle.h_interaction.push(hi);
            bundle.h_total.push(ht);
            bundle.u.push(st.u);
        }
        Ok(bundle)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        save_tensors(path, &meta, &self.params.to_named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = load_tensors(path)?;
        let meta: ModelMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = ModelState::new(meta.config, 0);
        model.params.load_named(&tensors)?;
        model.meta = meta;
        Ok(model)
    }
}

/// Outputs of every layer for one sequence.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// rad/m
    pub h_interaction: Vec<HermitianMatrix>,
    /// rad/m, `h_interaction + H_0`
    pub h_total: Vec<HermitianMatrix>,
    pub u: Vec<ComplexMatrix>,
    /// `(T, n^2)` loss-free powers `|U_km|^2`, block `m` per input waveguide.
    pub ideal_outputs: Array2<f64>,
    pub measured_outputs: MeasurementTrace,
}

/// Stage-1 settings: multi-start fit of `H_0` and ε to the static readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub iterations: usize,
    pub restarts: usize,
    /// Initial `H_0` coordinates are uniform in `+-init_scale` radians.
    pub init_scale: f64,
    pub optimizer: RmspropConfig,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            iterations: 3000,
            restarts: 8,
            init_scale: 4.0,
            optimizer: RmspropConfig {
                lr: 3e-2,
                schedule: LrSchedule::Exponential {
                    final_lr: 1e-5,
                    iterations: 3000,
                },
                ..Default::default()
            },
            seed: 0,
        }
    }
}

/// Stage-2 settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub iterations: usize,
    pub optimizer: RmspropConfig,
    /// Examples drawn without replacement per iteration; `None` or a size at
    /// least the set trains on the full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            iterations: 2000,
            optimizer: RmspropConfig {
                lr: 3e-3,
                schedule: LrSchedule::Exponential {
                    final_lr: 1e-4,
                    iterations: 2000,
                },
                ..Default::default()
            },
            batch_size: Some(128),
            seed: 0,
        }
    }
}

pub struct Stage1Report {
    pub mse: f64,
    /// Final MSE of every restart.
    pub restarts: Vec<f64>,
}

/// A non-finite loss or, after an update, a non-finite parameter is divergence.
fn check_finite(loss: f64, iteration: usize, history: &[f64]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            loss,
            history: history.to_vec(),
        })
    }
}

/// Fits `H_0` and ε to zero-voltage readings; the recurrent path is absent and
/// its parameters are untouched. Afterwards `H_0` and ε are frozen.
pub fn train_stage1(
    model: &mut ModelState,
    readings: &[f64],
    cfg: &Stage1Config,
) -> Result<Stage1Report> {
    let mc = *model.config();
    if readings.len() != mc.channels() {
        return Err(Error::Shape(format!(
            "expected {} static readings, got {}",
            mc.channels(),
            readings.len()
        )));
    }
    if cfg.iterations == 0 {
        return Ok(Stage1Report {
            mse: f64::NAN,
            restarts: vec![],
        });
    }
    model.set_stage(1);
    let target =
        ArrayD::from_shape_vec(IxDyn(&[1, 1, readings.len()]), readings.to_vec()).expect("size");
    let zeros = ArrayD::zeros(IxDyn(&[1, 1, mc.head_width()]));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Tensor, Tensor)> = None;
    let mut finals = Vec::with_capacity(cfg.restarts.max(1));
    for _ in 0..cfg.restarts.max(1) {
        let mut trial = model.params.clone();
        trial.get_mut(model.h0).value =
            ArrayD::from_shape_simple_fn(IxDyn(&[mc.head_width()]), || {
                rng.random_range(-cfg.init_scale..cfg.init_scale)
            });
        trial.get_mut(model.log_eps).value.fill(0.0);
        let mut opt = Rmsprop::new(cfg.optimizer);
        let mut history = Vec::with_capacity(cfg.iterations);
        let mut last = f64::NAN;
        for it in 0..=cfg.iterations {
            let tape = Tape::new();
            let head = tape.constant(zeros.clone());
            let log_eps = (mc.mode == Mode::Classical).then(|| tape.param(&trial, model.log_eps));
            let y = physics(head, tape.param(&trial, model.h0), log_eps, mc.n, mc.mode)?;
            let loss = y.mse(&target);
            last = loss.item();
            history.push(last);
            check_finite(last, it, &history)?;
            if it == cfg.iterations {
                break;
            }
            let (g, _) = tape.backward(loss, trial.len())?;
            opt.step(&mut trial, &g);
            if !trial.all_finite() {
                check_finite(f64::NAN, it, &history)?;
            }
        }
        finals.push(last);
        if best.as_ref().map_or(true, |(b, _, _)| last < *b) {
            best = Some((
                last,
                trial.get(model.h0).value.clone(),
                trial.get(model.log_eps).value.clone(),
            ));
        }
    }
    let (mse, h0, log_eps) = best.expect("at least one restart");
    model.params.get_mut(model.h0).value = h0;
    // Only the direction of ε is identifiable; store it with max(ε) = 1.
    let max = log_eps.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    model.params.get_mut(model.log_eps).value = log_eps.mapv(|x| x - max);
    model.meta.stage1_done = true;
    model.meta.stage1_mse = Some(mse);
    model.set_stage(2);
    Ok(Stage1Report {
        mse,
        restarts: finals,
    })
}

/// Stacks a dataset into `(B, T, 2n)` inputs and `(B, T, C)` targets.
pub fn dataset_tensors(ds: &Dataset) -> (Array3<f64>, Array3<f64>) {
    let b = ds.len();
    let t = ds.examples.first().map_or(0, |e| e.voltages.steps());
    let e = ds
        .examples
        .first()
        .map_or(0, |e| e.voltages.samples.ncols());
    let c = ds.examples.first().map_or(0, |e| e.trace.channels.ncols());
    let mut x = Array3::zeros((b, t, e));
    let mut y = Array3::zeros((b, t, c));
    for (i, ex) in ds.examples.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&ex.voltages.samples);
        y.index_axis_mut(Axis(0), i).assign(&ex.trace.channels);
    }
    (x, y)
}

/// Training loss and parameter gradients on one batch.
pub fn loss_and_gradients(
    model: &ModelState,
    x: &Array3<f64>,
    y: &Array3<f64>,
) -> Result<(f64, crate::autodiff::Gradients)> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone().into_dyn());
    let out = model.forward_tape(&tape, xv, true, &|t, i| t.param(&model.params, i))?;
    let loss = out.mse(&y.clone().into_dyn());
    let (g, _) = tape.backward(loss, model.params.len())?;
    Ok((loss.item(), g))
}

/// Fits the recurrent blackbox with `H_0` and ε frozen. Returns the
/// per-iteration training loss.
pub fn train_stage2(
    model: &mut ModelState,
    train: &Dataset,
    cfg: &Stage2Config,
) -> Result<Vec<f64>> {
    train_stage2_with(model, train, cfg, |_, _| {})
}

/// [`train_stage2`] with a callback `(iteration, loss)` after each step.
pub fn train_stage2_with<F: FnMut(usize, f64)>(
    model: &mut ModelState,
    train: &Dataset,
    cfg: &Stage2Config,
    mut on_step: F,
) -> Result<Vec<f64>> {
    if !model.meta.stage1_done {
        return Err(Error::Contract(
            "stage 2 requires a completed stage 1".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if train.mode != model.config().mode {
        return Err(Error::Contract("dataset and model modes differ".into()));
    }
    model.set_stage(2);
    let (x, y) = dataset_tensors(train);
    let mut opt = Rmsprop::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (loss, g) = match cfg.batch_size {
            Some(bs) if bs < x.dim().0 => {
                let idx = rand::seq::index::sample(&mut rng, x.dim().0, bs).into_vec();
                loss_and_gradients(model, &x.select(Axis(0), &idx), &y.select(Axis(0), &idx))?
            }
            _ => loss_and_gradients(model, &x, &y)?,
        };
        history.push(loss);
        check_finite(loss, it, &history)?;
        opt.step(&mut model.params, &g);
        if !model.params.all_finite() {
            check_finite(f64::NAN, it, &history)?;
        }
        on_step(it, loss);
    }
    model.meta.stage2_done = true;
    Ok(history)
}

/// Aggregate and per-example results on a held-out set.
pub struct Evaluation {
    pub mse: f64,
    pub per_example_mse: Vec<f64>,
    /// `(B, T, C)` model outputs, aligned with the dataset traces.
    pub predicted: Array3<f64>,
}

pub fn evaluate(model: &ModelState, set: &Dataset) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    if !model.meta.stage2_done {
        return Err(Error::Contract(
            "evaluation requires a trained model".into(),
        ));
    }
    let (x, y) = dataset_tensors(set);
    let predicted = model.predict(&x)?;
    let diff = &predicted - &y;
    let per_example_mse = diff
        .outer_iter()
        .map(|d| d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
        .collect();
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
    Ok(Evaluation {
        mse,
        per_example_mse,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_error;
    use crate::dataset::zero_voltage_readings;
    use crate::linalg::mat_exp_unitary;

    fn small(mode: Mode) -> ModelState {
        ModelState::new(
            GrayboxConfig {
                n: 3,
                hidden: 5,
                mode,
                l: 3.6e-2,
            },
            7,
        )
    }

    #[test]
    fn classical_hamiltonian_reshape_matches_oracle() {
        let cfg = GrayboxConfig::new(3, Mode::Classical, 1.0);
        let head = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let h = construct_hamiltonian(&head, &[0.0; 6], &cfg).unwrap();
        // upper triangle (0,0) (0,1) (0,2) (1,1) (1,2) (2,2), plus transpose
        let mut a = Array2::<f64>::zeros((3, 3));
        let mut it = head.iter();
        for j in 0..3 {
            for k in j..3 {
                a[[j, k]] = *it.next().unwrap();
            }
        }
        let expect = &a + &a.t();
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(h[[j, k]], Complex64::new(expect[[j, k]], 0.0));
            }
        }
        assert_eq!(
            construct_hamiltonian(&[0.0; 6], &[0.0; 6], &cfg).unwrap(),
            HermitianMatrix::zeros(3)
        );
        assert!(construct_hamiltonian(&[0.0; 5], &[0.0; 6], &cfg).is_err());
    }

    #[test]
    fn quantum_hamiltonian_is_hermitian() {
        let cfg = GrayboxConfig::new(3, Mode::Quantum, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h0: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = hermitize(&head, 3, Mode::Quantum, 2.0) + hermitize(&h0, 3, Mode::Quantum, 1.0);
        for j in 0..3 {
            for m in 0..3 {
                assert_eq!(k[[j, m]], k[[m, j]].conj());
            }
        }
        // upper real, lower imaginary, diagonal doubled
        assert_eq!(
            hermitize(&head, 3, Mode::Quantum, 2.0)[[0, 1]],
            Complex64::new(head[1], -head[3])
        );
        assert_eq!(
            hermitize(&head, 3, Mode::Quantum, 2.0)[[2, 2]].re,
            2.0 * head[8]
        );
        assert!(construct_hamiltonian(&head, &h0, &cfg).is_ok());
    }

    #[test]
    fn zero_head_and_zero_h0_measure_weighted_basis() {
        let mut m = small(Mode::Classical);
        m.params.get_mut(m.head_w).value.fill(0.0);
        m.params.get_mut(m.log_eps).value =
            ndarray::arr1(&[0.9f64.ln(), 0.8f64.ln(), 0.5f64.ln()]).into_dyn();
        let v = VoltageSequence::zeros(0.2, 4, 6);
        let b = m.forward(&v).unwrap();
        for t in 0..4 {
            let row = b.measured_outputs.channels.row(t);
            for mm in 0..3 {
                for k in 0..3 {
                    assert!((row[mm * 3 + k] - if k == mm { 1.0 } else { 0.0 }).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn forward_bundle_is_consistent() {
        let m = small(Mode::Classical);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = VoltageSequence::zeros(0.2, 6, 6);
        v.samples.mapv_inplace(|_| rng.random_range(-5.0..5.0));
        let b = m.forward(&v).unwrap();
        let h0 = m.h0_matrix();
        for t in 0..6 {
            assert_eq!(b.h_total[t], b.h_interaction[t].add(&h0));
            assert!(crate::linalg::unitarity_defect(&b.u[t]) < 1e-10);
            let u = mat_exp_unitary(&b.h_total[t], m.config().l).unwrap();
            assert!((&u - &b.u[t]).iter().all(|z| z.norm() < 1e-9));
            for blk in 0..3 {
                let s: f64 = b
                    .measured_outputs
                    .channels
                    .row(t)
                    .iter()
                    .skip(3 * blk)
                    .take(3)
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let x = v.samples.clone().insert_axis(Axis(0));
        let p = m.predict(&x).unwrap();
        let diff = (&p.index_axis(Axis(0), 0) - &b.measured_outputs.channels).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-13));
    }

    fn composite_fd(mode: Mode, seed: u64) {
        let mut m = small(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..m.params.len() {
            let p = m.params.get_mut(i);
            p.trainable = true;
            p.value.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        }
        let x = Array3::from_shape_simple_fn((2, 3, 6), || rng.random_range(-5.0..5.0));
        let y =
            Array3::from_shape_simple_fn((2, 3, mode.channels(3)), || rng.random_range(0.0..1.0));
        let (_, g) = loss_and_gradients(&m, &x, &y).unwrap();
        for i in 0..m.params.len() {
            if mode == Mode::Quantum && m.params.get(i).name == "log_eps" {
                continue;
            }
            let base = m.params.get(i).value.clone();
            let err = finite_difference_error(&base, g.get(i).unwrap(), 1e-6, |v| {
                let mut mm = m.clone();
                mm.params.get_mut(i).value = v.clone();
                loss_and_gradients(&mm, &x, &y).unwrap().0
            });
            assert!(err < 1e-4, "{mode:?} {}: {err}", m.params.get(i).name);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        composite_fd(Mode::Classical, 5);
        composite_fd(Mode::Quantum, 6);
    }

    #[test]
    fn stage1_zero_iterations_is_a_no_op() {
        let mut m = small(Mode::Classical);
        let before = m.clone();
        let r = zero_voltage_readings(&ChipParams::default(), Mode::Classical).unwrap();
        let cfg = Stage1Config {
            iterations: 0,
            ..Default::default()
        };
        train_stage1(&mut m, &r, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn stage2_requires_stage1_and_freezes_static_params() {
        let params = ChipParams::default();
        let dcfg = crate::dataset::DatasetConfig {
            count: 4,
            split: 0.5,
            horizon: 1.0,
            dt: 0.2,
            seed: 2,
            mode: Mode::Classical,
        };
        let (train, test) = crate::dataset::build_dataset(&dcfg, &params).unwrap();
        let mut m = small(Mode::Classical);
        let s2 = Stage2Config {
            iterations: 3,
            ..Default::default()
        };
        assert!(train_stage2(&mut m, &train, &s2).is_err());
        assert!(evaluate(&m, &test).is_err());
        let r = zero_voltage_readings(&params, Mode::Classical).unwrap();
        train_stage1(
            &mut m,
            &r,
            &Stage1Config {
                iterations: 50,
                restarts: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let h0 = m.params.get(m.h0).value.clone();
        let le = m.params.get(m.log_eps).value.clone();
        let gru_before = m.params.get(m.gru.w).value.clone();
        let hist = train_stage2(&mut m, &train, &s2).unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(m.params.get(m.h0).value, h0);
        assert_eq!(m.params.get(m.log_eps).value, le);
        assert_ne!(m.params.get(m.gru.w).value, gru_before);
        let ev = evaluate(&m, &test).unwrap();
        assert_eq!(ev.per_example_mse.len(), test.len());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gbnt");
        let mut m = small(Mode::Quantum);
        m.meta.stage1_done = true;
        m.meta.params_digest = Some("abc".into());
        m.save(&path).unwrap();
        let back = ModelState::load(&path).unwrap();
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.digest(), m.digest());
    }
}
