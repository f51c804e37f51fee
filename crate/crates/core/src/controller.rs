//! Control synthesis.
//!
//! A trainable GRU and dense front-end turns a target schedule into `2n - 2`
//! bounded voltages. Electrodes `0` and `2n - 1` are pinned to zero, and the
//! result drives a frozen copy of the graybox model with its coupling-loss
//! layer removed. Backpropagating the mismatch to the schedule's ideal
//! outputs through the frozen model trains the front-end only; the voltages
//! are then read off its output.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    gru_forward, linear_timedistributed, scaled_tanh, uniform, GruWeights, LrSchedule, ParamSet,
    Rmsprop, RmspropConfig, Tape, Var,
};
use crate::dataset::steps_for;
use crate::error::{Error, Result};
use crate::graybox::{upper_indices, ModelState, PredictionBundle};
use crate::linalg::{mat_log_unitary, unitarity_defect, ComplexMatrix};
use crate::metrics::infidelity_unchecked;
use crate::simulator::{
    measure_unitary, simulate_with_unitaries, ChipParams, Mode, VoltageSequence,
};

/// Named target gates on waveguides 1, 2 and 3 (identity on any others).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Identity,
    /// Swap of waveguides 1 and 3.
    X13,
    /// 50-50 split between waveguides 1 and 3.
    H13,
    /// Swap of waveguides 1 and 2.
    X12,
    /// Sign flip on waveguide 3.
    Z13,
    /// `exp(-i theta X13)`
    Rx13(f64),
    /// `exp(-i theta Z13)`
    Rz13(f64),
}

impl Gate {
    /// Parses `I`, `X13`, `H13`, `X12`, `Z13`, `RX13(theta)` or `RZ13(theta)`.
    /// `theta` is a number or a multiple of `pi` such as `pi/4` or `-2*pi/3`.
    pub fn parse(symbol: &str) -> Result<Gate> {
        let s: String = symbol.chars().filter(|c| !c.is_whitespace()).collect();
        let upper = s.to_ascii_uppercase();
        let gate = match upper.as_str() {
            "I" => Gate::Identity,
            "X13" => Gate::X13,
            "H13" => Gate::H13,
            "X12" => Gate::X12,
            "Z13" => Gate::Z13,
            _ => {
                let arg = |prefix: &str| {
                    upper
                        .strip_prefix(prefix)
                        .and_then(|r| r.strip_prefix('('))
                        .and_then(|r| r.strip_suffix(')'))
                };
                if let Some(a) = arg("RX13") {
                    Gate::Rx13(parse_angle(a).ok_or_else(|| bad_gate(symbol))?)
                } else if let Some(a) = arg("RZ13") {
                    Gate::Rz13(parse_angle(a).ok_or_else(|| bad_gate(symbol))?)
                } else {
                    return Err(bad_gate(symbol));
                }
            }
        };
        Ok(gate)
    }

    /// The gate on an `n`-waveguide chip, `n >= 3`.
    pub fn matrix(&self, n: usize) -> Result<ComplexMatrix> {
        if n < 3 {
            return Err(Error::Contract(format!(
                "named gates need at least 3 waveguides, got {n}"
            )));
        }
        let one = Complex64::new(1.0, 0.0);
        let mut u = ComplexMatrix::eye(n);
        let swap = |u: &mut ComplexMatrix, a: usize, b: usize| {
            u[[a, a]] = Complex64::new(0.0, 0.0);
            u[[b, b]] = Complex64::new(0.0, 0.0);
            u[[a, b]] = one;
            u[[b, a]] = one;
        };
        match *self {
            Gate::Identity => {}
            Gate::X13 => swap(&mut u, 0, 2),
            Gate::X12 => swap(&mut u, 0, 1),
            Gate::H13 => {
                let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
                u[[0, 0]] = h;
                u[[0, 2]] = h;
                u[[2, 0]] = h;
                u[[2, 2]] = -h;
            }
            Gate::Z13 => u[[2, 2]] = -one,
            // Both generators square to the identity, so
            // exp(-i theta G) = cos(theta) I - i sin(theta) G.
            Gate::Rx13(theta) | Gate::Rz13(theta) => {
                let g = if matches!(self, Gate::Rx13(_)) {
                    Gate::X13
                } else {
                    Gate::Z13
                }
                .matrix(n)?;
                let c = Complex64::new(theta.cos(), 0.0);
                let s = Complex64::new(0.0, -theta.sin());
                u = g.mapv(|z| z * s);
                for k in 0..n {
                    u[[k, k]] += c;
                }
            }
        }
        Ok(u)
    }
}

fn bad_gate(symbol: &str) -> Error {
    Error::Config(format!("unknown gate symbol '{symbol}'"))
}

/// `1.5`, `pi`, `-pi/4`, `3*pi/8`, `0.5*pi`.
fn parse_angle(s: &str) -> Option<f64> {
    let s = s.to_ascii_lowercase();
    if let Ok(x) = s.parse::<f64>() {
        return x.is_finite().then_some(x);
    }
    let (sign, body) = match s.strip_prefix('-') {
        Some(r) => (-1.0, r),
        None => (1.0, s.as_str()),
    };
    let (num, den) = match body.split_once('/') {
        Some((a, b)) => (
            a,
            b.parse::<f64>()
                .ok()
                .filter(|d| *d != 0.0 && d.is_finite())?,
        ),
        None => (body, 1.0),
    };
    let coef = match num {
        "pi" => 1.0,
        _ => num.strip_suffix("*pi")?.parse::<f64>().ok()?,
    };
    Some(sign * coef * PI / den)
}

/// One constant stretch of a schedule, `[start, end)` in ms.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub unitary: ComplexMatrix,
    pub label: String,
}

/// Piecewise-constant target unitaries on a `dt` grid over `[0, horizon)`;
/// the identity wherever no segment applies.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSchedule {
    pub n: usize,
    /// ms
    pub dt: f64,
    /// ms
    pub horizon: f64,
    pub segments: Vec<Segment>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    #[serde(default = "default_n")]
    n: usize,
    dt: f64,
    horizon: f64,
    #[serde(default)]
    segment: Vec<RawSegment>,
}

fn default_n() -> usize {
    3
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    start: f64,
    end: f64,
    gate: GateSpec,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GateSpec {
    Symbol(String),
    /// Real parts row-major, then imaginary parts row-major.
    Values(Vec<f64>),
}

impl TargetSchedule {
    pub fn new(n: usize, dt: f64, horizon: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config(
                "schedule needs at least one waveguide".into(),
            ));
        }
        if !(dt > 0.0 && dt.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs dt > 0 and horizon > 0 (dt {dt}, horizon {horizon})"
            )));
        }
        Ok(TargetSchedule {
            n,
            dt,
            horizon,
            segments: Vec::new(),
        })
    }

    /// Adds `[start, end)` with target `unitary`. Segments may touch but not
    /// overlap.
    pub fn push(
        &mut self,
        start: f64,
        end: f64,
        unitary: ComplexMatrix,
        label: impl Into<String>,
    ) -> Result<()> {
        let label = label.into();
        if !(start >= 0.0 && start < end && end <= self.horizon) {
            return Err(Error::Config(format!(
                "segment {label} [{start}, {end}) must lie in [0, {}) with start < end",
                self.horizon
            )));
        }
        if unitary.dim() != (self.n, self.n) {
            return Err(Error::Shape(format!(
                "segment {label}: {:?} target on a {}-waveguide schedule",
                unitary.dim(),
                self.n
            )));
        }
        let defect = unitarity_defect(&unitary);
        if !(defect <= 1e-10) {
            return Err(Error::Contract(format!(
                "segment {label}: target is not unitary ({defect:e})"
            )));
        }
        if let Some(o) = self
            .segments
            .iter()
            .find(|s| start < s.end && s.start < end)
        {
            return Err(Error::Config(format!(
                "segment {label} [{start}, {end}) overlaps {} [{}, {})",
                o.label, o.start, o.end
            )));
        }
        self.segments.push(Segment {
            start,
            end,
            unitary,
            label,
        });
        self.segments.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawSchedule = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut sched = TargetSchedule::new(raw.n, raw.dt, raw.horizon)?;
        for seg in raw.segment {
            let (u, label) = match seg.gate {
                GateSpec::Symbol(s) => (Gate::parse(&s)?.matrix(raw.n)?, s),
                GateSpec::Values(v) => (unitary_from_values(&v, raw.n)?, "inline".to_string()),
            };
            sched.push(seg.start, seg.end, u, label)?;
        }
        Ok(sched)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn steps(&self) -> usize {
        steps_for(self.horizon, self.dt)
    }

    /// Sample index of time `t`: nearest sample, ties toward the earlier one.
    fn snap(&self, t: f64) -> usize {
        let x = t / self.dt;
        ((x - 0.5).ceil().max(0.0) as usize).min(self.steps())
    }

    /// Half-open sample range of every segment.
    pub fn step_ranges(&self) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .map(|s| (self.snap(s.start), self.snap(s.end)))
            .collect()
    }

    /// Target unitary at every sample.
    pub fn unitaries(&self) -> Vec<ComplexMatrix> {
        let mut out = vec![ComplexMatrix::eye(self.n); self.steps()];
        for (seg, (a, b)) in self.segments.iter().zip(self.step_ranges()) {
            for u in &mut out[a..b] {
                u.assign(&seg.unitary);
            }
        }
        out
    }

    /// Samples where the target changes (first sample of the new target).
    pub fn boundaries(&self) -> Vec<usize> {
        let t = self.steps();
        let mut b: Vec<usize> = self
            .step_ranges()
            .into_iter()
            .flat_map(|(a, e)| [a, e])
            .filter(|&k| k > 0 && k < t)
            .collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// `true` for samples more than `margin` samples from every boundary.
    pub fn steady_mask(&self, margin: usize) -> Vec<bool> {
        let bounds = self.boundaries();
        (0..self.steps())
            .map(|k| bounds.iter().all(|&b| k.abs_diff(b) > margin))
            .collect()
    }
}

fn unitary_from_values(v: &[f64], n: usize) -> Result<ComplexMatrix> {
    if v.len() != 2 * n * n {
        return Err(Error::Config(format!(
            "inline unitary needs {} values (real then imaginary parts), got {}",
            2 * n * n,
            v.len()
        )));
    }
    Ok(ComplexMatrix::from_shape_fn((n, n), |(j, k)| {
        Complex64::new(v[j * n + k], v[n * n + j * n + k])
    }))
}

/// What the front-end sees at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputEncoding {
    /// Principal `i log U` in radians laid out like the model's interaction
    /// head: upper-triangle real parts in classical mode; in quantum mode an
    /// `n x n` block with real parts on and above the diagonal and imaginary
    /// parts below it.
    Hamiltonian,
    /// Real then imaginary parts of `U`, `2n^2` values.
    Unitary,
}

impl InputEncoding {
    pub fn default_for(mode: Mode) -> Self {
        match mode {
            Mode::Classical => InputEncoding::Hamiltonian,
            Mode::Quantum => InputEncoding::Unitary,
        }
    }

    pub fn width(self, n: usize, mode: Mode) -> usize {
        match (self, mode) {
            (InputEncoding::Hamiltonian, Mode::Classical) => n * (n + 1) / 2,
            (InputEncoding::Hamiltonian, Mode::Quantum) => n * n,
            (InputEncoding::Unitary, _) => 2 * n * n,
        }
    }
}

/// Front-end inputs `(T, d)` for a schedule.
pub fn schedule_to_inputs(
    sched: &TargetSchedule,
    encoding: InputEncoding,
    mode: Mode,
) -> Result<Array2<f64>> {
    let n = sched.n;
    let us = sched.unitaries();
    let mut x = Array2::zeros((us.len(), encoding.width(n, mode)));
    for (t, u) in us.iter().enumerate() {
        let mut row = x.row_mut(t);
        match encoding {
            InputEncoding::Hamiltonian => {
                let k = mat_log_unitary(u, 1.0)?.into_matrix();
                match mode {
                    Mode::Classical => {
                        for (i, (a, b)) in upper_indices(n).into_iter().enumerate() {
                            row[i] = k[[a, b]].re;
                        }
                    }
                    Mode::Quantum => {
                        for ((a, b), z) in k.indexed_iter() {
                            row[a * n + b] = if a <= b { z.re } else { z.im };
                        }
                    }
                }
            }
            InputEncoding::Unitary => {
                for (i, z) in u.iter().enumerate() {
                    row[i] = z.re;
                    row[n * n + i] = z.im;
                }
            }
        }
    }
    Ok(x)
}

/// Ideal composite outputs `(T, C)`: loss-free powers in classical mode,
/// interferometer powers in quantum mode.
pub fn schedule_targets(sched: &TargetSchedule, mode: Mode) -> Result<Array2<f64>> {
    let us = sched.unitaries();
    let mut y = Array2::zeros((us.len(), mode.channels(sched.n)));
    for (t, u) in us.iter().enumerate() {
        let mut row = y.row_mut(t);
        measure_unitary(u, mode, None, row.as_slice_mut().expect("row-major"))?;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub hidden: usize,
    /// Electrode outputs lie in `[-v_max/2, v_max/2]`, volts.
    pub v_max: f64,
    /// `None` picks [`InputEncoding::default_for`] the model's mode.
    pub encoding: Option<InputEncoding>,
    pub optimizer: RmspropConfig,
    pub seed: u64,
    /// Samples on each side of a target change left out of steady-state
    /// figures.
    pub transition_margin: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 60,
            v_max: 10.0,
            encoding: None,
            optimizer: RmspropConfig {
                lr: 5e-3,
                schedule: LrSchedule::Exponential {
                    final_lr: 1e-4,
                    iterations: 500,
                },
                ..Default::default()
            },
            seed: 0,
            transition_margin: 2,
        }
    }
}

/// Trainable front-end plus the frozen model it drives.
#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub encoding: InputEncoding,
    pub params: ParamSet,
    gru: GruWeights,
    out_w: usize,
    out_b: usize,
    model: ModelState,
}

/// Builds a fresh front-end for a fully trained model.
pub fn build_controller(cfg: ControllerConfig, frozen_model: ModelState) -> Result<Controller> {
    if !(frozen_model.meta.stage1_done && frozen_model.meta.stage2_done) {
        return Err(Error::Contract(
            "the controller needs a model trained through both stages".into(),
        ));
    }
    if !(cfg.v_max > 0.0 && cfg.v_max.is_finite()) {
        return Err(Error::Config(format!(
            "v_max must be positive, got {}",
            cfg.v_max
        )));
    }
    if cfg.hidden == 0 {
        return Err(Error::Config(
            "controller hidden size must be positive".into(),
        ));
    }
    let mc = *frozen_model.config();
    let encoding = cfg.encoding.unwrap_or(InputEncoding::default_for(mc.mode));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let gru = GruWeights::init(
        &mut params,
        "ctrl.gru",
        encoding.width(mc.n, mc.mode),
        cfg.hidden,
        &mut rng,
    );
    let free = 2 * mc.n - 2;
    let out_w = params.add(
        "ctrl.out.w",
        uniform(
            &mut rng,
            &[free, cfg.hidden],
            1.0 / (cfg.hidden as f64).sqrt(),
        ),
        true,
    );
    let out_b = params.add("ctrl.out.b", ArrayD::zeros(vec![free]), true);
    Ok(Controller {
        config: cfg,
        encoding,
        params,
        gru,
        out_w,
        out_b,
        model: frozen_model,
    })
}

impl Controller {
    pub fn model(&self) -> &ModelState {
        &self.model
    }

    /// `(1, T, 2n)` electrode voltages with the outer two pinned at zero.
    fn voltages_tape<'t>(&self, tape: &'t Tape, x: &Array2<f64>) -> Var<'t> {
        let n = self.model.config().n;
        let free = 2 * n - 2;
        let xv = tape.constant(x.clone().insert_axis(Axis(0)).into_dyn());
        let p = |i| tape.param(&self.params, i);
        let hs = gru_forward(xv, p(self.gru.w), p(self.gru.u), p(self.gru.b), None);
        let v = scaled_tanh(
            linear_timedistributed(hs, p(self.out_w), p(self.out_b)),
            self.config.v_max,
        );
        // Exact embedding: electrode k + 1 takes output k, the ends get 0.
        let embed = ArrayD::from_shape_fn(IxDyn(&[2 * n, free]), |ix| {
            if ix[0] == ix[1] + 1 {
                1.0
            } else {
                0.0
            }
        });
        linear_timedistributed(
            v,
            tape.constant(embed),
            tape.constant(ArrayD::zeros(vec![2 * n])),
        )
    }

    /// Composite output `(1, T, C)` and the voltages that produced it.
    fn composite<'t>(&self, tape: &'t Tape, x: &Array2<f64>) -> Result<(Var<'t>, Var<'t>)> {
        let v = self.voltages_tape(tape, x);
        let frozen = |t: &'t Tape, i: usize| t.constant(self.model.params.get(i).value.clone());
        let y = self.model.forward_tape(tape, v, false, &frozen)?;
        Ok((y, v))
    }

    /// Voltages the front-end currently emits for `sched`.
    pub fn voltages(&self, sched: &TargetSchedule) -> Result<VoltageSequence> {
        let x = schedule_to_inputs(sched, self.encoding, self.model.config().mode)?;
        let tape = Tape::new();
        let v = self.voltages_tape(&tape, &x);
        Ok(to_sequence(&v.value(), sched.dt))
    }
}

fn to_sequence(v: &ArrayD<f64>, dt: f64) -> VoltageSequence {
    let v: Array3<f64> = v.clone().into_dimensionality().expect("rank-3");
    VoltageSequence {
        dt,
        samples: v.index_axis_move(Axis(0), 0),
    }
}

/// Result of a control solve.
#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub schedule: TargetSchedule,
    pub voltages: VoltageSequence,
    /// The frozen model's layer outputs for `voltages`.
    pub predicted: PredictionBundle,
    /// Per-sample infidelity between the target and the model's evolution.
    pub infidelity: Vec<f64>,
    /// Composite MSE before every update.
    pub loss_history: Vec<f64>,
    /// Composite MSE of the returned voltages.
    pub final_mse: f64,
    pub steady_mask: Vec<bool>,
}

impl ControlSolution {
    /// Largest model-predicted infidelity away from target changes.
    pub fn worst_steady_infidelity(&self) -> f64 {
        worst_masked(&self.infidelity, &self.steady_mask)
    }

    /// CSV with time, electrode voltages, model infidelity, the steady flag
    /// and, when given, the simulator-verified infidelity.
    pub fn to_csv(&self, report: Option<&VerifyReport>) -> String {
        let mut s = String::from("time_ms");
        for k in 0..self.voltages.samples.ncols() {
            write!(s, ",v{k}_V").unwrap();
        }
        s.push_str(",infidelity_model");
        if report.is_some() {
            s.push_str(",infidelity_simulator");
        }
        s.push_str(",steady\n");
        for (t, row) in self.voltages.samples.outer_iter().enumerate() {
            write!(s, "{}", t as f64 * self.voltages.dt).unwrap();
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            write!(s, ",{}", self.infidelity[t]).unwrap();
            if let Some(r) = report {
                write!(s, ",{}", r.infidelity[t]).unwrap();
            }
            writeln!(s, ",{}", u8::from(self.steady_mask[t])).unwrap();
        }
        s
    }
}

fn worst_masked(values: &[f64], mask: &[bool]) -> f64 {
    values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(0.0_f64, |w, (&v, _)| w.max(v))
}

/// Trains the front-end for `iterations` RMSprop steps on `sched`.
pub fn solve(
    controller: &mut Controller,
    sched: &TargetSchedule,
    iterations: usize,
) -> Result<ControlSolution> {
    solve_with(controller, sched, iterations, |_, _| {})
}

/// [`solve`] with a callback `(iteration, loss)` after each step.
pub fn solve_with<F: FnMut(usize, f64)>(
    controller: &mut Controller,
    sched: &TargetSchedule,
    iterations: usize,
    mut on_step: F,
) -> Result<ControlSolution> {
    let mc = *controller.model.config();
    if sched.n != mc.n {
        return Err(Error::Contract(format!(
            "schedule is for {} waveguides, model for {}",
            sched.n, mc.n
        )));
    }
    let x = schedule_to_inputs(sched, controller.encoding, mc.mode)?;
    let target = schedule_targets(sched, mc.mode)?
        .insert_axis(Axis(0))
        .into_dyn();
    let mut opt = Rmsprop::new(controller.config.optimizer);
    let mut history = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let tape = Tape::new();
        let (y, _) = controller.composite(&tape, &x)?;
        let loss = y.mse(&target);
        let l = loss.item();
        history.push(l);
        if !l.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: l,
                history,
            });
        }
        let (g, _) = tape.backward(loss, controller.params.len())?;
        opt.step(&mut controller.params, &g);
        if !controller.params.all_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: f64::NAN,
                history,
            });
        }
        on_step(it, l);
    }
    let voltages = controller.voltages(sched)?;
    let predicted = controller.model.forward(&voltages)?;
    let composite = match mc.mode {
        Mode::Classical => predicted.ideal_outputs.view(),
        Mode::Quantum => predicted.measured_outputs.channels.view(),
    };
    let final_mse = crate::metrics::mse(
        composite,
        target
            .view()
            .index_axis_move(Axis(0), 0)
            .into_dimensionality()
            .expect("rank-2"),
    )?;
    let infidelity = sched
        .unitaries()
        .iter()
        .zip(&predicted.u)
        .map(|(a, b)| infidelity_unchecked(a, b))
        .collect();
    Ok(ControlSolution {
        schedule: sched.clone(),
        voltages,
        predicted,
        infidelity,
        loss_history: history,
        final_mse,
        steady_mask: sched.steady_mask(controller.config.transition_margin),
    })
}

/// A solution replayed on the ground-truth simulator.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    /// Per-sample infidelity between the target and the simulated evolution.
    pub infidelity: Vec<f64>,
    pub steady_mask: Vec<bool>,
    pub worst_steady: f64,
    pub worst_steady_model: f64,
    /// MSE between the model's and the simulator's loss-free powers.
    pub model_divergence: f64,
    /// MSE between the simulator's loss-free powers and the target powers.
    pub target_mse: f64,
}

/// Applies the solved voltages to the simulator.
pub fn verify(sol: &ControlSolution, params: &ChipParams) -> Result<VerifyReport> {
    let (_, us) = simulate_with_unitaries(&sol.voltages, params, Mode::Quantum)?;
    let targets = sol.schedule.unitaries();
    let infidelity: Vec<f64> = targets
        .iter()
        .zip(&us)
        .map(|(a, b)| infidelity_unchecked(a, b))
        .collect();
    let mut sim_powers = Array2::zeros((us.len(), params.n * params.n));
    for (t, u) in us.iter().enumerate() {
        let mut row = sim_powers.row_mut(t);
        measure_unitary(
            u,
            Mode::Classical,
            None,
            row.as_slice_mut().expect("row-major"),
        )?;
    }
    let target_powers = schedule_targets(&sol.schedule, Mode::Classical)?;
    Ok(VerifyReport {
        worst_steady: worst_masked(&infidelity, &sol.steady_mask),
        worst_steady_model: sol.worst_steady_infidelity(),
        model_divergence: crate::metrics::mse(
            sol.predicted.ideal_outputs.view(),
            sim_powers.view(),
        )?,
        target_mse: crate::metrics::mse(sim_powers.view(), target_powers.view())?,
        infidelity,
        steady_mask: sol.steady_mask.clone(),
    })
}
