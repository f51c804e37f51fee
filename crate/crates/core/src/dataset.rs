//! Random square-pulse corpus and its on-disk container.
//!
//! Every example is one synchronized pulse: a shared random window and an
//! independent uniform amplitude per inner electrode, with the two outer
//! electrodes grounded. Example `i` draws from ChaCha8 stream `i` of the
//! dataset seed, so generation order and parallelism never change the bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{simulate, ChipParams, MeasurementTrace, Mode, VoltageSequence};

/// Amplitude bound of training pulses, volts.
pub const PULSE_AMPLITUDE: f64 = 5.0;

const MAGIC: &[u8; 4] = b"GBDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSpec {
    /// ms
    pub t_start: f64,
    /// ms
    pub duration: f64,
    /// volts, one per electrode
    pub amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub voltages: VoltageSequence,
    pub trace: MeasurementTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Split,
    pub seed: u64,
    pub mode: Mode,
    pub n: usize,
    /// ms
    pub dt: f64,
    /// ms
    pub horizon: f64,
    pub params_digest: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn steps(&self) -> usize {
        steps_for(self.horizon, self.dt)
    }

    pub fn channels(&self) -> usize {
        self.mode.channels(self.n)
    }
}

/// Generation settings for [`build_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    /// Fraction of examples, rounded up, that go to the training split.
    pub split: f64,
    /// ms
    pub horizon: f64,
    /// ms
    pub dt: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl DatasetConfig {
    /// 500 examples over 20 ms at 0.2 ms sampling.
    pub fn desk(mode: Mode) -> Self {
        DatasetConfig {
            count: 500,
            split: 0.9,
            horizon: 20.0,
            dt: 0.2,
            seed: 0,
            mode,
        }
    }

    /// 4000 examples (3500 train) over 200 ms at 0.2 ms sampling.
    pub fn paper(mode: Mode) -> Self {
        DatasetConfig {
            count: 4000,
            split: 0.875,
            horizon: 200.0,
            dt: 0.2,
            seed: 0,
            mode,
        }
    }

    pub fn train_count(&self) -> usize {
        ((self.split * self.count as f64) - 1e-9)
            .ceil()
            .clamp(0.0, self.count as f64) as usize
    }
}

/// Number of samples covering `[0, horizon)`.
pub fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round() as usize
}

/// Draws one synchronized pulse for a `n`-waveguide chip.
pub fn gen_pulse<R: Rng + ?Sized>(rng: &mut R, horizon: f64, n: usize) -> PulseSpec {
    let t_start = rng.random_range(0.0..horizon);
    let duration = rng.random_range(0.0..=(horizon - t_start));
    let mut amplitudes = vec![0.0; 2 * n];
    for a in &mut amplitudes[1..2 * n - 1] {
        *a = rng.random_range(-PULSE_AMPLITUDE..=PULSE_AMPLITUDE);
    }
    PulseSpec {
        t_start,
        duration,
        amplitudes,
    }
}

/// Samples the pulse on the grid `t = k dt`; active for `t_start <= t < t_start + duration`.
pub fn render(spec: &PulseSpec, dt: f64, horizon: f64) -> VoltageSequence {
    let steps = steps_for(horizon, dt);
    // grid indices, with a small slack so that 10 / 0.2 lands on sample 50
    let first = ((spec.t_start / dt) - 1e-9).ceil().max(0.0) as usize;
    let last = (((spec.t_start + spec.duration) / dt) - 1e-9)
        .ceil()
        .max(0.0) as usize;
    let mut v = VoltageSequence::zeros(dt, steps, spec.amplitudes.len());
    let amps = Array1::from(spec.amplitudes.clone());
    for t in first.min(steps)..last.min(steps) {
        v.samples.row_mut(t).assign(&amps);
    }
    v
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates, simulates and splits `cfg.count` pulse examples.
pub fn build_dataset(cfg: &DatasetConfig, params: &ChipParams) -> Result<(Dataset, Dataset)> {
    if cfg.count < 2 {
        return Err(Error::Contract(format!(
            "dataset needs at least 2 examples, got {}",
            cfg.count
        )));
    }
    if !(cfg.dt > 0.0 && cfg.horizon > 0.0) || !(0.0..=1.0).contains(&cfg.split) {
        return Err(Error::Config(
            "dataset needs dt > 0, horizon > 0, split in [0, 1]".into(),
        ));
    }
    params.validate()?;
    let examples: Vec<Example> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = example_rng(cfg.seed, i);
            let pulse = gen_pulse(&mut rng, cfg.horizon, params.n);
            let voltages = render(&pulse, cfg.dt, cfg.horizon);
            let trace = simulate(&voltages, params, cfg.mode).map_err(|e| Error::Example {
                index: i,
                source: Box::new(e),
            })?;
            Ok(Example { voltages, trace })
        })
        .collect::<Result<_>>()?;

    let n_train = cfg.train_count();
    let digest = params.digest();
    let make = |examples: Vec<Example>, split| Dataset {
        examples,
        split,
        seed: cfg.seed,
        mode: cfg.mode,
        n: params.n,
        dt: cfg.dt,
        horizon: cfg.horizon,
        params_digest: digest.clone(),
    };
    let mut train = examples;
    let test = train.split_off(n_train);
    Ok((make(train, Split::Train), make(test, Split::Test)))
}

/// Static readings at zero voltage, one block per input waveguide.
pub fn zero_voltage_readings(params: &ChipParams, mode: Mode) -> Result<Vec<f64>> {
    let v = VoltageSequence::zeros(1.0, 1, params.electrodes());
    let tr = simulate(&v, params, mode)?;
    Ok(tr.channels.row(0).to_vec())
}

/// Header of a dataset file, mirrored into the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub mode: Mode,
    pub split: Split,
    pub n: usize,
    pub electrodes: usize,
    pub channels: usize,
    pub dt: f64,
    pub horizon: f64,
    pub steps: usize,
    pub count: usize,
    pub seed: u64,
    pub chip_params_digest: String,
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: FORMAT_VERSION,
            mode: self.mode,
            split: self.split,
            n: self.n,
            electrodes: 2 * self.n,
            channels: self.channels(),
            dt: self.dt,
            horizon: self.horizon,
            steps: self.steps(),
            count: self.len(),
            seed: self.seed,
            chip_params_digest: self.params_digest.clone(),
        }
    }

    /// Writes the binary container and its `<path>.json` sidecar.
    ///
    /// Layout: `b"GBDS"`, u32 version, u32 header length, header JSON, then
    /// per example the voltages and the trace as little-endian f32,
    /// row-major (time x channel).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = self.header();
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for ex in &self.examples {
            for x in ex.voltages.samples.iter().chain(ex.trace.channels.iter()) {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        let pretty =
            serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(sidecar_path(path), pretty + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a dataset file",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: DatasetHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        if h.electrodes != 2 * h.n || h.channels != h.mode.channels(h.n) {
            return Err(Error::Format("inconsistent dataset header".into()));
        }
        let mut buf = [0u8; 4];
        let mut read_block = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("sized"))
        };
        let mut examples = Vec::with_capacity(h.count);
        for _ in 0..h.count {
            let samples = read_block(h.steps, h.electrodes)?;
            let channels = read_block(h.steps, h.channels)?;
            examples.push(Example {
                voltages: VoltageSequence { dt: h.dt, samples },
                trace: MeasurementTrace {
                    dt: h.dt,
                    mode: h.mode,
                    channels,
                },
            });
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Format("trailing bytes after last example".into()));
        }
        Ok(Dataset {
            examples,
            split: h.split,
            seed: h.seed,
            mode: h.mode,
            n: h.n,
            dt: h.dt,
            horizon: h.horizon,
            params_digest: h.chip_params_digest,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pulse_is_deterministic() {
        let a = gen_pulse(&mut example_rng(42, 3), 20.0, 3);
        let b = gen_pulse(&mut example_rng(42, 3), 20.0, 3);
        assert_eq!(a, b);
        let c = gen_pulse(&mut example_rng(42, 4), 20.0, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn pulse_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let p = gen_pulse(&mut rng, 200.0, 3);
            assert_eq!(p.amplitudes.len(), 6);
            assert_eq!(p.amplitudes[0], 0.0);
            assert_eq!(p.amplitudes[5], 0.0);
            assert!(p.amplitudes.iter().all(|a| a.abs() <= PULSE_AMPLITUDE));
            assert!(p.t_start >= 0.0 && p.duration >= 0.0);
            assert!(p.t_start + p.duration <= 200.0 + 1e-12);
        }
    }

    #[test]
    fn render_windows() {
        let amps = vec![0.0, 1.0, -2.0, 3.0, 4.0, 0.0];
        let empty = render(
            &PulseSpec {
                t_start: 7.0,
                duration: 0.0,
                amplitudes: amps.clone(),
            },
            0.2,
            20.0,
        );
        assert!(empty.samples.iter().all(|&x| x == 0.0));

        let full = render(
            &PulseSpec {
                t_start: 0.0,
                duration: 20.0,
                amplitudes: amps.clone(),
            },
            0.2,
            20.0,
        );
        assert_eq!(full.steps(), 100);
        for row in full.samples.outer_iter() {
            assert_eq!(row.to_vec(), amps);
        }

        let mid = render(
            &PulseSpec {
                t_start: 10.0,
                duration: 5.0,
                amplitudes: amps.clone(),
            },
            0.2,
            50.0,
        );
        for e in 1..5 {
            assert_eq!(
                mid.samples.column(e).iter().filter(|&&x| x != 0.0).count(),
                25
            );
        }
        assert_eq!(mid.samples[[50, 1]], 1.0);
        assert_eq!(mid.samples[[49, 1]], 0.0);
        assert_eq!(mid.samples[[75, 1]], 0.0);
    }

    fn small_cfg(mode: Mode) -> DatasetConfig {
        DatasetConfig {
            count: 10,
            split: 0.8,
            horizon: 4.0,
            dt: 0.2,
            seed: 9,
            mode,
        }
    }

    #[test]
    fn split_counts() {
        let mut c = DatasetConfig::paper(Mode::Classical);
        assert_eq!(c.train_count(), 3500);
        c = DatasetConfig::desk(Mode::Classical);
        assert_eq!(c.train_count(), 450);
        c.count = 7;
        c.split = 0.5;
        assert_eq!(c.train_count(), 4);
    }

    #[test]
    fn build_is_deterministic_and_disjoint() {
        let p = ChipParams::default();
        let cfg = small_cfg(Mode::Classical);
        let (a_tr, a_te) = build_dataset(&cfg, &p).unwrap();
        let (b_tr, b_te) = build_dataset(&cfg, &p).unwrap();
        assert_eq!(a_tr, b_tr);
        assert_eq!(a_te, b_te);
        assert_eq!(a_tr.len(), 8);
        assert_eq!(a_te.len(), 2);
        assert_eq!(a_tr.examples[0].trace.channels.ncols(), 9);
        // example 8 of the full run is test example 0
        let mut rng = example_rng(9, 8);
        let pulse = gen_pulse(&mut rng, 4.0, 3);
        assert_eq!(render(&pulse, 0.2, 4.0), a_te.examples[0].voltages);

        let (q, _) = build_dataset(&small_cfg(Mode::Quantum), &p).unwrap();
        assert_eq!(q.examples[0].trace.channels.ncols(), 18);

        let mut one = cfg.clone();
        one.count = 1;
        assert!(build_dataset(&one, &p).is_err());
    }

    #[test]
    fn zero_voltage_blocks() {
        let p = ChipParams::default();
        let r = zero_voltage_readings(&p, Mode::Classical).unwrap();
        assert_eq!(r.len(), 9);
        for m in 0..3 {
            let s: f64 = r[3 * m..3 * m + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let mut sym = p.clone();
        sym.eps = vec![1.0; 3];
        let r = zero_voltage_readings(&sym, Mode::Classical).unwrap();
        // reflection k -> 2 - k maps input block m onto block 2 - m
        for m in 0..3 {
            for k in 0..3 {
                assert!((r[3 * m + k] - r[3 * (2 - m) + (2 - k)]).abs() < 1e-12);
            }
        }

        let mut decoupled = p.clone();
        decoupled.c0 = 0.0;
        let r = zero_voltage_readings(&decoupled, Mode::Classical).unwrap();
        for m in 0..3 {
            for k in 0..3 {
                let expect = if m == k { 1.0 } else { 0.0 };
                assert!((r[3 * m + k] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(zero_voltage_readings(&p, Mode::Quantum).unwrap().len(), 18);
    }

    #[test]
    fn file_roundtrip_is_bit_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = ChipParams::default();
        let (tr, _) = build_dataset(&small_cfg(Mode::Quantum), &p).unwrap();
        let path = dir.path().join("train.gbds");
        tr.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.header(), tr.header());
        for (a, b) in back.examples.iter().zip(&tr.examples) {
            for (x, y) in a.trace.channels.iter().zip(b.trace.channels.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let path2 = dir.path().join("again.gbds");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        let side: DatasetHeader =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side, tr.header());

        std::fs::write(&path2, b"nope").unwrap();
        assert!(Dataset::load(&path2).is_err());
    }
}
