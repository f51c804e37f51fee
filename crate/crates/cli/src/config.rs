//! Run configuration, layered lowest to highest: bundled scale preset,
//! `--config` file, `GRAYBOX_*` environment variables, command-line flags.

use std::path::{Path, PathBuf};

use graybox_core::autodiff::{LrSchedule, RmspropConfig};
use graybox_core::controller::{ControllerConfig, InputEncoding};
use graybox_core::dataset::DatasetConfig;
use graybox_core::graybox::{Stage1Config, Stage2Config};
use graybox_core::simulator::{ChipParams, Mode};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::failure::Failure;

pub const ENV_PREFIX: &str = "GRAYBOX_";

const DESK: &str = include_str!("../assets/desk.toml");
const PAPER: &str = include_str!("../assets/paper.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// TOML chip description; the bundled defaults when absent.
    #[serde(default)]
    pub chip_params: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Thread cap; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    pub controller: ControllerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub count: usize,
    pub split: f64,
    /// ms
    pub horizon: f64,
    /// ms
    pub dt: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub stage1_iterations: usize,
    pub stage1_restarts: usize,
    pub stage2_iterations: usize,
    pub stage2_lr: f64,
    pub stage2_final_lr: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    /// Target schedule file; the bundled schedule for the model's mode when
    /// absent.
    #[serde(default)]
    pub schedule: Option<PathBuf>,
    pub iterations: usize,
    /// volts
    pub v_max: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_ctrl_lr")]
    pub lr: f64,
    #[serde(default = "default_ctrl_final_lr")]
    pub final_lr: f64,
    #[serde(default)]
    pub encoding: Option<InputEncoding>,
    #[serde(default = "default_margin")]
    pub transition_margin: usize,
}

fn default_hidden() -> usize {
    ControllerConfig::default().hidden
}

fn default_ctrl_lr() -> f64 {
    ControllerConfig::default().optimizer.lr
}

fn default_ctrl_final_lr() -> f64 {
    match ControllerConfig::default().optimizer.schedule {
        LrSchedule::Exponential { final_lr, .. } => final_lr,
        _ => ControllerConfig::default().optimizer.lr,
    }
}

fn default_margin() -> usize {
    ControllerConfig::default().transition_margin
}

/// Values supplied on the command line; `None` leaves the layer below alone.
#[derive(Debug, Default, Clone)]
pub struct FlagOverrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub mode: Option<Mode>,
}

pub fn load(
    scale: Scale,
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &FlagOverrides,
) -> Result<RunConfig, Failure> {
    let preset = match scale {
        Scale::Desk => DESK,
        Scale::Paper => PAPER,
    };
    let mut table: Table = toml::from_str(preset).expect("bundled preset parses");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let layer: Table = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        merge(&mut table, layer);
    }
    let mut env: Vec<_> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    env.sort();
    for (key, raw) in env {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .to_ascii_lowercase()
            .split("__")
            .map(str::to_owned)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Failure::config(format!("malformed override {key}")));
        }
        set_path(&mut table, &path, parse_literal(&raw))?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
    if let Some(out) = &flags.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(w) = flags.workers {
        cfg.workers = Some(w);
    }
    if let Some(mode) = flags.mode {
        cfg.dataset.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A TOML literal when it parses as one (`3`, `1e-3`, `true`, `"x"`,
/// `[1, 2]`), otherwise the raw string.
fn parse_literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), Failure> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = match cur
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => {
                return Err(Failure::config(format!(
                    "override path {} crosses a scalar key",
                    path.join(".")
                )))
            }
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::config(m));
        if let Some(p) = &self.chip_params {
            if !p.is_file() {
                return bad(format!("chip params file {} not found", p.display()));
            }
        }
        if let Some(p) = &self.controller.schedule {
            if !p.is_file() {
                return bad(format!("schedule file {} not found", p.display()));
            }
        }
        let d = &self.dataset;
        if d.count == 0 || !(d.split > 0.0 && d.split <= 1.0) {
            return bad(format!(
                "dataset needs count > 0 and split in (0, 1], got {} and {}",
                d.count, d.split
            ));
        }
        if !(d.dt > 0.0 && d.horizon >= d.dt) {
            return bad(format!(
                "dataset needs 0 < dt <= horizon, got dt {} horizon {}",
                d.dt, d.horizon
            ));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        let t = &self.training;
        if !(t.stage2_lr > 0.0 && t.stage2_final_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let c = &self.controller;
        if !(c.v_max > 0.0 && c.lr > 0.0 && c.final_lr > 0.0) {
            return bad("controller v_max and learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn chip(&self) -> Result<ChipParams, Failure> {
        match &self.chip_params {
            Some(p) => ChipParams::from_file(p).map_err(Failure::from_config_load),
            None => Ok(graybox_core::assets::chip_params()?),
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            count: self.dataset.count,
            split: self.dataset.split,
            horizon: self.dataset.horizon,
            dt: self.dataset.dt,
            seed: self.seed,
            mode: self.dataset.mode,
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let mut c = Stage1Config {
            iterations: self.training.stage1_iterations,
            restarts: self.training.stage1_restarts,
            seed: self.seed,
            ..Default::default()
        };
        if let LrSchedule::Exponential { iterations, .. } = &mut c.optimizer.schedule {
            *iterations = self.training.stage1_iterations;
        }
        c
    }

    /// Stage-2 settings for `iterations` steps decaying `lr -> final_lr`.
    pub fn stage2_config(&self, iterations: usize, lr: f64, final_lr: f64) -> Stage2Config {
        Stage2Config {
            iterations,
            optimizer: RmspropConfig {
                lr,
                schedule: LrSchedule::Exponential {
                    final_lr,
                    iterations,
                },
                ..Default::default()
            },
            batch_size: self.training.batch_size,
            seed: self.seed,
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        let c = &self.controller;
        ControllerConfig {
            hidden: c.hidden,
            v_max: c.v_max,
            encoding: c.encoding,
            optimizer: RmspropConfig {
                lr: c.lr,
                schedule: LrSchedule::Exponential {
                    final_lr: c.final_lr,
                    iterations: c.iterations,
                },
                ..Default::default()
            },
            seed: self.seed,
            transition_margin: c.transition_margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn presets_parse_and_match_dataset_presets() {
        for (scale, preset) in [
            (Scale::Desk, DatasetConfig::desk(Mode::Classical)),
            (Scale::Paper, DatasetConfig::paper(Mode::Classical)),
        ] {
            let cfg = load(scale, None, vec![], &FlagOverrides::default()).unwrap();
            assert_eq!(cfg.dataset_config(), preset);
        }
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "seed = 5\n[dataset]\ncount = 40\nsplit = 0.5\n").unwrap();
        let flags = FlagOverrides {
            seed: Some(9),
            mode: Some(Mode::Quantum),
            ..Default::default()
        };
        let cfg = load(
            Scale::Desk,
            Some(&file),
            env(&[
                ("GRAYBOX_DATASET__COUNT", "60"),
                ("GRAYBOX_SEED", "7"),
                ("GRAYBOX_CONTROLLER__ENCODING", "unitary"),
                ("OTHER_DATASET__COUNT", "1"),
            ]),
            &flags,
        )
        .unwrap();
        assert_eq!(cfg.dataset.count, 60);
        assert_eq!(cfg.dataset.split, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.mode, Mode::Quantum);
        assert_eq!(cfg.controller.encoding, Some(InputEncoding::Unitary));
        assert_eq!(cfg.training.stage2_iterations, 2000);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let f = FlagOverrides::default();
        for pairs in [
            [("GRAYBOX_DATASET__COUNTS", "5")],
            [("GRAYBOX_DATASET__COUNT", "many")],
            [("GRAYBOX_DATASET__SPLIT", "1.5")],
            [("GRAYBOX_CHIP_PARAMS", "/nonexistent/chip.toml")],
            [("GRAYBOX_SEED__X", "1")],
        ] {
            let err = load(Scale::Desk, None, env(&pairs), &f).unwrap_err();
            assert_eq!(err.code, 2, "{pairs:?}: {}", err.message);
        }
    }
}
