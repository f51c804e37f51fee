use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use graybox_core::controller::{
    build_controller, schedule_targets, solve_with, verify, TargetSchedule,
};
use graybox_core::dataset::{build_dataset, zero_voltage_readings, Dataset, Split};
use graybox_core::graybox::{evaluate, train_stage1, train_stage2_with, GrayboxConfig, ModelState};
use graybox_core::metrics::gate_infidelity;
use graybox_core::simulator::{
    measure_unitary, simulate_with_unitaries, ChipParams, Mode, VoltageSequence,
};
use ndarray::Array2;
use serde_json::json;

use crate::config::RunConfig;
use crate::failure::{Failure, EXIT_MISSING};

pub const TRAIN_FILE: &str = "dataset_train.gbds";
pub const TEST_FILE: &str = "dataset_test.gbds";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

type CmdResult = Result<(), Failure>;

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn ensure_out_dir(cfg: &RunConfig) -> CmdResult {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        Failure::io(format!(
            "cannot create output directory {}: {e}",
            cfg.out_dir.display()
        ))
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, Failure> {
    let f = File::create(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(f))
}

fn load_dataset(cfg: &RunConfig, name: &str) -> Result<Dataset, Failure> {
    let path = out_path(cfg, name);
    Failure::require(&path, "dataset")?;
    Ok(Dataset::load(&path)?)
}

fn load_model(cfg: &RunConfig) -> Result<ModelState, Failure> {
    let path = out_path(cfg, MODEL_FILE);
    Failure::require(&path, "model checkpoint")?;
    Ok(ModelState::load(&path)?)
}

fn require_trained(model: &ModelState) -> CmdResult {
    if model.meta.stage2_done {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_MISSING,
            message: "model checkpoint has not finished training".into(),
        })
    }
}

fn check_chip(digest: Option<&str>, chip: &ChipParams, what: &str) -> CmdResult {
    match digest {
        Some(d) if d != chip.digest() => Err(Failure::config(format!(
            "{what} was produced with different chip parameters"
        ))),
        _ => Ok(()),
    }
}

pub fn gen_dataset(cfg: &RunConfig) -> CmdResult {
    let chip = cfg.chip()?;
    let dcfg = cfg.dataset_config();
    let (train, test) = build_dataset(&dcfg, &chip)?;
    ensure_out_dir(cfg)?;
    train.save(&out_path(cfg, TRAIN_FILE))?;
    test.save(&out_path(cfg, TEST_FILE))?;
    println!(
        "dataset: {} examples, {} train / {} test, {} steps of {} ms, {} electrodes, {} {} channels",
        dcfg.count,
        train.len(),
        test.len(),
        train.steps(),
        dcfg.dt,
        2 * chip.n,
        train.channels(),
        dcfg.mode.as_str()
    );
    Ok(())
}

/// Rows of `loss.csv` already written, which is where a resumed run continues.
fn completed_iterations(path: &Path) -> Result<usize, Failure> {
    if !path.exists() {
        return Ok(0);
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.records().count())
}

pub fn train(cfg: &RunConfig, resume: bool) -> CmdResult {
    let chip = cfg.chip()?;
    let train_set = load_dataset(cfg, TRAIN_FILE)?;
    let test_set = load_dataset(cfg, TEST_FILE)?;
    check_chip(Some(&train_set.params_digest), &chip, "training set")?;
    let mode = train_set.mode;
    let loss_path = out_path(cfg, LOSS_FILE);

    let (mut model, offset, s2) = if resume {
        let model = load_model(cfg)?;
        check_chip(model.meta.params_digest.as_deref(), &chip, "checkpoint")?;
        if model.config().mode != mode {
            return Err(Failure::config("checkpoint and dataset modes differ"));
        }
        // The optimizer state is not checkpointed; continue at the final rate.
        let lr = cfg.training.stage2_final_lr;
        let offset = completed_iterations(&loss_path)?;
        (
            model,
            offset,
            cfg.stage2_config(cfg.training.stage2_iterations, lr, lr),
        )
    } else {
        let mut model = ModelState::new(GrayboxConfig::for_chip(&chip, mode), cfg.seed);
        let readings = zero_voltage_readings(&chip, mode)?;
        let rep = train_stage1(&mut model, &readings, &cfg.stage1_config())?;
        model.meta.params_digest = Some(chip.digest());
        println!(
            "stage 1: static mse {:.3e} (best of {} restarts)",
            rep.mse,
            rep.restarts.len()
        );
        let s2 = cfg.stage2_config(
            cfg.training.stage2_iterations,
            cfg.training.stage2_lr,
            cfg.training.stage2_final_lr,
        );
        (model, 0, s2)
    };

    let mut w = if offset > 0 {
        let f = std::fs::OpenOptions::new()
            .append(true)
            .open(&loss_path)
            .map_err(|e| Failure::io(format!("{}: {e}", loss_path.display())))?;
        csv::WriterBuilder::new().has_headers(false).from_writer(f)
    } else {
        let mut w = csv_writer(&loss_path)?;
        w.write_record(["iteration", "learning_rate", "train_mse"])?;
        w
    };
    let mut write_err = None;
    let result = train_stage2_with(&mut model, &train_set, &s2, |i, loss| {
        let row = [
            (offset + i).to_string(),
            s2.optimizer.lr_at(i).to_string(),
            loss.to_string(),
        ];
        if let Err(e) = w.write_record(&row) {
            write_err.get_or_insert(e);
        }
        if (i + 1) % 100 == 0 {
            eprintln!("stage 2: iteration {} mse {loss:.3e}", offset + i + 1);
        }
    });
    w.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    result?;
    model.save(&out_path(cfg, MODEL_FILE))?;

    let tr = evaluate(&model, &train_set)?;
    let te = evaluate(&model, &test_set)?;
    write_json(
        &out_path(cfg, "train_summary.json"),
        &json!({
            "mode": mode.as_str(),
            "stage1_mse": model.meta.stage1_mse,
            "stage2_iterations": offset + s2.iterations,
            "train_mse": tr.mse,
            "test_mse": te.mse,
            "model_digest": model.digest(),
        }),
    )?;
    println!(
        "stage 2: {} iterations, train mse {:.3e}, test mse {:.3e}",
        offset + s2.iterations,
        tr.mse,
        te.mse
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let model = load_model(cfg)?;
    require_trained(&model)?;
    let mut w = csv_writer(&out_path(cfg, "eval.csv"))?;
    w.write_record(["split", "index", "mse"])?;
    let mut summary = serde_json::Map::new();
    for (name, file) in [("train", TRAIN_FILE), ("test", TEST_FILE)] {
        let set = load_dataset(cfg, file)?;
        let ev = evaluate(&model, &set)?;
        for (i, m) in ev.per_example_mse.iter().enumerate() {
            w.write_record([name, &i.to_string(), &m.to_string()])?;
        }
        summary.insert(format!("{name}_mse"), json!(ev.mse));
        summary.insert(format!("{name}_count"), json!(set.len()));
        println!("{name}: {} examples, mse {:.3e}", set.len(), ev.mse);
    }
    w.flush()?;
    write_json(
        &out_path(cfg, "eval_summary.json"),
        &serde_json::Value::Object(summary),
    )
}

/// What `predict` runs the model on.
pub enum PredictInput {
    Example { split: Split, index: usize },
    Voltages(PathBuf),
}

/// Reads `time_ms,v0_V,...` rows; `dt` comes from the first two times.
fn read_voltages(
    path: &Path,
    electrodes: usize,
    fallback_dt: f64,
) -> Result<VoltageSequence, Failure> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let width = r.headers()?.len();
    if width != electrodes + 1 {
        return Err(Failure::config(format!(
            "{}: expected time plus {electrodes} voltage columns, found {width} columns",
            path.display()
        )));
    }
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let x: f64 = field.trim().parse().map_err(|_| {
                Failure::config(format!(
                    "{}: row {}: '{field}' is not a number",
                    path.display(),
                    line + 1
                ))
            })?;
            if j == 0 {
                times.push(x);
            } else {
                data.push(x);
            }
        }
    }
    if times.is_empty() {
        return Err(Failure::config(format!("{}: no samples", path.display())));
    }
    let dt = if times.len() > 1 {
        times[1] - times[0]
    } else {
        fallback_dt
    };
    if !(dt > 0.0) {
        return Err(Failure::config(format!(
            "{}: times must increase",
            path.display()
        )));
    }
    let samples =
        Array2::from_shape_vec((times.len(), electrodes), data).expect("row widths checked");
    Ok(VoltageSequence { dt, samples })
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect()
}

pub fn predict(cfg: &RunConfig, input: &PredictInput) -> CmdResult {
    let model = load_model(cfg)?;
    require_trained(&model)?;
    let chip = cfg.chip()?;
    check_chip(model.meta.params_digest.as_deref(), &chip, "checkpoint")?;
    let mc = *model.config();
    let (n, mode) = (mc.n, mc.mode);
    let v = match input {
        PredictInput::Example { split, index } => {
            let file = match split {
                Split::Train => TRAIN_FILE,
                Split::Test => TEST_FILE,
            };
            let set = load_dataset(cfg, file)?;
            let ex = set.examples.get(*index).ok_or_else(|| {
                Failure::config(format!(
                    "example {index} out of range, the set has {}",
                    set.len()
                ))
            })?;
            ex.voltages.clone()
        }
        PredictInput::Voltages(path) => {
            Failure::require(path, "voltage file")?;
            read_voltages(path, 2 * n, cfg.dataset.dt)?
        }
    };
    let bundle = model.forward(&v)?;
    let (sim, sim_u) = simulate_with_unitaries(&v, &chip, mode)?;
    let channels = mode.channels(n);
    let pairs = upper_pairs(n);

    let mut header = vec!["time_ms".to_string()];
    header.extend((0..2 * n).map(|e| format!("v{e}_V")));
    for prefix in ["hi", "h"] {
        for &(a, b) in &pairs {
            header.push(format!("{prefix}_re_{a}_{b}_rad_per_m"));
            header.push(format!("{prefix}_im_{a}_{b}_rad_per_m"));
        }
    }
    for m in 0..n {
        header.extend((0..n).map(|k| format!("ideal_in{m}_out{k}")));
    }
    header.extend((0..channels).map(|c| format!("pred_c{c}")));
    header.extend((0..channels).map(|c| format!("sim_c{c}")));
    if mode == Mode::Quantum {
        header.push("infidelity".into());
    }
    let mut w = csv_writer(&out_path(cfg, "predict.csv"))?;
    w.write_record(&header)?;
    for t in 0..v.steps() {
        let mut row = vec![(t as f64 * v.dt).to_string()];
        row.extend(v.samples.row(t).iter().map(f64::to_string));
        for h in [&bundle.h_interaction[t], &bundle.h_total[t]] {
            let m = h.as_matrix();
            for &(a, b) in &pairs {
                row.push(m[[a, b]].re.to_string());
                row.push(m[[a, b]].im.to_string());
            }
        }
        row.extend(bundle.ideal_outputs.row(t).iter().map(f64::to_string));
        row.extend(
            bundle
                .measured_outputs
                .channels
                .row(t)
                .iter()
                .map(f64::to_string),
        );
        row.extend(sim.channels.row(t).iter().map(f64::to_string));
        if mode == Mode::Quantum {
            row.push(gate_infidelity(&bundle.u[t], &sim_u[t])?.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("predict: {} steps, {} columns", v.steps(), header.len());
    Ok(())
}

fn load_schedule(cfg: &RunConfig, mode: Mode) -> Result<TargetSchedule, Failure> {
    match &cfg.controller.schedule {
        Some(p) => TargetSchedule::from_file(p).map_err(Failure::from_config_load),
        None => Ok(match mode {
            Mode::Classical => graybox_core::assets::schedule_classical()?,
            Mode::Quantum => graybox_core::assets::schedule_quantum()?,
        }),
    }
}

pub fn control(cfg: &RunConfig) -> CmdResult {
    let model = load_model(cfg)?;
    require_trained(&model)?;
    let chip = cfg.chip()?;
    check_chip(model.meta.params_digest.as_deref(), &chip, "checkpoint")?;
    let mode = model.config().mode;
    let sched = load_schedule(cfg, mode)?;
    if sched.n != chip.n {
        return Err(Failure::config(format!(
            "schedule is for {} waveguides, chip has {}",
            sched.n, chip.n
        )));
    }
    let iterations = cfg.controller.iterations;
    let mut ctrl = build_controller(cfg.controller_config(), model)?;
    ensure_out_dir(cfg)?;

    let mut lw = csv_writer(&out_path(cfg, "control_loss.csv"))?;
    lw.write_record(["iteration", "learning_rate", "mse"])?;
    let opt = cfg.controller_config().optimizer;
    let mut write_err = None;
    let result = solve_with(&mut ctrl, &sched, iterations, |i, loss| {
        if let Err(e) = lw.write_record([i.to_string(), opt.lr_at(i).to_string(), loss.to_string()])
        {
            write_err.get_or_insert(e);
        }
        if (i + 1) % 100 == 0 {
            eprintln!("control: iteration {} mse {loss:.3e}", i + 1);
        }
    });
    lw.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let sol = result?;
    let report = verify(&sol, &chip)?;
    std::fs::write(out_path(cfg, "control.csv"), sol.to_csv(Some(&report)))?;

    // Targets, model predictions and simulator outputs on the figure of merit:
    // loss-free powers in classical mode, interferometer channels in quantum.
    let targets = schedule_targets(&sched, mode)?;
    let predicted = match mode {
        Mode::Classical => sol.predicted.ideal_outputs.clone(),
        Mode::Quantum => sol.predicted.measured_outputs.channels.clone(),
    };
    let (_, sim_u) = simulate_with_unitaries(&sol.voltages, &chip, Mode::Quantum)?;
    let c = targets.ncols();
    let mut ow = csv_writer(&out_path(cfg, "control_outputs.csv"))?;
    let mut header = vec!["time_ms".to_string()];
    for prefix in ["target", "pred", "sim"] {
        header.extend((0..c).map(|j| format!("{prefix}_c{j}")));
    }
    ow.write_record(&header)?;
    let mut sim = vec![0.0; c];
    for (t, u) in sim_u.iter().enumerate() {
        measure_unitary(u, mode, None, &mut sim)?;
        let mut row = vec![(t as f64 * sched.dt).to_string()];
        row.extend(targets.row(t).iter().map(f64::to_string));
        row.extend(predicted.row(t).iter().map(f64::to_string));
        row.extend(sim.iter().map(f64::to_string));
        ow.write_record(&row)?;
    }
    ow.flush()?;

    write_json(
        &out_path(cfg, "control_report.json"),
        &json!({
            "mode": mode.as_str(),
            "iterations": iterations,
            "final_mse": sol.final_mse,
            "simulator_target_mse": report.target_mse,
            "worst_steady_infidelity_model": report.worst_steady_model,
            "worst_steady_infidelity_simulator": report.worst_steady,
            "model_simulator_divergence": report.model_divergence,
        }),
    )?;
    println!(
        "control: final mse {:.3e}, worst steady infidelity {:.3e} (model) / {:.3e} (simulator)",
        sol.final_mse, report.worst_steady_model, report.worst_steady
    );
    std::io::stdout().flush()?;
    Ok(())
}
