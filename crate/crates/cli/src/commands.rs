use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use wsnn::data::Normalization;
use wsnn::energy::{emit_report, energy_from_counts, leading_digits, EnergyReport, SpikeTrace};
use wsnn::fusion::{area_reports_csv, sweep_theta as area_sweep, AREA_CSV_HEADER};
use wsnn::net::{NetworkSpec, ParameterSet};
use wsnn::train::{evaluate, history_csv, train as fit, Metrics};

use crate::config::{Config, Overrides};
use crate::Failure;

/// Everything needed to rebuild and evaluate a trained network.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: Config,
    pub network: NetworkSpec,
    pub normalization: Normalization,
    pub params: ParameterSet,
}

pub enum EnergySource {
    Counts(f64, f64),
    Checkpoint(PathBuf, Overrides),
    Trace(PathBuf, PathBuf),
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Config(format!(
            "input not found: {}",
            path.display()
        )))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    require(path)?;
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

fn write_evaluation(dir: &Path, metrics: &Metrics, report: &EnergyReport) -> Result<(), Failure> {
    write_json(&dir.join("metrics.json"), metrics)?;
    write_json(&dir.join("trace.json"), &metrics.trace)?;
    fs::write(dir.join("energy.csv"), report.to_csv())?;
    fs::write(dir.join("energy.txt"), report.to_text())?;
    Ok(())
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "held-out top1 {:.4}  loss {:.6}  spikes/image {:.2}",
        m.top1, m.loss, m.spikes_per_image
    )
}

pub fn train(cfg: &Config, out: &Path) -> Result<(), Failure> {
    let net = cfg.network()?;
    let splits = cfg.splits()?;
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    fs::write(out.join("network.toml"), net.to_toml()?)?;
    println!(
        "training {} ({} layers) on {} images for {} epochs",
        net.name,
        net.layers.len(),
        splits.train.len(),
        cfg.train.epochs
    );
    let outcome = fit(&net, &splits.train, &cfg.train)?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {}  loss {:.6}  train top1 {:.4}",
            last.epoch, last.loss, last.top1
        );
    }
    let metrics = evaluate(&net, &outcome.params, &splits.test, cfg.train.batch)?;
    let report = emit_report(&metrics.trace, &net)?;
    write_evaluation(out, &metrics, &report)?;
    write_json(
        &out.join("checkpoint.json"),
        &Checkpoint {
            config: cfg.clone(),
            network: net,
            normalization: splits.normalization,
            params: outcome.params,
        },
    )?;
    println!("{}", metrics_line(&metrics));
    println!(
        "energy {:.3} pJ ({:.6e} J)",
        report.energy_pj,
        report.energy_joules()
    );
    Ok(())
}

fn evaluate_checkpoint(path: &Path, data: &Overrides) -> Result<(Checkpoint, Metrics), Failure> {
    let ck: Checkpoint = read_json(path)?;
    let mut cfg = ck.config.clone();
    data.apply(&mut cfg);
    cfg.validate()?;
    let (_, test) = cfg.raw_splits()?;
    let test = ck.normalization.apply(&test)?;
    let metrics = evaluate(&ck.network, &ck.params, &test, cfg.train.batch)?;
    Ok((ck, metrics))
}

pub fn eval(checkpoint: &Path, data: &Overrides, out: Option<&Path>) -> Result<(), Failure> {
    let (ck, metrics) = evaluate_checkpoint(checkpoint, data)?;
    let report = emit_report(&metrics.trace, &ck.network)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_evaluation(dir, &metrics, &report)?;
    }
    println!("{}", metrics_line(&metrics));
    Ok(())
}

pub const COUNTS_CSV_HEADER: &str = "adds,mults,energy_pJ,energy_J,leading_digits";

pub fn analyze_energy(source: EnergySource, out: Option<&Path>) -> Result<(), Failure> {
    let report = match source {
        EnergySource::Counts(adds, mults) => {
            let e = energy_from_counts(adds, mults)?;
            let csv = format!(
                "{COUNTS_CSV_HEADER}\n{},{},{},{:e},{}\n",
                e.adds,
                e.mults,
                e.energy_pj,
                e.energy_joules,
                leading_digits(e.energy_pj, 3)
            );
            print!("{csv}");
            if let Some(dir) = out {
                create_dir(dir)?;
                fs::write(dir.join("energy_counts.csv"), csv)?;
            }
            return Ok(());
        }
        EnergySource::Checkpoint(path, data) => {
            let (ck, metrics) = evaluate_checkpoint(&path, &data)?;
            println!("{}", metrics_line(&metrics));
            emit_report(&metrics.trace, &ck.network)?
        }
        EnergySource::Trace(trace, network) => {
            let trace: SpikeTrace = read_json(&trace)?;
            require(&network)?;
            let net = NetworkSpec::from_toml(&fs::read_to_string(&network)?)?;
            emit_report(&trace, &net)?
        }
    };
    print!("{}", report.to_text());
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("energy.csv"), report.to_csv())?;
        fs::write(dir.join("energy.txt"), report.to_text())?;
    }
    Ok(())
}

/// Epochs of each `--train-smoke` run.
pub const SMOKE_EPOCHS: usize = 3;

pub fn sweep_theta(cfg: &Config, train_smoke: bool, out: Option<&Path>) -> Result<(), Failure> {
    let reports = area_sweep(&cfg.fusion.thetas, cfg.fusion.th)?;
    let csv = if train_smoke {
        let mut smoke = cfg.clone();
        smoke.train.epochs = SMOKE_EPOCHS;
        let splits = if reports.is_empty() {
            None
        } else {
            Some(smoke.splits()?)
        };
        let mut csv = format!("{AREA_CSV_HEADER},final_loss\n");
        for r in &reports {
            smoke.fusion.theta = r.theta;
            let net = smoke.network()?;
            let train = &splits.as_ref().expect("loaded for a non-empty sweep").train;
            let history = fit(&net, train, &smoke.train)?.history;
            let loss = history.last().map_or(f64::NAN, |h| h.loss);
            let _ = writeln!(
                csv,
                "{},{:.6},{:.6},{:.6},{:.8}",
                r.theta, r.s_surface, r.s_plane, r.nabla_d, loss
            );
        }
        csv
    } else {
        area_reports_csv(&reports)
    };
    print!("{csv}");
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        fs::write(dir.join("sweep_theta.csv"), csv)?;
    }
    Ok(())
}

fn last_history_row(csv: &str) -> Option<Vec<String>> {
    csv.lines()
        .skip(1)
        .last()
        .map(|l| l.split(',').map(str::to_string).collect())
}

pub fn export_report(run: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let ck: Checkpoint = read_json(&run.join("checkpoint.json"))?;
    let metrics: Metrics = read_json(&run.join("metrics.json"))?;
    let history_path = run.join("history.csv");
    require(&history_path)?;
    let history = fs::read_to_string(&history_path)?;
    let report = emit_report(&metrics.trace, &ck.network)?;
    let net = &ck.network;
    let cfg = &ck.config;
    let n_params: usize = ck.params.tensors.values().map(|t| t.len()).sum();

    let mut text = String::new();
    let _ = writeln!(text, "network {}", net.name);
    let _ = writeln!(
        text,
        "  layers {}  parameters {}",
        net.layers.len(),
        n_params
    );
    let _ = writeln!(
        text,
        "  scale {}  window {:?}  fusion {} theta {}",
        cfg.model.scale, cfg.window.mode, cfg.fusion.enabled, cfg.fusion.theta
    );
    let _ = writeln!(text, "training");
    let _ = writeln!(
        text,
        "  epochs {}  seed {}  lr {}",
        cfg.train.epochs, cfg.train.seed, cfg.train.lr
    );
    if let Some(row) = last_history_row(&history) {
        let _ = writeln!(
            text,
            "  final {}",
            wsnn::train::HISTORY_CSV_HEADER
                .split(',')
                .zip(&row)
                .map(|(k, v)| format!("{k} {v}"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
    let _ = writeln!(text, "evaluation");
    let _ = writeln!(text, "  {}", metrics_line(&metrics));
    for (name, rate) in &metrics.per_layer_rates {
        let _ = writeln!(text, "  rate {name:<16} {rate:.6}");
    }
    let _ = writeln!(text, "energy");
    text.push_str(&report.to_text());

    let path = out.map_or_else(|| run.join("report.txt"), Path::to_path_buf);
    fs::write(&path, &text)?;
    print!("{text}");
    Ok(())
}
