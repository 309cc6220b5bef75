use std::fs;
use std::path::{Path, PathBuf};

use classpoison::datasets::{generate_blobs, load_idx, split};
use classpoison::harness::{self, run_as_experiment, run_ov_experiment, AttackSession, CurvePoint, Pretrained};
use classpoison::metrics::EvalReport;
use classpoison::{attacks, textio, BlobSpec, Dataset, DatasetRole, MlpModel, PretrainConfig, SessionInputs};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, Experiment, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const POISONS_FILE: &str = "poisons.json";
pub const RUN_FILE: &str = "run.json";
pub const MERGED_CURVES_FILE: &str = "merged_curves.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    match &cfg.dataset {
        DatasetConfig::Blobs {
            k_classes,
            dim,
            n_per_class,
            center_separation,
            noise_sigma,
            train_fraction,
            seed,
        } => {
            let spec = BlobSpec {
                k_classes: *k_classes,
                dim: *dim,
                n_per_class: *n_per_class,
                center_separation: *center_separation,
                noise_sigma: *noise_sigma,
                rng_seed: *seed,
            };
            let (train, test) = split(&generate_blobs(&spec)?, *train_fraction, *seed)?;
            Ok(Data { train, test })
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            if let Some(n) = train_limit {
                train = train.head(*n);
            }
            if let Some(n) = test_limit {
                test = test.head(*n);
            }
            let k = train.k_classes().max(test.k_classes());
            Ok(Data {
                train: train.with_k_classes(k)?,
                test: test.with_k_classes(k)?.with_role(DatasetRole::Test),
            })
        }
    }
}

fn layer_dims(cfg: &RunConfig, data: &Data) -> Result<Vec<usize>, CliError> {
    let input = data
        .train
        .dim()
        .ok_or_else(|| CliError::Runtime("training set is empty".into()))?;
    let mut dims = vec![input];
    dims.extend(&cfg.model.hidden);
    dims.push(data.train.k_classes());
    Ok(dims)
}

/// SGD steps taken by `pretrain` for this config; the attack schedule resumes here.
fn pretrain_steps(cfg: &RunConfig, data: &Data) -> u64 {
    let per_epoch = data.train.len().div_ceil(cfg.pretrain.batch_size);
    (cfg.pretrain.epochs * per_epoch) as u64
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn pretrain_log_csv(p: &Pretrained) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "lr", "train_loss", "test_accuracy"])?;
    for e in &p.log {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_loss.to_string(),
            e.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn cmd_pretrain(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let dims = layer_dims(cfg, &data)?;
    let pcfg = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        schedule: cfg.schedule(),
        seed,
    };
    let pre = harness::pretrain(MlpModel::new(&dims, seed)?, &data.train, &pcfg, Some(&data.test))?;
    ensure_dir(out)?;
    pre.model.save_checkpoint(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(PRETRAIN_LOG_FILE), &pretrain_log_csv(&pre)?)?;
    let acc = pre.log.last().and_then(|e| e.test_accuracy);
    println!(
        "pretrained {:?} for {} epochs ({} steps), test accuracy {}",
        dims,
        cfg.pretrain.epochs,
        pre.steps,
        acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// Metadata written next to each attack run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub scenario: String,
    pub seed: u64,
    pub k_classes: usize,
    pub target: usize,
    pub victim: Option<usize>,
    pub points: usize,
    pub error_before: f64,
    pub error_after: f64,
    pub ctt: Option<f64>,
    pub cft: Vec<Option<f64>>,
}

pub fn cmd_attack(cfg: &RunConfig, seed: u64, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let experiment = cfg.experiment(Some(data.train.k_classes()))?;
    let dims = layer_dims(cfg, &data)?;
    let model = MlpModel::load_checkpoint(checkpoint)?;
    if model.layer_dims() != dims {
        return Err(CliError::Runtime(format!(
            "checkpoint {} has layer widths {:?}, the config describes {:?}",
            checkpoint.display(),
            model.layer_dims(),
            dims
        )));
    }
    let inputs = SessionInputs {
        base_model: &model,
        train: &data.train,
        test: &data.test,
        schedule: cfg.schedule(),
        start_step: pretrain_steps(cfg, &data),
        seed,
    };
    let (session, report, scenario, victim) = match experiment {
        Experiment::As(e) => {
            let (s, r) = run_as_experiment(&inputs, &e)?;
            (s, r, "as", None)
        }
        Experiment::Ov(e) => {
            let (s, r) = run_ov_experiment(&inputs, &e)?;
            (s, r, "ov", Some(e.attack.victim))
        }
    };
    ensure_dir(out)?;
    harness::export_curves(&session, &out.join(CURVES_FILE))?;
    report.write_csv(&out.join(REPORT_CSV_FILE))?;
    report.write_summary(&out.join(REPORT_JSON_FILE))?;
    attacks::save_poison_set(&out.join(POISONS_FILE), session.k_classes(), &session.poisons)?;
    let summary = summarize(cfg, seed, scenario, victim, &session, &report);
    textio::write_file(&out.join(RUN_FILE), &summary)?;
    println!(
        "{} run: error {:.4} -> {:.4}, ctt {}",
        summary.mode,
        summary.error_before,
        summary.error_after,
        fmt_opt(summary.ctt)
    );
    Ok(())
}

fn summarize(
    cfg: &RunConfig,
    seed: u64,
    scenario: &str,
    victim: Option<usize>,
    session: &AttackSession,
    report: &EvalReport,
) -> RunSummary {
    let mode = serde_json::to_value(cfg.attack.mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    RunSummary {
        mode,
        scenario: scenario.to_string(),
        seed,
        k_classes: session.k_classes(),
        target: session.ctt_target(),
        victim,
        points: session.curve.len(),
        error_before: report.overall.error_before,
        error_after: report.overall.error_after,
        ctt: report.overall.ctt,
        cft: report.classes.iter().map(|c| c.cft).collect(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Runs under `dir`: the directory itself if it holds a run, else its run subdirectories.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.join(RUN_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", dir.display())))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RUN_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(CliError::Runtime(format!("no completed runs in {}", dir.display())));
    }
    Ok(runs)
}

fn run_name(dir: &Path, run: &Path) -> String {
    run.strip_prefix(dir)
        .ok()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(run)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string())
}

pub struct LoadedRun {
    pub name: String,
    pub summary: RunSummary,
    pub curve: Vec<CurvePoint>,
}

pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>, CliError> {
    find_runs(dir)?
        .into_iter()
        .map(|run| {
            Ok(LoadedRun {
                name: run_name(dir, &run),
                summary: textio::read_file(&run.join(RUN_FILE))?,
                curve: harness::read_curves(&run.join(CURVES_FILE))?,
            })
        })
        .collect()
}

pub fn render_table(runs: &[LoadedRun]) -> String {
    let header = [
        "run", "mode", "scenario", "target", "points", "err_before", "err_after", "ctt", "cft_victim", "cft_max_other",
    ];
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let s = &r.summary;
            let (victim_cft, other) = match s.victim {
                Some(v) => (
                    fmt_opt(s.cft.get(v).copied().flatten()),
                    fmt_opt(
                        s.cft
                            .iter()
                            .enumerate()
                            .filter(|&(k, _)| k != v)
                            .filter_map(|(_, c)| *c)
                            .reduce(f64::max),
                    ),
                ),
                None => ("-".into(), "-".into()),
            };
            vec![
                r.name.clone(),
                s.mode.clone(),
                s.scenario.clone(),
                s.target.to_string(),
                s.points.to_string(),
                format!("{:.4}", s.error_before),
                format!("{:.4}", s.error_after),
                fmt_opt(s.ctt),
                victim_cft,
                other,
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn merged_curves_csv(runs: &[LoadedRun]) -> Result<String, CliError> {
    let max_k = runs
        .iter()
        .flat_map(|r| r.curve.iter())
        .filter_map(|p| p.cft().map(<[_]>::len))
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string(), "iteration".into(), "lr".into(), "error".into(), "ctt".into()];
    header.extend((0..max_k).map(|k| format!("cft_class_{k}")));
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in runs {
        for p in &r.curve {
            let mut row = vec![
                r.name.clone(),
                p.iteration.to_string(),
                p.lr.to_string(),
                p.error.to_string(),
                cell(p.ctt()),
            ];
            let cft = p.cft().unwrap_or(&[]);
            row.extend((0..max_k).map(|k| cell(cft.get(k).copied().flatten())));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let runs = load_runs(dir)?;
    let table = render_table(&runs);
    write_text(&dir.join(SUMMARY_FILE), &table)?;
    write_text(&dir.join(MERGED_CURVES_FILE), &merged_curves_csv(&runs)?)?;
    print!("{table}");
    Ok(())
}
