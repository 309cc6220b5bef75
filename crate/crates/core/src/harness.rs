//! Online-learning simulation.
//!
//! A base model is pretrained once and frozen. An attack session clones it
//! into a live model and alternates poison crafting with SGD fine-tuning,
//! recording one [`CurvePoint`] per attack iteration (AS) or per epoch (OV).
//! Every metric compares against predictions taken from the frozen base model
//! before the first fine-tuning step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    self, craft_as_poison, craft_ov_poisonset, dgm_poison, flipped_label, ASConfig, OVConfig,
    PoisonedExample, Provenance, StopReason,
};
use crate::datasets::{batch_indices, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, Phase, PredictionSnapshot};
use crate::nn::{GradientBundle, LrSchedule, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: MlpModel,
    /// Learning rate of the last SGD step (the initial rate if no step ran).
    pub final_lr: f64,
    /// SGD steps taken; the attack phase continues the schedule from here.
    pub steps: u64,
    pub log: Vec<EpochLog>,
}

/// Averages per-example gradients over `batch` and applies one SGD step.
/// Returns the mean loss of the batch before the update.
pub fn minibatch_step(model: &mut MlpModel, batch: &[&LabeledExample], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let per_example = batch
        .par_iter()
        .map(|e| model.loss_and_backward(&e.image, e.label))
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradientBundle::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &per_example {
        loss += l;
        total.accumulate(g);
    }
    let n = batch.len() as f64;
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("minibatch loss is {loss}")));
    }
    total.scale(1.0 / n);
    model.sgd_step(&total, lr)?;
    Ok(loss)
}

/// Minibatch SGD on `train` following `cfg.schedule`, one step per batch.
pub fn pretrain(
    initial: MlpModel,
    train: &Dataset,
    cfg: &PretrainConfig,
    eval: Option<&Dataset>,
) -> Result<Pretrained> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot pretrain on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut model = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0u64;
    let mut final_lr = cfg.schedule.lr_at(0);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in batch_indices(train.len(), cfg.batch_size, &mut rng) {
            let examples: Vec<&LabeledExample> = batch.iter().map(|&i| train.get(i)).collect();
            let lr = cfg.schedule.lr_at(step);
            let loss = minibatch_step(&mut model, &examples, lr)
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, step {step}: {msg}")),
                    other => other,
                })?;
            loss_sum += loss * examples.len() as f64;
            final_lr = lr;
            step += 1;
        }
        let test_accuracy = match eval {
            Some(ds) => Some(metrics::accuracy(&metrics::predict_all(&model, ds, Phase::After)?)),
            None => None,
        };
        log.push(EpochLog {
            epoch,
            lr: final_lr,
            train_loss: loss_sum / train.len() as f64,
            test_accuracy,
        });
    }
    Ok(Pretrained {
        model,
        final_lr,
        steps: step,
        log,
    })
}

/// How an AS-style session builds the example it fine-tunes on each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AsMethod {
    /// Algorithm-1 poison, labeled with the supplanter.
    AllSupplanter,
    /// Unmodified seed relabeled with the supplanter.
    FlippedLabel,
    /// Loss-ascent poison relabeled with the supplanter.
    Dgm { steps: usize },
    /// Unmodified seed with its own label (no-poison control).
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ASExperiment {
    pub attack: ASConfig,
    pub method: AsMethod,
    pub attack_iterations: usize,
    pub poisons_per_iteration: usize,
    pub fine_tune_steps_per_poison: usize,
    /// Replaces the continued base schedule's rate; the decay strategy is kept.
    pub lr_override: Option<f64>,
    /// Clean training examples given one SGD step each after the poison steps.
    pub clean_per_iteration: usize,
}

impl ASExperiment {
    pub fn new(attack: ASConfig) -> Self {
        Self {
            attack,
            method: AsMethod::AllSupplanter,
            attack_iterations: 50,
            poisons_per_iteration: 1,
            fine_tune_steps_per_poison: 5,
            lr_override: None,
            clean_per_iteration: 0,
        }
    }
}

/// How an OV-style session builds its poison set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OvMethod {
    /// Algorithm-2 poison set.
    OnlyVictim,
    /// Victim seeds relabeled with the poison label, other seeds unchanged.
    FlippedLabel,
    /// Victim seeds replaced by loss-ascent poison labeled with the poison label.
    Dgm { steps: usize },
    /// Every seed unchanged with its own label (all-clean control).
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OVExperiment {
    pub attack: OVConfig,
    pub method: OvMethod,
    pub epochs: usize,
    /// Mix the clean training set into every epoch so poison is `poison_fraction` of the stream.
    pub clean_replay: bool,
    pub batch_size: usize,
    pub lr_override: Option<f64>,
}

impl OVExperiment {
    pub fn new(attack: OVConfig) -> Self {
        Self {
            attack,
            method: OvMethod::OnlyVictim,
            epochs: 5,
            clean_replay: true,
            batch_size: 16,
            lr_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExperimentKind {
    AllSupplanter(ASExperiment),
    OnlyVictim(OVExperiment),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CurveMetric {
    Ctt(Option<f64>),
    Cft(Vec<Option<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub lr: f64,
    pub error: f64,
    pub metric: CurveMetric,
}

impl CurvePoint {
    pub fn ctt(&self) -> Option<f64> {
        match &self.metric {
            CurveMetric::Ctt(v) => *v,
            CurveMetric::Cft(_) => None,
        }
    }

    pub fn cft(&self) -> Option<&[Option<f64>]> {
        match &self.metric {
            CurveMetric::Cft(v) => Some(v),
            CurveMetric::Ctt(_) => None,
        }
    }
}

/// Borrowed inputs shared by every session built on one pretrained model.
#[derive(Debug, Clone, Copy)]
pub struct SessionInputs<'a> {
    pub base_model: &'a MlpModel,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    /// The base model's schedule; attack steps continue it from `start_step`.
    pub schedule: LrSchedule,
    pub start_step: u64,
    pub seed: u64,
}

/// State of one online poisoning run.
#[derive(Debug, Clone)]
pub struct AttackSession {
    pub base_model: MlpModel,
    pub live_model: MlpModel,
    pub schedule: LrSchedule,
    pub lr_override: Option<f64>,
    pub start_step: u64,
    /// SGD steps taken during the attack.
    pub attack_steps: u64,
    pub seed: u64,
    pub kind: ExperimentKind,
    pub before: PredictionSnapshot,
    pub curve: Vec<CurvePoint>,
    pub poisons: Vec<PoisonedExample>,
    rng: ChaCha8Rng,
}

impl AttackSession {
    fn open(inputs: &SessionInputs<'_>, kind: ExperimentKind, lr_override: Option<f64>) -> Result<Self> {
        if let Some(lr) = lr_override {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidArgument(format!("lr_override must be >= 0, got {lr}")));
            }
        }
        if inputs.train.k_classes() != inputs.base_model.k_classes() {
            return Err(Error::Shape(format!(
                "training set has {} classes, model outputs {}",
                inputs.train.k_classes(),
                inputs.base_model.k_classes()
            )));
        }
        if let Some(dim) = inputs.train.dim() {
            if dim != inputs.base_model.input_dim() {
                return Err(Error::Shape(format!(
                    "training images have dim {dim}, model expects {}",
                    inputs.base_model.input_dim()
                )));
            }
        }
        let before = metrics::predict_all(inputs.base_model, inputs.test, Phase::Before)?;
        Ok(Self {
            base_model: inputs.base_model.clone(),
            live_model: inputs.base_model.clone(),
            schedule: inputs.schedule,
            lr_override,
            start_step: inputs.start_step,
            attack_steps: 0,
            seed: inputs.seed,
            kind,
            before,
            curve: Vec::new(),
            poisons: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(inputs.seed),
        })
    }

    pub fn k_classes(&self) -> usize {
        self.base_model.k_classes()
    }

    /// Learning rate for the next attack SGD step.
    pub fn current_lr(&self) -> f64 {
        match self.lr_override {
            Some(lr) if lr == 0.0 => 0.0,
            Some(lr) => self
                .schedule
                .with_initial_lr(lr)
                .map(|s| s.lr_at(self.attack_steps))
                .unwrap_or(lr),
            None => self.schedule.lr_at(self.start_step + self.attack_steps),
        }
    }

    fn sgd(&mut self, batch: &[&LabeledExample]) -> Result<()> {
        let lr = self.current_lr();
        minibatch_step(&mut self.live_model, batch, lr)?;
        self.attack_steps += 1;
        Ok(())
    }

    /// Target class used for CTT: the supplanter (AS) or the poison label (OV).
    pub fn ctt_target(&self) -> usize {
        match &self.kind {
            ExperimentKind::AllSupplanter(e) => e.attack.supplanter,
            ExperimentKind::OnlyVictim(e) => e.attack.poison_label,
        }
    }

    pub fn snapshot(&self, test: &Dataset) -> Result<PredictionSnapshot> {
        metrics::predict_all(&self.live_model, test, Phase::After)
    }

    pub fn report(&self, test: &Dataset) -> Result<EvalReport> {
        EvalReport::from_snapshots(&self.before, &self.snapshot(test)?, Some(self.ctt_target()))
    }

    fn record(&mut self, test: &Dataset) -> Result<()> {
        let after = self.snapshot(test)?;
        let metric = match &self.kind {
            ExperimentKind::AllSupplanter(e) => {
                CurveMetric::Ctt(metrics::ctt_overall(&self.before, &after, e.attack.supplanter)?)
            }
            ExperimentKind::OnlyVictim(_) => CurveMetric::Cft(
                (0..self.k_classes())
                    .map(|k| metrics::cft_per_class(&self.before, &after, k))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        self.curve.push(CurvePoint {
            iteration: self.curve.len(),
            lr: self.current_lr(),
            error: metrics::error_rate(&after),
            metric,
        });
        Ok(())
    }

    pub fn final_point(&self) -> Option<&CurvePoint> {
        self.curve.last()
    }
}

fn make_as_example(
    model: &MlpModel,
    seed: &LabeledExample,
    index: usize,
    exp: &ASExperiment,
) -> Result<PoisonedExample> {
    let poison = match exp.method {
        AsMethod::AllSupplanter => craft_as_poison(model, seed, &exp.attack)?,
        AsMethod::FlippedLabel => flipped_label(seed, exp.attack.supplanter)?,
        AsMethod::Dgm { steps } => dgm_poison(model, seed, steps, exp.attack.epsilon, exp.attack.supplanter)?,
        AsMethod::Clean => unchanged(seed),
    };
    Ok(poison.with_seed_index(index))
}

fn unchanged(seed: &LabeledExample) -> PoisonedExample {
    PoisonedExample {
        image: seed.image.clone(),
        assigned_label: seed.label,
        provenance: Provenance {
            seed_index: None,
            original_label: seed.label,
            iterations: 0,
            stop_reason: StopReason::ConvergedT,
        },
    }
}

/// All-Supplanter style session: each iteration crafts fresh poison against
/// the current live model and fine-tunes on it.
pub fn run_as_experiment(inputs: &SessionInputs<'_>, exp: &ASExperiment) -> Result<(AttackSession, EvalReport)> {
    let k = inputs.base_model.k_classes();
    exp.attack.validate(k)?;
    if exp.attack_iterations == 0 {
        return Err(Error::InvalidArgument("attack_iterations must be >= 1".into()));
    }
    if let AsMethod::Dgm { steps: 0 } = exp.method {
        return Err(Error::InvalidArgument("DGM needs steps >= 1".into()));
    }
    let supplanter = exp.attack.supplanter;
    let eligible: Vec<usize> = match exp.method {
        AsMethod::Clean => (0..inputs.train.len()).collect(),
        _ => (0..inputs.train.len())
            .filter(|&i| inputs.train.get(i).label != supplanter)
            .collect(),
    };
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(
            "training set has no seed outside the supplanter class".into(),
        ));
    }

    let mut session = AttackSession::open(inputs, ExperimentKind::AllSupplanter(*exp), exp.lr_override)?;
    for _ in 0..exp.attack_iterations {
        let mut crafted = Vec::with_capacity(exp.poisons_per_iteration);
        for _ in 0..exp.poisons_per_iteration {
            let idx = eligible[session.rng.random_range(0..eligible.len())];
            crafted.push(make_as_example(&session.live_model, inputs.train.get(idx), idx, exp)?);
        }
        for poison in &crafted {
            let example = poison.to_example();
            for _ in 0..exp.fine_tune_steps_per_poison {
                session.sgd(&[&example])?;
            }
        }
        for _ in 0..exp.clean_per_iteration {
            let idx = session.rng.random_range(0..inputs.train.len());
            session.sgd(&[inputs.train.get(idx)])?;
        }
        session.poisons.extend(crafted);
        session.record(inputs.test)?;
    }
    let report = session.report(inputs.test)?;
    Ok((session, report))
}

/// Number of poison examples an OV run injects: `poison / (clean + poison)`
/// equals the fraction with clean replay, `poison / clean` without.
/// Rounded down to a multiple of the class count.
pub fn ov_poison_per_class(train_len: usize, k_classes: usize, cfg: &OVConfig, clean_replay: bool) -> Result<usize> {
    let f = cfg.poison_fraction;
    let total = if clean_replay {
        if f >= 1.0 {
            return Err(Error::InvalidArgument(
                "poison_fraction must be < 1 when clean data is replayed".into(),
            ));
        }
        (f * train_len as f64 / (1.0 - f)).round() as usize
    } else {
        (f * train_len as f64).round() as usize
    };
    let per_class = total / k_classes;
    if per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "poison_fraction {f} yields no poison for {train_len} training examples and {k_classes} classes"
        )));
    }
    Ok(per_class)
}

/// Only-Victim style session: the poison set is crafted once against the base
/// model, then the live model is fine-tuned on the shuffled mix for `epochs`.
pub fn run_ov_experiment(inputs: &SessionInputs<'_>, exp: &OVExperiment) -> Result<(AttackSession, EvalReport)> {
    let k = inputs.base_model.k_classes();
    exp.attack.validate(k)?;
    if exp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if let OvMethod::Dgm { steps: 0 } = exp.method {
        return Err(Error::InvalidArgument("DGM needs steps >= 1".into()));
    }
    let per_class = ov_poison_per_class(inputs.train.len(), k, &exp.attack, exp.clean_replay)?;
    if let Some((class, &n)) = inputs
        .train
        .class_counts()
        .iter()
        .enumerate()
        .find(|(_, &n)| n < per_class)
    {
        return Err(Error::InvalidArgument(format!(
            "class {class} has {n} training examples, {per_class} seeds needed"
        )));
    }

    let mut session = AttackSession::open(inputs, ExperimentKind::OnlyVictim(*exp), exp.lr_override)?;
    let mut seed_idx: Vec<Vec<usize>> = Vec::with_capacity(k);
    for class in 0..k {
        let mut idx = inputs.train.indices_of_class(class);
        idx.shuffle(&mut session.rng);
        idx.truncate(per_class);
        seed_idx.push(idx);
    }
    let seeds: Vec<Vec<LabeledExample>> = seed_idx
        .iter()
        .map(|idx| idx.iter().map(|&i| inputs.train.get(i).clone()).collect())
        .collect();
    let cfg = &exp.attack;
    let base = &session.base_model;
    let poisons: Vec<PoisonedExample> = match exp.method {
        OvMethod::OnlyVictim => craft_ov_poisonset(base, &seeds, cfg)?,
        OvMethod::FlippedLabel | OvMethod::Dgm { .. } | OvMethod::Clean => seeds
            .iter()
            .flatten()
            .map(|s| match exp.method {
                OvMethod::FlippedLabel if s.label == cfg.victim => flipped_label(s, cfg.poison_label),
                OvMethod::Dgm { steps } if s.label == cfg.victim => {
                    dgm_poison(base, s, steps, cfg.epsilon, cfg.poison_label)
                }
                _ => Ok(unchanged(s)),
            })
            .collect::<Result<Vec<_>>>()?,
    };
    session.poisons = poisons
        .into_iter()
        .zip(seed_idx.iter().flatten())
        .map(|(p, &i)| p.with_seed_index(i))
        .collect();

    let poison_examples: Vec<LabeledExample> = session.poisons.iter().map(PoisonedExample::to_example).collect();
    let mut stream: Vec<&LabeledExample> = Vec::new();
    if exp.clean_replay {
        stream.extend(inputs.train.examples());
    }
    stream.extend(poison_examples.iter());

    for _ in 0..exp.epochs {
        for batch in batch_indices(stream.len(), exp.batch_size, &mut session.rng) {
            let examples: Vec<&LabeledExample> = batch.iter().map(|&i| stream[i]).collect();
            session.sgd(&examples)?;
        }
        session.record(inputs.test)?;
    }
    let report = session.report(inputs.test)?;
    Ok((session, report))
}

/// Runs the same AS experiment once per learning rate, with identical seeds.
pub fn lr_sensitivity_sweep(
    inputs: &SessionInputs<'_>,
    exp: &ASExperiment,
    lrs: &[f64],
) -> Result<Vec<(f64, AttackSession)>> {
    if lrs.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two learning rates".into()));
    }
    lrs.iter()
        .map(|&lr| {
            let run = ASExperiment {
                lr_override: Some(lr),
                ..*exp
            };
            Ok((lr, run_as_experiment(inputs, &run)?.0))
        })
        .collect()
}

/// Attack iterations needed before overall CTT first reaches `threshold`.
pub fn iterations_to_reach(curve: &[CurvePoint], threshold: f64) -> Option<usize> {
    curve
        .iter()
        .position(|p| p.ctt().is_some_and(|c| c >= threshold))
        .map(|i| i + 1)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Curve CSV: `iteration,lr,error` followed by `ctt` (AS) or `cft_class_0..K-1` (OV).
pub fn curves_to_csv(curve: &[CurvePoint], k_classes: usize) -> Result<String> {
    let ov = matches!(curve.first().map(|p| &p.metric), Some(CurveMetric::Cft(_)));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string(), "lr".into(), "error".into()];
    if ov {
        header.extend((0..k_classes).map(|k| format!("cft_class_{k}")));
    } else {
        header.push("ctt".into());
    }
    w.write_record(&header)?;
    for p in curve {
        let mut row = vec![p.iteration.to_string(), p.lr.to_string(), p.error.to_string()];
        match &p.metric {
            CurveMetric::Ctt(c) => row.push(cell(*c)),
            CurveMetric::Cft(v) => row.extend(v.iter().map(|c| cell(*c))),
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("curve csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn export_curves(session: &AttackSession, path: &Path) -> Result<()> {
    if session.curve.is_empty() {
        return Err(Error::InvalidArgument("session has no curve points".into()));
    }
    let text = curves_to_csv(&session.curve, session.k_classes())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_cell(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::format("curve csv", format!("{what} = {s:?}: {e}")))
}

pub fn parse_curves(text: &str) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 4 || names[..3] != ["iteration", "lr", "error"] {
        return Err(Error::format("curve csv", format!("unexpected header {names:?}")));
    }
    let ov = names[3].starts_with("cft_class_");
    if !ov && (names[3] != "ctt" || names.len() != 4) {
        return Err(Error::format("curve csv", format!("unexpected header {names:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let iteration = rec[0]
            .parse()
            .map_err(|e| Error::format("curve csv", format!("iteration {:?}: {e}", &rec[0])))?;
        let lr = parse_cell(&rec[1], "lr")?.ok_or_else(|| Error::format("curve csv", "missing lr"))?;
        let error = parse_cell(&rec[2], "error")?.ok_or_else(|| Error::format("curve csv", "missing error"))?;
        let metric = if ov {
            CurveMetric::Cft(
                rec.iter()
                    .skip(3)
                    .map(|c| parse_cell(c, "cft"))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            CurveMetric::Ctt(parse_cell(&rec[3], "ctt")?)
        };
        out.push(CurvePoint {
            iteration,
            lr,
            error,
            metric,
        });
    }
    Ok(out)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curves(&text)
}

pub use attacks::save_poison_set as export_poison_set;
