//! Poison generators.
//!
//! The two class-oriented generators manipulate logits through iterated
//! sign-gradient steps on the input, clipped to the unit box:
//!
//! * All-Supplanter (AS): descend `-f_o + lambda * f_s`, keeping the seed's own
//!   class features while erasing the supplanter's, then label the result `y_s`.
//! * Only-Victim (OV): victim seeds go through the AS procedure with the poison
//!   label as the suppressed class and are relabeled; every other seed only has
//!   its own logit raised and keeps its label.
//!
//! The targets `+inf` / `-inf` on a logit are realized as the linear losses
//! `-f` / `+f`, so each step only needs the input gradient of a fixed linear
//! combination of logits.
//!
//! Flipped-label (FL) and a sign-gradient loss-ascent (DGM) generator are
//! included as baselines.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledExample;
use crate::error::{Error, Result};
use crate::nn::{LogitVector, MlpModel, TensorImage};
use crate::textio;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 0.3;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_POISON_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ASConfig {
    pub supplanter: usize,
    pub lambda: f64,
    pub epsilon: f64,
    /// Total number of sign-gradient updates, the initialization included.
    pub max_iters: usize,
}

impl ASConfig {
    pub fn new(supplanter: usize) -> Self {
        Self {
            supplanter,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    pub fn validate(&self, k_classes: usize) -> Result<()> {
        check_label(self.supplanter, k_classes)?;
        check_step_params(self.lambda, self.epsilon, self.max_iters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OVConfig {
    pub victim: usize,
    pub poison_label: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub poison_fraction: f64,
}

impl OVConfig {
    pub fn new(victim: usize, poison_label: usize) -> Self {
        Self {
            victim,
            poison_label,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            poison_fraction: DEFAULT_POISON_FRACTION,
        }
    }

    pub fn validate(&self, k_classes: usize) -> Result<()> {
        check_label(self.victim, k_classes)?;
        check_label(self.poison_label, k_classes)?;
        if self.victim == self.poison_label {
            return Err(Error::InvalidArgument(format!(
                "poison label must differ from the victim class ({})",
                self.victim
            )));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "poison_fraction must lie in (0, 1], got {}",
                self.poison_fraction
            )));
        }
        check_step_params(self.lambda, self.epsilon, self.max_iters)
    }
}

fn check_label(label: usize, k_classes: usize) -> Result<()> {
    if label >= k_classes {
        return Err(Error::InvalidLabel { label, k_classes });
    }
    Ok(())
}

fn check_step_params(lambda: f64, epsilon: f64, max_iters: usize) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    #[serde(rename = "converged_T")]
    ConvergedT,
    #[serde(rename = "early_stop")]
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the seed in the training set it was drawn from, when known.
    pub seed_index: Option<usize>,
    pub original_label: usize,
    /// Sign-gradient updates reflected in the returned image.
    pub iterations: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonedExample {
    pub image: TensorImage,
    pub assigned_label: usize,
    pub provenance: Provenance,
}

impl PoisonedExample {
    pub fn with_seed_index(mut self, index: usize) -> Self {
        self.provenance.seed_index = Some(index);
        self
    }

    pub fn to_example(&self) -> LabeledExample {
        LabeledExample {
            image: self.image.clone(),
            label: self.assigned_label,
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Clip(x + step * sign(grad))`.
fn signed_step(x: &TensorImage, grad: &[f64], step: f64) -> TensorImage {
    TensorImage::clipped(
        x.pixels()
            .iter()
            .zip(grad)
            .map(|(p, g)| p + step * sign(*g))
            .collect(),
    )
}

/// Break predicate of the generator loops: `true` when the candidate iterate
/// regressed relative to the current one.
type Regressed<'a> = &'a (dyn Fn(&LogitVector, &LogitVector) -> bool + Sync);

/// Runs clipped sign-gradient descent on `sum_k coeffs[k] * f_k(x)`.
///
/// The first update (initialization) is always taken; each later update is
/// kept only if `regressed(current, candidate)` is false, otherwise the
/// current iterate is returned with [`StopReason::EarlyStop`].
fn sign_descent(
    model: &MlpModel,
    start: &TensorImage,
    coeffs: &[f64],
    epsilon: f64,
    max_iters: usize,
    regressed: Regressed<'_>,
) -> Result<(TensorImage, usize, StopReason)> {
    let grad = model.backward_logit_combo(start, coeffs)?;
    let mut current = signed_step(start, &grad, -epsilon);
    let mut current_logits = model.forward(&current)?;
    let mut used = 1;
    while used < max_iters {
        let grad = model.backward_logit_combo(&current, coeffs)?;
        let next = signed_step(&current, &grad, -epsilon);
        if next == current {
            // fixed point: every remaining update reproduces this image
            return Ok((current, max_iters, StopReason::ConvergedT));
        }
        let next_logits = model.forward(&next)?;
        if regressed(&current_logits, &next_logits) {
            return Ok((current, used, StopReason::EarlyStop));
        }
        current = next;
        current_logits = next_logits;
        used += 1;
    }
    Ok((current, used, StopReason::ConvergedT))
}

fn as_coeffs(k_classes: usize, retained: usize, suppressed: usize, lambda: f64) -> Vec<f64> {
    let mut c = vec![0.0; k_classes];
    c[retained] -= 1.0;
    c[suppressed] += lambda;
    c
}

/// Input gradient of the two-class objective `-f_{y_o}(x) + lambda * f_{y_s}(x)`.
pub fn as_attack_grad(
    model: &MlpModel,
    x: &TensorImage,
    original: usize,
    supplanter: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    let k = model.k_classes();
    check_label(original, k)?;
    check_label(supplanter, k)?;
    if original == supplanter {
        return Err(Error::InvalidArgument(
            "seed already belongs to the supplanter class".into(),
        ));
    }
    model.backward_logit_combo(x, &as_coeffs(k, original, supplanter, lambda))
}

/// Value of the two-class objective `-f_o + lambda * f_s`.
pub fn simplified_objective(
    model: &MlpModel,
    x: &TensorImage,
    original: usize,
    supplanter: usize,
    lambda: f64,
) -> Result<f64> {
    let z = model.forward(x)?;
    check_label(original, z.len())?;
    check_label(supplanter, z.len())?;
    Ok(-z.get(original) + lambda * z.get(supplanter))
}

/// Diagnostic value of the full K-class objective with uniform weights:
/// `-f_o + lambda * sum_{k != o} f_k`. Never used as an optimization target.
pub fn full_objective(model: &MlpModel, x: &TensorImage, original: usize, lambda: f64) -> Result<f64> {
    let z = model.forward(x)?;
    check_label(original, z.len())?;
    let others: f64 = z
        .values()
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != original)
        .map(|(_, v)| v)
        .sum();
    Ok(-z.get(original) + lambda * others)
}

/// Retain `retained`, suppress `suppressed`; the shared core of AS and the OV victim branch.
fn retain_and_suppress(
    model: &MlpModel,
    x: &TensorImage,
    retained: usize,
    suppressed: usize,
    lambda: f64,
    epsilon: f64,
    max_iters: usize,
) -> Result<(TensorImage, usize, StopReason)> {
    let coeffs = as_coeffs(model.k_classes(), retained, suppressed, lambda);
    let regressed = move |cur: &LogitVector, next: &LogitVector| {
        next.get(suppressed) > cur.get(suppressed) || next.get(retained) < cur.get(retained)
    };
    sign_descent(model, x, &coeffs, epsilon, max_iters, &regressed)
}

/// All-Supplanter poison from one seed; the result is labeled with the supplanter class.
pub fn craft_as_poison(model: &MlpModel, seed: &LabeledExample, cfg: &ASConfig) -> Result<PoisonedExample> {
    cfg.validate(model.k_classes())?;
    check_label(seed.label, model.k_classes())?;
    if seed.label == cfg.supplanter {
        return Err(Error::InvalidArgument(format!(
            "seed is already labeled with the supplanter class {}",
            cfg.supplanter
        )));
    }
    let (image, iterations, stop_reason) = retain_and_suppress(
        model,
        &seed.image,
        seed.label,
        cfg.supplanter,
        cfg.lambda,
        cfg.epsilon,
        cfg.max_iters,
    )?;
    Ok(PoisonedExample {
        image,
        assigned_label: cfg.supplanter,
        provenance: Provenance {
            seed_index: None,
            original_label: seed.label,
            iterations,
            stop_reason,
        },
    })
}

/// Non-victim branch of Only-Victim: raise the seed's own logit, keep its label.
pub fn reinforce_own_class(
    model: &MlpModel,
    seed: &LabeledExample,
    epsilon: f64,
    max_iters: usize,
) -> Result<PoisonedExample> {
    let k = model.k_classes();
    check_label(seed.label, k)?;
    check_step_params(0.0, epsilon, max_iters)?;
    let own = seed.label;
    let mut coeffs = vec![0.0; k];
    coeffs[own] = -1.0;
    let regressed = move |cur: &LogitVector, next: &LogitVector| next.get(own) < cur.get(own);
    let (image, iterations, stop_reason) =
        sign_descent(model, &seed.image, &coeffs, epsilon, max_iters, &regressed)?;
    Ok(PoisonedExample {
        image,
        assigned_label: own,
        provenance: Provenance {
            seed_index: None,
            original_label: own,
            iterations,
            stop_reason,
        },
    })
}

fn craft_ov_one(model: &MlpModel, seed: &LabeledExample, cfg: &OVConfig) -> Result<PoisonedExample> {
    if seed.label == cfg.victim {
        let (image, iterations, stop_reason) = retain_and_suppress(
            model,
            &seed.image,
            cfg.victim,
            cfg.poison_label,
            cfg.lambda,
            cfg.epsilon,
            cfg.max_iters,
        )?;
        Ok(PoisonedExample {
            image,
            assigned_label: cfg.poison_label,
            provenance: Provenance {
                seed_index: None,
                original_label: seed.label,
                iterations,
                stop_reason,
            },
        })
    } else {
        reinforce_own_class(model, seed, cfg.epsilon, cfg.max_iters)
    }
}

/// Only-Victim poison set. `seeds[k]` holds the seeds drawn from class `k`;
/// every class must contribute the same number. Output is ordered class by class.
pub fn craft_ov_poisonset(
    model: &MlpModel,
    seeds: &[Vec<LabeledExample>],
    cfg: &OVConfig,
) -> Result<Vec<PoisonedExample>> {
    let k = model.k_classes();
    cfg.validate(k)?;
    check_ov_seeds(seeds, k)?;
    let flat: Vec<&LabeledExample> = seeds.iter().flatten().collect();
    flat.par_iter()
        .map(|seed| craft_ov_one(model, seed, cfg))
        .collect()
}

fn check_ov_seeds(seeds: &[Vec<LabeledExample>], k: usize) -> Result<()> {
    if seeds.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected one seed list per class ({k}), got {}",
            seeds.len()
        )));
    }
    let per_class = seeds[0].len();
    if per_class == 0 {
        return Err(Error::InvalidArgument("seed lists must be non-empty".into()));
    }
    for (class, list) in seeds.iter().enumerate() {
        if list.len() != per_class {
            return Err(Error::InvalidArgument(format!(
                "unequal seed counts per class: class 0 has {per_class}, class {class} has {}",
                list.len()
            )));
        }
        if let Some(bad) = list.iter().find(|e| e.label != class) {
            return Err(Error::InvalidArgument(format!(
                "seed list {class} contains an example labeled {}",
                bad.label
            )));
        }
    }
    Ok(())
}

/// Flipped-label baseline: pixels untouched, label replaced.
pub fn flipped_label(seed: &LabeledExample, target_label: usize) -> Result<PoisonedExample> {
    if target_label == seed.label {
        return Err(Error::InvalidArgument(format!(
            "flip target {target_label} equals the seed label"
        )));
    }
    Ok(PoisonedExample {
        image: seed.image.clone(),
        assigned_label: target_label,
        provenance: Provenance {
            seed_index: None,
            original_label: seed.label,
            iterations: 0,
            stop_reason: StopReason::ConvergedT,
        },
    })
}

/// Direct-gradient baseline: `steps` clipped sign-gradient ascent steps on the
/// training loss of the seed's true label, then relabeled `target_label`.
pub fn dgm_poison(
    model: &MlpModel,
    seed: &LabeledExample,
    steps: usize,
    epsilon: f64,
    target_label: usize,
) -> Result<PoisonedExample> {
    let k = model.k_classes();
    check_label(seed.label, k)?;
    check_label(target_label, k)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("DGM needs steps >= 1".into()));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if target_label == seed.label {
        return Err(Error::InvalidArgument(format!(
            "DGM target {target_label} equals the seed label"
        )));
    }
    let mut x = seed.image.clone();
    for _ in 0..steps {
        let g = model.backward(&x, seed.label)?;
        x = signed_step(&x, &g.input_grad, epsilon);
    }
    Ok(PoisonedExample {
        image: x,
        assigned_label: target_label,
        provenance: Provenance {
            seed_index: None,
            original_label: seed.label,
            iterations: steps,
            stop_reason: StopReason::ConvergedT,
        },
    })
}

/// Shannon entropy (natural log) of a probability vector; zero entries contribute 0.
pub fn prediction_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty probability vector".into()));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("probabilities must be finite and >= 0".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

#[derive(Serialize, Deserialize)]
struct PoisonSetFile {
    format_version: u32,
    k_classes: usize,
    role: crate::datasets::DatasetRole,
    examples: Vec<PoisonedExample>,
}

pub fn save_poison_set(path: &Path, k_classes: usize, poisons: &[PoisonedExample]) -> Result<()> {
    textio::write_file(
        path,
        &PoisonSetFile {
            format_version: 1,
            k_classes,
            role: crate::datasets::DatasetRole::Poison,
            examples: poisons.to_vec(),
        },
    )
}

/// Returns `(k_classes, poisons)`.
pub fn load_poison_set(path: &Path) -> Result<(usize, Vec<PoisonedExample>)> {
    let file: PoisonSetFile = textio::read_file(path)?;
    if file.format_version != 1 {
        return Err(Error::format(
            "poison set",
            format!("unsupported format_version {}", file.format_version),
        ));
    }
    if let Some(p) = file.examples.iter().find(|p| p.assigned_label >= file.k_classes) {
        return Err(Error::InvalidLabel {
            label: p.assigned_label,
            k_classes: file.k_classes,
        });
    }
    Ok((file.k_classes, file.examples))
}
