//! Run configuration: one TOML file with `[dataset]`, `[model]`, `[pretrain]`
//! and `[attack]` sections.

use std::path::{Path, PathBuf};

use classpoison::attacks::{DEFAULT_EPSILON, DEFAULT_LAMBDA, DEFAULT_MAX_ITERS, DEFAULT_POISON_FRACTION};
use classpoison::harness::{ASExperiment, AsMethod, OVExperiment, OvMethod};
use classpoison::{ASConfig, LrSchedule, OVConfig};
use serde::{Deserialize, Serialize};

/// A configuration problem, reported with exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        k_classes: usize,
        dim: usize,
        n_per_class: usize,
        center_separation: f64,
        noise_sigma: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "one")]
    pub decay_factor: f64,
    #[serde(default = "one_u64")]
    pub decay_every: u64,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    As,
    Ov,
    Fl,
    Dgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    As,
    Ov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub mode: Mode,
    /// Experiment shape for the `fl` and `dgm` baselines.
    pub scenario: Option<Scenario>,
    pub supplanter: Option<usize>,
    pub victim: Option<usize>,
    pub poison_label: Option<usize>,
    /// Label assigned by the `fl` / `dgm` baselines.
    pub target: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "one_usize")]
    pub poisons_per_iteration: usize,
    #[serde(default = "default_fine_tune")]
    pub fine_tune_steps: usize,
    pub lr_override: Option<f64>,
    #[serde(default)]
    pub clean_per_iteration: usize,
    #[serde(default = "default_fraction")]
    pub poison_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub clean_replay: bool,
    #[serde(default = "default_dgm_steps")]
    pub dgm_steps: usize,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}
fn default_iterations() -> usize {
    50
}
fn one_usize() -> usize {
    1
}
fn default_fine_tune() -> usize {
    5
}
fn default_fraction() -> f64 {
    DEFAULT_POISON_FRACTION
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    16
}
fn yes() -> bool {
    true
}
fn default_dgm_steps() -> usize {
    10
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// The experiment an `[attack]` section resolves to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Experiment {
    As(ASExperiment),
    Ov(OVExperiment),
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_default();
            ConfigError::new(key, e.to_string().trim().to_string())
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(dir) = &mut self.output.dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    /// Number of classes, when it is known without reading data files.
    pub fn declared_k(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Blobs { k_classes, .. } => Some(*k_classes),
            DatasetConfig::Idx { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match &self.dataset {
            DatasetConfig::Blobs {
                k_classes,
                dim,
                n_per_class,
                noise_sigma,
                train_fraction,
                ..
            } => {
                if *k_classes < 2 {
                    return Err(ConfigError::new("dataset.k_classes", "must be >= 2"));
                }
                if *dim == 0 {
                    return Err(ConfigError::new("dataset.dim", "must be >= 1"));
                }
                if *n_per_class == 0 {
                    return Err(ConfigError::new("dataset.n_per_class", "must be >= 1"));
                }
                if !(*noise_sigma >= 0.0) {
                    return Err(ConfigError::new("dataset.noise_sigma", "must be >= 0"));
                }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(ConfigError::new("dataset.train_fraction", "must lie in (0, 1)"));
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for (key, p) in [
                    ("dataset.train_images", train_images),
                    ("dataset.train_labels", train_labels),
                    ("dataset.test_images", test_images),
                    ("dataset.test_labels", test_labels),
                ] {
                    if !p.is_file() {
                        return Err(ConfigError::new(key, format!("file not found: {}", p.display())));
                    }
                }
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(ConfigError::new("model.hidden", "layer widths must be >= 1"));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 {
            return Err(ConfigError::new("pretrain.batch_size", "must be >= 1"));
        }
        LrSchedule::new(p.lr, p.decay_factor, p.decay_every)
            .map_err(|e| ConfigError::new("pretrain.lr", e.to_string()))?;
        self.experiment(self.declared_k()).map(|_| ())
    }

    pub fn schedule(&self) -> LrSchedule {
        let p = &self.pretrain;
        LrSchedule::new(p.lr, p.decay_factor, p.decay_every).expect("validated at parse time")
    }

    /// Resolves the `[attack]` section. Label ranges are checked when `k` is known.
    pub fn experiment(&self, k: Option<usize>) -> Result<Experiment, ConfigError> {
        let a = &self.attack;
        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| ConfigError::new(format!("attack.{key}"), format!("required for mode {:?}", a.mode)))
        };
        let in_range = |v: usize, key: &str| match k {
            Some(k) if v >= k => Err(ConfigError::new(
                format!("attack.{key}"),
                format!("label {v} out of range for {k} classes"),
            )),
            _ => Ok(v),
        };
        if a.iterations == 0 {
            return Err(ConfigError::new("attack.iterations", "must be >= 1"));
        }
        if a.batch_size == 0 {
            return Err(ConfigError::new("attack.batch_size", "must be >= 1"));
        }
        if !(a.epsilon > 0.0) {
            return Err(ConfigError::new("attack.epsilon", "must be > 0"));
        }
        if !(a.lambda >= 0.0) {
            return Err(ConfigError::new("attack.lambda", "must be >= 0"));
        }
        if a.max_iters == 0 {
            return Err(ConfigError::new("attack.max_iters", "must be >= 1"));
        }
        if matches!(a.mode, Mode::Dgm) && a.dgm_steps == 0 {
            return Err(ConfigError::new("attack.dgm_steps", "must be >= 1"));
        }
        if let Some(lr) = a.lr_override {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(ConfigError::new("attack.lr_override", "must be >= 0"));
            }
        }
        if !(a.poison_fraction > 0.0 && a.poison_fraction <= 1.0) {
            return Err(ConfigError::new("attack.poison_fraction", "must lie in (0, 1]"));
        }
        let scenario = match a.mode {
            Mode::As => Scenario::As,
            Mode::Ov => Scenario::Ov,
            Mode::Fl | Mode::Dgm => a.scenario.unwrap_or(Scenario::As),
        };
        let baseline = matches!(a.mode, Mode::Fl | Mode::Dgm);
        match scenario {
            Scenario::As => {
                let label = if baseline {
                    in_range(need(a.target, "target")?, "target")?
                } else {
                    in_range(need(a.supplanter, "supplanter")?, "supplanter")?
                };
                let method = match a.mode {
                    Mode::Fl => AsMethod::FlippedLabel,
                    Mode::Dgm => AsMethod::Dgm { steps: a.dgm_steps },
                    _ => AsMethod::AllSupplanter,
                };
                Ok(Experiment::As(ASExperiment {
                    attack: ASConfig {
                        supplanter: label,
                        lambda: a.lambda,
                        epsilon: a.epsilon,
                        max_iters: a.max_iters,
                    },
                    method,
                    attack_iterations: a.iterations,
                    poisons_per_iteration: a.poisons_per_iteration,
                    fine_tune_steps_per_poison: a.fine_tune_steps,
                    lr_override: a.lr_override,
                    clean_per_iteration: a.clean_per_iteration,
                }))
            }
            Scenario::Ov => {
                let victim = in_range(need(a.victim, "victim")?, "victim")?;
                let (key, label) = if baseline {
                    ("target", need(a.target, "target")?)
                } else {
                    ("poison_label", need(a.poison_label, "poison_label")?)
                };
                let label = in_range(label, key)?;
                if label == victim {
                    return Err(ConfigError::new(
                        format!("attack.{key}"),
                        format!("must differ from attack.victim ({victim})"),
                    ));
                }
                let method = match a.mode {
                    Mode::Fl => OvMethod::FlippedLabel,
                    Mode::Dgm => OvMethod::Dgm { steps: a.dgm_steps },
                    _ => OvMethod::OnlyVictim,
                };
                Ok(Experiment::Ov(OVExperiment {
                    attack: OVConfig {
                        victim,
                        poison_label: label,
                        lambda: a.lambda,
                        epsilon: a.epsilon,
                        max_iters: a.max_iters,
                        poison_fraction: a.poison_fraction,
                    },
                    method,
                    epochs: a.epochs,
                    clean_replay: a.clean_replay,
                    batch_size: a.batch_size,
                    lr_override: a.lr_override,
                }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = r#"
[dataset]
kind = "blobs"
k_classes = 4
dim = 8
n_per_class = 50
center_separation = 0.5
noise_sigma = 0.05

[model]
hidden = [16]

[pretrain]
epochs = 5
batch_size = 16
lr = 0.1

[attack]
mode = "as"
supplanter = 0
"#;

    fn with_attack(attack: &str) -> String {
        let head = BLOBS.split("[attack]").next().unwrap();
        format!("{head}[attack]\n{attack}\n")
    }

    #[test]
    fn parses_defaults() {
        let cfg = RunConfig::parse(BLOBS, Path::new(".")).unwrap();
        match cfg.experiment(Some(4)).unwrap() {
            Experiment::As(e) => {
                assert_eq!(e.attack_iterations, 50);
                assert_eq!(e.fine_tune_steps_per_poison, 5);
                assert_eq!(e.attack.epsilon, 0.3);
            }
            Experiment::Ov(_) => panic!("expected AS"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = BLOBS.replace("supplanter = 0", "");
        let err = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(err.key, "attack.supplanter");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BLOBS.replace("supplanter = 0", "supplanter = 0\nepsilom = 0.2");
        let err = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("epsilom"), "{err}");
    }

    #[test]
    fn baseline_target_must_differ_from_victim() {
        let text = with_attack("mode = \"fl\"\nscenario = \"ov\"\nvictim = 1\ntarget = 1");
        let err = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(err.key, "attack.target");
    }

    #[test]
    fn labels_checked_against_class_count() {
        let text = BLOBS.replace("supplanter = 0", "supplanter = 4");
        let err = RunConfig::parse(&text, Path::new(".")).unwrap_err();
        assert_eq!(err.key, "attack.supplanter");
    }

    #[test]
    fn missing_idx_file_is_named() {
        let text = r#"
[dataset]
kind = "idx"
train_images = "nope/train-images"
train_labels = "nope/train-labels"
test_images = "nope/test-images"
test_labels = "nope/test-labels"

[model]
hidden = [8]

[pretrain]
epochs = 1
batch_size = 8
lr = 0.1

[attack]
mode = "as"
supplanter = 0
"#;
        let err = RunConfig::parse(text, Path::new("/nonexistent")).unwrap_err();
        assert_eq!(err.key, "dataset.train_images");
    }
}
