//! Class-level evaluation of a poisoning episode.
//!
//! All rates compare two [`PredictionSnapshot`]s over the same test set: one
//! from the model before the attack and one after it.
//!
//! * `CTT(C_k)`: share of class-`k` test images newly predicted as the target
//!   (supplanter) class.
//! * overall CTT: `N_k`-weighted mean of `CTT(C_k)` over every class except the
//!   target.
//! * `CFT(C_k)`: drop in the share of class-`k` test images predicted as `k`.
//!   Negative values mean the class improved.
//!
//! A class with no test images has no defined rate; such entries are `None`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::textio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Before,
    After,
}

/// Predicted labels for every test example under one fixed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSnapshot {
    pub phase: Phase,
    pub k_classes: usize,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl PredictionSnapshot {
    pub fn new(phase: Phase, k_classes: usize, truth: Vec<usize>, predicted: Vec<usize>) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if let Some(&bad) = truth.iter().chain(&predicted).find(|&&l| l >= k_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                k_classes,
            });
        }
        Ok(Self {
            phase,
            k_classes,
            truth,
            predicted,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.k_classes];
        for &t in &self.truth {
            n[t] += 1;
        }
        n
    }

    /// Number of class-`class` examples predicted as `as_label`.
    fn count(&self, class: usize, as_label: usize) -> usize {
        self.truth
            .iter()
            .zip(&self.predicted)
            .filter(|(&t, &p)| t == class && p == as_label)
            .count()
    }
}

/// Argmax predictions for every example; evaluated in parallel against the read-only model.
pub fn predict_all(model: &MlpModel, test: &Dataset, phase: Phase) -> Result<PredictionSnapshot> {
    if test.k_classes() != model.k_classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model outputs {}",
            test.k_classes(),
            model.k_classes()
        )));
    }
    let predicted = test
        .examples()
        .par_iter()
        .map(|e| model.predict(&e.image))
        .collect::<Result<Vec<_>>>()?;
    PredictionSnapshot::new(phase, test.k_classes(), test.labels(), predicted)
}

fn check_pair(before: &PredictionSnapshot, after: &PredictionSnapshot) -> Result<()> {
    if before.truth != after.truth || before.k_classes != after.k_classes {
        return Err(Error::InvalidArgument(
            "snapshots were taken over different test sets".into(),
        ));
    }
    Ok(())
}

fn check_class(class: usize, k: usize) -> Result<()> {
    if class >= k {
        return Err(Error::InvalidLabel {
            label: class,
            k_classes: k,
        });
    }
    Ok(())
}

pub fn ctt_per_class(
    before: &PredictionSnapshot,
    after: &PredictionSnapshot,
    class: usize,
    target: usize,
) -> Result<Option<f64>> {
    check_pair(before, after)?;
    check_class(class, before.k_classes)?;
    check_class(target, before.k_classes)?;
    let n = before.class_counts()[class];
    if n == 0 {
        return Ok(None);
    }
    let diff = after.count(class, target) as f64 - before.count(class, target) as f64;
    Ok(Some(diff / n as f64))
}

pub fn ctt_overall(before: &PredictionSnapshot, after: &PredictionSnapshot, target: usize) -> Result<Option<f64>> {
    check_pair(before, after)?;
    check_class(target, before.k_classes)?;
    // N_k-weighted mean of the per-class rates, summed as integer counts
    let counts = before.class_counts();
    let mut diff = 0i64;
    let mut total = 0usize;
    for k in (0..before.k_classes).filter(|&k| k != target) {
        diff += after.count(k, target) as i64 - before.count(k, target) as i64;
        total += counts[k];
    }
    Ok((total > 0).then(|| diff as f64 / total as f64))
}

pub fn cft_per_class(before: &PredictionSnapshot, after: &PredictionSnapshot, class: usize) -> Result<Option<f64>> {
    check_pair(before, after)?;
    check_class(class, before.k_classes)?;
    let n = before.class_counts()[class];
    if n == 0 {
        return Ok(None);
    }
    let diff = before.count(class, class) as f64 - after.count(class, class) as f64;
    Ok(Some(diff / n as f64))
}

/// Fraction of predictions equal to the ground truth (0 for an empty snapshot).
pub fn accuracy(snapshot: &PredictionSnapshot) -> f64 {
    if snapshot.is_empty() {
        return 0.0;
    }
    let correct = snapshot
        .truth
        .iter()
        .zip(&snapshot.predicted)
        .filter(|(t, p)| t == p)
        .count();
    correct as f64 / snapshot.len() as f64
}

pub fn error_rate(snapshot: &PredictionSnapshot) -> f64 {
    1.0 - accuracy(snapshot)
}

pub fn class_accuracy(snapshot: &PredictionSnapshot, class: usize) -> Option<f64> {
    let n = snapshot.class_counts().get(class).copied().unwrap_or(0);
    (n > 0).then(|| snapshot.count(class, class) as f64 / n as f64)
}

/// Share of examples whose true label is among the `m` highest logits.
pub fn top_m_accuracy(model: &MlpModel, test: &Dataset, m: usize) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let hits = test
        .examples()
        .par_iter()
        .map(|e| Ok(model.forward(&e.image)?.ranked().iter().take(m).any(|&k| k == e.label)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub n: usize,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    pub ctt: Option<f64>,
    pub cft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallReport {
    pub n: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub error_before: f64,
    pub error_after: f64,
    pub ctt: Option<f64>,
}

/// Per-class and overall rates for one before/after pair. CTT entries are
/// only present when a target class is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_classes: usize,
    pub target: Option<usize>,
    pub classes: Vec<ClassReport>,
    pub overall: OverallReport,
}

pub const REPORT_CSV_HEADER: [&str; 6] = ["class", "N", "acc_before", "acc_after", "ctt", "cft"];

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn from_snapshots(
        before: &PredictionSnapshot,
        after: &PredictionSnapshot,
        target: Option<usize>,
    ) -> Result<Self> {
        check_pair(before, after)?;
        let counts = before.class_counts();
        let classes = (0..before.k_classes)
            .map(|k| {
                Ok(ClassReport {
                    class: k,
                    n: counts[k],
                    acc_before: class_accuracy(before, k),
                    acc_after: class_accuracy(after, k),
                    ctt: match target {
                        Some(t) => ctt_per_class(before, after, k, t)?,
                        None => None,
                    },
                    cft: cft_per_class(before, after, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let overall = OverallReport {
            n: before.len(),
            acc_before: accuracy(before),
            acc_after: accuracy(after),
            error_before: error_rate(before),
            error_after: error_rate(after),
            ctt: match target {
                Some(t) => ctt_overall(before, after, t)?,
                None => None,
            },
        };
        Ok(Self {
            k_classes: before.k_classes,
            target,
            classes,
            overall,
        })
    }

    /// CSV with one row per class and a final `overall` row.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_HEADER)?;
        for c in &self.classes {
            w.write_record([
                c.class.to_string(),
                c.n.to_string(),
                opt_cell(c.acc_before),
                opt_cell(c.acc_after),
                opt_cell(c.ctt),
                opt_cell(c.cft),
            ])?;
        }
        w.write_record([
            "overall".to_string(),
            self.overall.n.to_string(),
            self.overall.acc_before.to_string(),
            self.overall.acc_after.to_string(),
            opt_cell(self.overall.ctt),
            String::new(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::format("report csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv_string()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        textio::write_file(path, self)
    }

    pub fn read_summary(path: &Path) -> Result<Self> {
        textio::read_file(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(phase: Phase, k: usize, truth: &[usize], predicted: &[usize]) -> PredictionSnapshot {
        PredictionSnapshot::new(phase, k, truth.to_vec(), predicted.to_vec()).unwrap()
    }

    #[test]
    fn identical_snapshots_give_zero_rates() {
        let s = snap(Phase::Before, 3, &[0, 1, 2, 2], &[0, 2, 2, 1]);
        for k in 0..3 {
            assert_eq!(ctt_per_class(&s, &s, k, 2).unwrap(), Some(0.0));
            assert_eq!(cft_per_class(&s, &s, k).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn ctt_hand_counts() {
        // class 0 has 10 images; 1 predicted as target 1 before, 6 after
        let truth = vec![0; 10];
        let mut before = vec![0; 10];
        before[0] = 1;
        let mut after = vec![0; 10];
        after[..6].fill(1);
        let b = snap(Phase::Before, 2, &truth, &before);
        let a = snap(Phase::After, 2, &truth, &after);
        assert_eq!(ctt_per_class(&b, &a, 0, 1).unwrap(), Some(0.5));
        assert_eq!(ctt_per_class(&a, &b, 0, 1).unwrap(), Some(-0.5));
    }

    #[test]
    fn ctt_overall_weighted_mean() {
        // classes 0 and 1 (N = 10 each) plus target 2; CTT 0.2 and 0.4
        let mut truth = vec![0; 10];
        truth.extend(vec![1; 10]);
        truth.push(2);
        let before: Vec<usize> = truth.clone();
        let mut after = truth.clone();
        after[..2].fill(2);
        after[10..14].fill(2);
        let b = snap(Phase::Before, 3, &truth, &before);
        let a = snap(Phase::After, 3, &truth, &after);
        let overall = ctt_overall(&b, &a, 2).unwrap().unwrap();
        assert!((overall - 0.3).abs() < 1e-15);

        // N = (10, 30)
        let mut truth = vec![0; 10];
        truth.extend(vec![1; 30]);
        let mut after = truth.clone();
        after[..2].fill(2);
        after[10..22].fill(2);
        let b = snap(Phase::Before, 3, &truth, &truth);
        let a = snap(Phase::After, 3, &truth, &after);
        assert!((ctt_overall(&b, &a, 2).unwrap().unwrap() - 0.35).abs() < 1e-15);
    }

    #[test]
    fn ctt_overall_absent_when_only_target_class_present() {
        let s = snap(Phase::Before, 2, &[1, 1], &[1, 0]);
        assert_eq!(ctt_overall(&s, &s, 1).unwrap(), None);
        assert_eq!(ctt_per_class(&s, &s, 0, 1).unwrap(), None);
        assert_eq!(cft_per_class(&s, &s, 0).unwrap(), None);
    }

    #[test]
    fn cft_hand_counts() {
        let truth = vec![0; 20];
        let mut before = vec![1; 20];
        before[..18].fill(0);
        let mut after = vec![1; 20];
        after[..4].fill(0);
        let b = snap(Phase::Before, 2, &truth, &before);
        let a = snap(Phase::After, 2, &truth, &after);
        assert!((cft_per_class(&b, &a, 0).unwrap().unwrap() - 0.7).abs() < 1e-15);

        let mut before = vec![1; 20];
        before[..15].fill(0);
        let mut after = vec![1; 20];
        after[..17].fill(0);
        let b = snap(Phase::Before, 2, &truth, &before);
        let a = snap(Phase::After, 2, &truth, &after);
        assert!((cft_per_class(&b, &a, 0).unwrap().unwrap() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&snap(Phase::After, 2, &[0, 1], &[0, 1])), 1.0);
        assert_eq!(accuracy(&snap(Phase::After, 2, &[0, 1], &[1, 0])), 0.0);
        let truth = [0usize; 10];
        let mut pred = [1usize; 10];
        pred[..7].fill(0);
        assert!((accuracy(&snap(Phase::After, 2, &truth, &pred)) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mismatched_snapshots_are_rejected() {
        let a = snap(Phase::Before, 2, &[0, 1], &[0, 1]);
        let b = snap(Phase::After, 2, &[1, 1], &[0, 1]);
        assert!(ctt_per_class(&a, &b, 0, 1).is_err());
        assert!(PredictionSnapshot::new(Phase::After, 2, vec![0], vec![]).is_err());
        assert!(PredictionSnapshot::new(Phase::After, 2, vec![0], vec![2]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let b = snap(Phase::Before, 3, &[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]);
        let a = snap(Phase::After, 3, &[0, 0, 1, 1, 2], &[2, 0, 2, 2, 2]);
        let r = EvalReport::from_snapshots(&b, &a, Some(2)).unwrap();
        let text = r.to_csv_string().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,N,acc_before,acc_after,ctt,cft");
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert_eq!(lines[1], "0,2,1,0.5,0.5,0.5");
        assert!(lines[4].starts_with("overall,5,1,"));
        assert_eq!(r.overall.ctt, Some(0.75));
    }
}
