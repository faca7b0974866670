//! Assignment accuracy, pair precision/recall and baseline comparison tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{OwnershipPrediction, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction {index} refers to unknown scene '{image_id}'")]
    UnknownScene { index: usize, image_id: String },
    #[error("scene '{0}' has more than one prediction")]
    DuplicatePrediction(String),
    #[error("split mismatch: baseline has {baseline:?}, model has {model:?}")]
    SplitMismatch { baseline: Vec<String>, model: Vec<String> },
}

/// Mistakes made on one scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneErrors {
    pub image_id: String,
    /// `(wheel, predicted vehicle, true vehicle)`.
    pub wrong: Vec<(u32, u32, u32)>,
    pub unassigned: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub scenes: usize,
    pub labeled_wheels: usize,
    pub correct: usize,
    pub wrong: usize,
    pub unassigned: usize,
    pub assignment_accuracy: f64,
    pub predicted_pairs: usize,
    pub true_pairs: usize,
    pub matched_pairs: usize,
    pub pair_precision: f64,
    pub pair_recall: f64,
    pub errors: Vec<SceneErrors>,
}

impl SplitReport {
    /// `correct + wrong + unassigned == labeled_wheels` and every rate in [0, 1].
    pub fn reconciles(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        self.correct + self.wrong + self.unassigned == self.labeled_wheels
            && unit(self.assignment_accuracy)
            && unit(self.pair_precision)
            && unit(self.pair_recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores one split. Predictions are matched to scenes by image id; a scene
/// without a prediction counts as fully unassigned.
pub fn score_split(scenes: &[Scene], predictions: &[OwnershipPrediction]) -> Result<SplitReport, EvalError> {
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.image_id.as_str(), i)).collect();
    let mut by_scene: Vec<Option<&OwnershipPrediction>> = vec![None; scenes.len()];
    for (k, p) in predictions.iter().enumerate() {
        let Some(&i) = index.get(p.image_id.as_str()) else {
            return Err(EvalError::UnknownScene { index: k, image_id: p.image_id.clone() });
        };
        if by_scene[i].replace(p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.image_id.clone()));
        }
    }

    let mut r = SplitReport { scenes: scenes.len(), ..SplitReport::default() };
    for (scene, pred) in scenes.iter().zip(by_scene) {
        let truth = scene.owner_map();
        let mut errs = SceneErrors { image_id: scene.image_id.clone(), ..SceneErrors::default() };
        let empty = BTreeMap::new();
        let assigned = pred.map_or(&empty, |p| &p.assignments);
        for (&w, &v) in &truth {
            r.labeled_wheels += 1;
            match assigned.get(&w) {
                Some(&pv) if pv == v => r.correct += 1,
                Some(&pv) => {
                    r.wrong += 1;
                    errs.wrong.push((w, pv, v));
                }
                None => {
                    r.unassigned += 1;
                    errs.unassigned.push(w);
                }
            }
        }
        let true_pairs: BTreeSet<(u32, u32)> = scene.relations.iter().copied().collect();
        let predicted: BTreeSet<(u32, u32)> = pred.map_or_else(BTreeSet::new, |p| p.pairs.iter().map(|&(v, w, _)| (v, w)).collect());
        r.true_pairs += true_pairs.len();
        r.predicted_pairs += predicted.len();
        r.matched_pairs += predicted.intersection(&true_pairs).count();
        if !(errs.wrong.is_empty() && errs.unassigned.is_empty()) {
            r.errors.push(errs);
        }
    }
    r.assignment_accuracy = ratio(r.correct, r.labeled_wheels);
    r.pair_precision = ratio(r.matched_pairs, r.predicted_pairs);
    r.pair_recall = ratio(r.matched_pairs, r.true_pairs);
    Ok(r)
}

/// Reports keyed by split name (`easy`, `hard`, `mixed`, ...).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: BTreeMap<String, SplitReport>,
}

impl EvalReport {
    pub fn single(split: &str, report: SplitReport) -> Self {
        EvalReport { splits: BTreeMap::from([(split.to_string(), report)]) }
    }

    /// Merges splits of `other` into `self`, replacing equal names.
    pub fn merge(&mut self, other: EvalReport) {
        self.splits.extend(other.splits);
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>7} {:>8} {:>8} {:>7} {:>10} {:>10} {:>10}\n",
            "split", "scenes", "wheels", "correct", "wrong", "accuracy", "precision", "recall"
        );
        for (name, r) in &self.splits {
            out += &format!(
                "{:<8} {:>7} {:>8} {:>8} {:>7} {:>9.2}% {:>9.2}% {:>9.2}%\n",
                name,
                r.scenes,
                r.labeled_wheels,
                r.correct,
                r.wrong,
                100.0 * r.assignment_accuracy,
                100.0 * r.pair_precision,
                100.0 * r.pair_recall
            );
        }
        out
    }
}

/// Scores a list of scenes and predictions as one split.
pub fn score_predictions(
    split: &str,
    scenes: &[Scene],
    predictions: &[OwnershipPrediction],
) -> Result<EvalReport, EvalError> {
    Ok(EvalReport::single(split, score_split(scenes, predictions)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub split: String,
    pub baseline: f64,
    pub model: f64,
    /// `(model - baseline)` in percentage points.
    pub delta_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, split: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8} {:>10} {:>10} {:>10}\n", "split", "baseline", "model", "delta");
        for r in &self.rows {
            out += &format!(
                "{:<8} {:>9.2}% {:>9.2}% {:>+10.2}\n",
                r.split,
                100.0 * r.baseline,
                100.0 * r.model,
                r.delta_points
            );
        }
        out
    }
}

/// Side-by-side assignment accuracies over identical split sets.
pub fn compare(baseline: &EvalReport, model: &EvalReport) -> Result<Comparison, EvalError> {
    let names = |r: &EvalReport| r.splits.keys().cloned().collect::<Vec<_>>();
    if names(baseline) != names(model) {
        return Err(EvalError::SplitMismatch { baseline: names(baseline), model: names(model) });
    }
    let rows = baseline
        .splits
        .iter()
        .map(|(split, b)| {
            let m = &model.splits[split];
            ComparisonRow {
                split: split.clone(),
                baseline: b.assignment_accuracy,
                model: m.assignment_accuracy,
                delta_points: 100.0 * (m.assignment_accuracy - b.assignment_accuracy),
            }
        })
        .collect();
    Ok(Comparison { rows })
}
