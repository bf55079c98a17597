//! 2AFC scoring, the category-by-condition evaluation matrix, distance
//! histograms and the robust-accuracy table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_2afc_triplet, opt_attack, AttackSpec, AttackTarget, Norm, OPT_EPSILON};
use crate::checkpoint::write_atomic;
use crate::datasets::{Category, TwoAFCTriplet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metric::MetricModel;
use crate::perceptual::{
    clean_accuracy, robust_accuracy, Classifier, ExampleOutcome, PerceptualAttackKind,
    PerceptualAttackSpec,
};

/// Distances closer than this count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Credit for one triplet: `1 - h` when the metric prefers `x0`, `h` when
/// it prefers `x1`, and 0.5 on a tie.
pub fn two_afc_credit(d0: f64, d1: f64, h: f64) -> f64 {
    if (d0 - d1).abs() <= TIE_TOLERANCE {
        0.5
    } else if d0 < d1 {
        1.0 - h
    } else {
        h
    }
}

/// An attacked evaluation condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCondition {
    pub target: AttackTarget,
    pub spec: AttackSpec,
}

impl AttackCondition {
    pub fn label(&self) -> String {
        let norm = match self.spec.norm {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        };
        format!("{norm}/{}", self.target.label())
    }
}

/// Which cells an evaluation must produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRequest {
    /// Categories to report; empty means every category present in the data.
    pub categories: Vec<Category>,
    pub clean: bool,
    pub attacks: Vec<AttackCondition>,
}

impl Default for EvalRequest {
    fn default() -> Self {
        Self {
            categories: Vec::new(),
            clean: true,
            attacks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub category: Category,
    /// `clean` or `<norm>/<target>`.
    pub condition: String,
    pub epsilon: Option<f64>,
    pub triplets: usize,
    /// Mean credit x100; `None` when the category has no triplets.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoint: Option<String>,
    pub flavor: Option<String>,
    pub seed: u64,
    /// Set by callers that want one; omitted from determinism comparisons.
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub request: EvalRequest,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn cell(&self, category: Category, condition: &str) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.category == category && c.condition == condition)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,condition,epsilon,triplets,score\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.category,
                c.condition,
                c.epsilon.map(|e| e.to_string()).unwrap_or_default(),
                c.triplets,
                c.score.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Scores `data` under every requested condition. Under an attack, triplet
/// `i` is perturbed with seed `spec.seed ^ i` before scoring.
pub fn eval_2afc(
    model: &MetricModel,
    data: &[TwoAFCTriplet],
    request: &EvalRequest,
    metadata: ReportMetadata,
) -> Result<EvalReport> {
    for a in &request.attacks {
        a.spec.validate()?;
    }
    let categories: Vec<Category> = if request.categories.is_empty() {
        let mut c: Vec<Category> = data.iter().map(|t| t.category).collect();
        c.sort();
        c.dedup();
        c
    } else {
        request.categories.clone()
    };
    let mut conditions: Vec<(String, Option<&AttackCondition>)> = Vec::new();
    if request.clean {
        conditions.push(("clean".into(), None));
    }
    conditions.extend(request.attacks.iter().map(|a| (a.label(), Some(a))));

    let mut sums: BTreeMap<(usize, Category), (f64, usize)> = BTreeMap::new();
    for (i, t) in data.iter().enumerate() {
        if !categories.contains(&t.category) {
            continue;
        }
        for (ci, (_, cond)) in conditions.iter().enumerate() {
            let scored = match cond {
                None => t.clone(),
                Some(a) => {
                    let spec = a.spec.clone().with_seed(a.spec.seed ^ i as u64);
                    attack_2afc_triplet(model, t, a.target, &spec)?.0
                }
            };
            let d0 = model.distance(&scored.x, &scored.x0)?;
            let d1 = model.distance(&scored.x, &scored.x1)?;
            let e = sums.entry((ci, t.category)).or_insert((0.0, 0));
            e.0 += two_afc_credit(d0, d1, scored.h);
            e.1 += 1;
        }
    }
    let mut cells = Vec::new();
    for &category in &categories {
        for (ci, (label, cond)) in conditions.iter().enumerate() {
            let (sum, n) = sums.get(&(ci, category)).copied().unwrap_or((0.0, 0));
            cells.push(EvalCell {
                category,
                condition: label.clone(),
                epsilon: cond.map(|a| a.spec.epsilon),
                triplets: n,
                score: (n > 0).then(|| 100.0 * sum / n as f64),
            });
        }
    }
    Ok(EvalReport {
        cells,
        request: request.clone(),
        metadata,
    })
}

pub const HISTOGRAM_BINS: usize = 64;
pub const PERCEPTIBILITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub median: f64,
    pub fraction_above_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    /// `HISTOGRAM_BINS + 1` edges shared by both histograms.
    pub bin_edges: Vec<f64>,
    pub threshold: f64,
    pub natural: Histogram,
    pub robust: Histogram,
    /// `(natural, robust)` distance of every crafted example.
    pub distances: Vec<(f64, f64)>,
    pub metadata: ReportMetadata,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn histogram(values: &[f64], edges: &[f64], threshold: f64) -> Histogram {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Histogram {
        counts,
        median: median(values),
        fraction_above_threshold: values.iter().filter(|&&v| v > threshold).count() as f64
            / values.len() as f64,
    }
}

/// Crafts one adversarial image per input with `craft(index, image)` and
/// records both metrics' distance to the clean image.
pub fn distance_histogram(
    natural: &MetricModel,
    robust: &MetricModel,
    images: &[Image],
    craft: &dyn Fn(usize, &Image) -> Result<Image>,
    metadata: ReportMetadata,
) -> Result<HistogramReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("histogram needs at least one image".into()));
    }
    let mut distances = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        let adv = craft(i, x)?;
        distances.push((natural.distance(x, &adv)?, robust.distance(x, &adv)?));
    }
    let max = distances
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .fold(0.0, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let bin_edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|k| hi * k as f64 / HISTOGRAM_BINS as f64)
        .collect();
    let nat: Vec<f64> = distances.iter().map(|d| d.0).collect();
    let rob: Vec<f64> = distances.iter().map(|d| d.1).collect();
    Ok(HistogramReport {
        natural: histogram(&nat, &bin_edges, PERCEPTIBILITY_THRESHOLD),
        robust: histogram(&rob, &bin_edges, PERCEPTIBILITY_THRESHOLD),
        bin_edges,
        threshold: PERCEPTIBILITY_THRESHOLD,
        distances,
        metadata,
    })
}

/// Default crafting: feature-distortion attack against `natural` with
/// radius 0.05, image `i` seeded with `seed ^ i`.
pub fn opt_crafter(natural: &MetricModel, spec: AttackSpec) -> impl Fn(usize, &Image) -> Result<Image> + '_ {
    move |i, x| {
        let s = spec.clone().with_seed(spec.seed ^ i as u64);
        Ok(opt_attack(natural, x, &s)?.adversarial.remove(0))
    }
}

pub fn default_opt_spec() -> AttackSpec {
    AttackSpec::linf(OPT_EPSILON)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustCell {
    pub attack: PerceptualAttackKind,
    /// Flavor of the metric bounding the attack.
    pub metric: String,
    pub accuracy: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracyReport {
    pub clean_accuracy: f64,
    pub epsilon: f64,
    pub cells: Vec<RobustCell>,
    #[serde(skip)]
    pub outcomes: Vec<(String, Vec<ExampleOutcome>)>,
    pub metadata: ReportMetadata,
}

impl RobustAccuracyReport {
    pub fn cell(&self, attack: PerceptualAttackKind, metric: &str) -> Option<&RobustCell> {
        self.cells.iter().find(|c| c.attack == attack && c.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,metric,epsilon,accuracy,evaluated\n");
        out.push_str(&format!("none,none,0,{},{}\n", self.clean_accuracy, self.cells.first().map_or(0, |c| c.evaluated)));
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.attack.label(),
                c.metric,
                self.epsilon,
                c.accuracy,
                c.evaluated
            ));
        }
        out
    }

    /// One JSON object per line, tagged with its cell.
    pub fn outcomes_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (cell, rows) in &self.outcomes {
            for r in rows {
                let mut v = serde_json::to_value(r)?;
                v["cell"] = serde_json::Value::String(cell.clone());
                out.push_str(&serde_json::to_string(&v)?);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// The {PPGD, LPA} x {natural, robust} robust-accuracy matrix plus clean accuracy.
pub fn robust_accuracy_report(
    classifier: &dyn Classifier,
    natural: &MetricModel,
    robust: &MetricModel,
    data: &[(Image, usize)],
    spec: &PerceptualAttackSpec,
    metadata: ReportMetadata,
) -> Result<RobustAccuracyReport> {
    let mut cells = Vec::new();
    let mut outcomes = Vec::new();
    for kind in [PerceptualAttackKind::Ppgd, PerceptualAttackKind::Lpa] {
        for (name, metric) in [("natural", natural), ("robust", robust)] {
            let r = robust_accuracy(classifier, metric, data, kind, spec)?;
            outcomes.push((format!("{}/{name}", kind.label()), r.outcomes));
            cells.push(RobustCell {
                attack: kind,
                metric: name.into(),
                accuracy: r.accuracy,
                evaluated: r.evaluated,
                skipped: r.skipped,
            });
        }
    }
    Ok(RobustAccuracyReport {
        clean_accuracy: clean_accuracy(classifier, data)?,
        epsilon: spec.epsilon,
        cells,
        outcomes,
        metadata,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn credit_examples() {
        assert_eq!(two_afc_credit(0.1, 0.9, 0.0), 1.0);
        assert_eq!(two_afc_credit(0.9, 0.1, 0.0), 0.0);
        assert_eq!(two_afc_credit(0.3, 0.3, 0.7), 0.5);
        assert_eq!(two_afc_credit(0.3, 0.3 + 1e-13, 0.7), 0.5);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn histogram_counts_sum() {
        let edges: Vec<f64> = (0..=4).map(|k| k as f64 / 4.0).collect();
        let h = histogram(&[0.0, 0.3, 0.6, 1.0, 1.0], &edges, 0.5);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(h.fraction_above_threshold, 0.6);
    }
}
