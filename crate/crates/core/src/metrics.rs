//! Multi-label evaluation: mean average precision over categories and the
//! overall / per-class precision, recall and F1 computed from binarized
//! predictions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub image_ids: Vec<String>,
    /// `(N, C)` scores in [0, 1].
    pub scores: Array2<f64>,
    /// `(N, C)` binary labels.
    pub labels: Array2<u8>,
}

impl PredictionSet {
    pub fn new(image_ids: Vec<String>, scores: Array2<f64>, labels: Array2<u8>) -> Result<Self> {
        if scores.dim() != labels.dim() {
            return Err(Error::shape(
                "prediction set",
                format!("{:?}", scores.dim()),
                format!("{:?}", labels.dim()),
            ));
        }
        if image_ids.len() != scores.nrows() {
            return Err(Error::shape("prediction ids", scores.nrows(), image_ids.len()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        Ok(PredictionSet {
            image_ids,
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn categories(&self) -> usize {
        self.scores.ncols()
    }
}

/// How scores become predicted positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Binarization {
    /// `score >= t`.
    Threshold(f64),
    /// The `k` highest scores of each image (ties to the lower category index).
    TopK(usize),
}

impl Binarization {
    fn apply(&self, scores: ArrayView1<f64>) -> Vec<bool> {
        match *self {
            Binarization::Threshold(t) => scores.iter().map(|&s| s >= t).collect(),
            Binarization::TopK(k) => {
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut out = vec![false; scores.len()];
                for &c in order.iter().take(k) {
                    out[c] = true;
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub threshold: f64,
    /// Also report the counting metrics under top-3-per-image binarization.
    pub top3: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            threshold: 0.5,
            top3: false,
        }
    }
}

/// Returned by [`average_precision`] for a category without positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UndefinedAp;

/// Items ranked by descending score (ties by ascending index); the mean of
/// the precision at the rank of every positive.
pub fn average_precision(
    scores: ArrayView1<f64>,
    labels: ArrayView1<u8>,
) -> std::result::Result<f64, UndefinedAp> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranked_ap(order.iter().map(|&i| labels[i] == 1))
}

fn ranked_ap(ranked: impl Iterator<Item = bool>) -> std::result::Result<f64, UndefinedAp> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, positive) in ranked.enumerate() {
        if positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        Err(UndefinedAp)
    } else {
        Ok(sum / hits as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CountingMetrics {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

/// Per-class counts: true positives, predicted positives, ground-truth positives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub correct: Vec<u64>,
    pub predicted: Vec<u64>,
    pub ground_truth: Vec<u64>,
}

impl ClassCounts {
    pub fn new(categories: usize) -> Self {
        ClassCounts {
            correct: vec![0; categories],
            predicted: vec![0; categories],
            ground_truth: vec![0; categories],
        }
    }

    fn add(&mut self, predicted: &[bool], labels: ArrayView1<u8>) {
        for (c, (&pred, &truth)) in predicted.iter().zip(labels).enumerate() {
            let truth = truth == 1;
            self.predicted[c] += pred as u64;
            self.ground_truth[c] += truth as u64;
            self.correct[c] += (pred && truth) as u64;
        }
    }

    fn merge(&mut self, other: &ClassCounts) {
        for (a, b) in [
            (&mut self.correct, &other.correct),
            (&mut self.predicted, &other.predicted),
            (&mut self.ground_truth, &other.ground_truth),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn summarize(&self, label: &str, names: &[String], warnings: &mut Vec<String>) -> (CountingMetrics, Vec<(f64, f64)>) {
        let c = self.correct.len();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let f1 = |p: f64, r: f64| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };

        let sum_c: u64 = self.correct.iter().sum();
        let sum_p: u64 = self.predicted.iter().sum();
        let sum_g: u64 = self.ground_truth.iter().sum();
        if sum_p == 0 {
            warnings.push(format!("{label}: no positive predictions; OP reported as 0"));
        }
        if sum_g == 0 {
            warnings.push(format!("{label}: no ground-truth positives; OR reported as 0"));
        }
        let mut per_class = Vec::with_capacity(c);
        for i in 0..c {
            let name = names.get(i).map_or_else(|| i.to_string(), Clone::clone);
            if self.predicted[i] == 0 {
                warnings.push(format!("{label}: class `{name}` has no predictions; precision term 0"));
            }
            if self.ground_truth[i] == 0 {
                warnings.push(format!("{label}: class `{name}` has no positives; recall term 0"));
            }
            per_class.push((
                ratio(self.correct[i], self.predicted[i]),
                ratio(self.correct[i], self.ground_truth[i]),
            ));
        }
        let op = ratio(sum_c, sum_p);
        let or = ratio(sum_c, sum_g);
        let (cp, cr) = if c == 0 {
            (0.0, 0.0)
        } else {
            (
                per_class.iter().map(|p| p.0).sum::<f64>() / c as f64,
                per_class.iter().map(|p| p.1).sum::<f64>() / c as f64,
            )
        };
        (
            CountingMetrics {
                op,
                or,
                of1: f1(op, or),
                cp,
                cr,
                cf1: f1(cp, cr),
            },
            per_class,
        )
    }
}

pub fn counting_metrics(preds: &PredictionSet, rule: Binarization) -> (CountingMetrics, Vec<String>) {
    let mut counts = ClassCounts::new(preds.categories());
    for (s, y) in preds.scores.outer_iter().zip(preds.labels.outer_iter()) {
        counts.add(&rule.apply(s), y);
    }
    let mut warnings = Vec::new();
    let (m, _) = counts.summarize(&rule_label(rule), &[], &mut warnings);
    (m, warnings)
}

fn rule_label(rule: Binarization) -> String {
    match rule {
        Binarization::Threshold(t) => format!("threshold {t}"),
        Binarization::TopK(k) => format!("top-{k}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub map: f64,
    pub threshold: f64,
    #[serde(flatten)]
    pub counting: CountingMetrics,
    pub top3: Option<CountingMetrics>,
    pub per_class: Vec<ClassMetrics>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let m = &self.counting;
        for (k, v) in [
            ("mAP", self.map),
            ("OP", m.op),
            ("OR", m.or),
            ("OF1", m.of1),
            ("CP", m.cp),
            ("CR", m.cr),
            ("CF1", m.cf1),
        ] {
            writeln!(out, "{k}={v}").unwrap();
        }
        if let Some(t) = &self.top3 {
            for (k, v) in [("OP", t.op), ("OR", t.or), ("OF1", t.of1), ("CP", t.cp), ("CR", t.cr), ("CF1", t.cf1)] {
                writeln!(out, "top3.{k}={v}").unwrap();
            }
        }
        writeln!(out, "images={}", self.images).unwrap();
        writeln!(out, "warnings={}", self.warnings.len()).unwrap();
        for c in &self.per_class {
            let ap = c.ap.map_or_else(|| "undefined".to_owned(), |v| v.to_string());
            writeln!(out, "class.{}.AP={ap}", c.name).unwrap();
            writeln!(out, "class.{}.precision={}", c.name, c.precision).unwrap();
            writeln!(out, "class.{}.recall={}", c.name, c.recall).unwrap();
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("metrics.json");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let kv = dir.join("metrics.txt");
        fs::write(&kv, self.to_key_values()).map_err(|e| Error::io(&kv, e))
    }
}

/// Shardable evaluation state. Items carry a global ordinal so rankings
/// break ties identically regardless of how the data was split.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    config: MetricsConfig,
    categories: usize,
    /// Per category: (ordinal, score, label).
    ranked: Vec<Vec<(u64, f64, bool)>>,
    threshold_counts: ClassCounts,
    top3_counts: ClassCounts,
    images: usize,
}

impl MetricsAccumulator {
    pub fn new(categories: usize, config: MetricsConfig) -> Self {
        MetricsAccumulator {
            config,
            categories,
            ranked: vec![Vec::new(); categories],
            threshold_counts: ClassCounts::new(categories),
            top3_counts: ClassCounts::new(categories),
            images: 0,
        }
    }

    pub fn add(&mut self, ordinal: u64, scores: ArrayView1<f64>, labels: ArrayView1<u8>) {
        for (c, (&s, &y)) in scores.iter().zip(labels).enumerate() {
            self.ranked[c].push((ordinal, s, y == 1));
        }
        self.threshold_counts
            .add(&Binarization::Threshold(self.config.threshold).apply(scores), labels);
        if self.config.top3 {
            self.top3_counts.add(&Binarization::TopK(3).apply(scores), labels);
        }
        self.images += 1;
    }

    pub fn add_set(&mut self, preds: &PredictionSet, first_ordinal: u64) {
        for (i, (s, y)) in preds.scores.outer_iter().zip(preds.labels.outer_iter()).enumerate() {
            self.add(first_ordinal + i as u64, s, y);
        }
    }

    /// Associative, commutative combination of two shards.
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        assert_eq!(self.categories, other.categories, "merging mismatched accumulators");
        for (a, b) in self.ranked.iter_mut().zip(&other.ranked) {
            a.extend_from_slice(b);
        }
        self.threshold_counts.merge(&other.threshold_counts);
        self.top3_counts.merge(&other.top3_counts);
        self.images += other.images;
    }

    pub fn finish(&self, names: &[String]) -> MetricsReport {
        let mut warnings = Vec::new();
        let aps: Vec<Option<f64>> = self
            .ranked
            .iter()
            .enumerate()
            .map(|(c, items)| {
                let mut items = items.clone();
                items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                match ranked_ap(items.iter().map(|i| i.2)) {
                    Ok(ap) => Some(ap),
                    Err(UndefinedAp) => {
                        let name = names.get(c).map_or_else(|| c.to_string(), Clone::clone);
                        warnings.push(format!("class `{name}` has no positives; excluded from mAP"));
                        None
                    }
                }
            })
            .collect();
        let defined: Vec<f64> = aps.iter().flatten().copied().collect();
        let map = if defined.is_empty() {
            warnings.push("no class has positives; mAP reported as 0".into());
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let rule = Binarization::Threshold(self.config.threshold);
        let (counting, per_class) = self
            .threshold_counts
            .summarize(&rule_label(rule), names, &mut warnings);
        let top3 = self.config.top3.then(|| {
            self.top3_counts
                .summarize(&rule_label(Binarization::TopK(3)), names, &mut warnings)
                .0
        });
        MetricsReport {
            images: self.images,
            map,
            threshold: self.config.threshold,
            counting,
            top3,
            per_class: (0..self.categories)
                .map(|c| ClassMetrics {
                    name: names.get(c).map_or_else(|| c.to_string(), Clone::clone),
                    ap: aps[c],
                    precision: per_class[c].0,
                    recall: per_class[c].1,
                })
                .collect(),
            warnings,
        }
    }
}

pub fn evaluate(preds: &PredictionSet, names: &[String], config: MetricsConfig) -> MetricsReport {
    let mut acc = MetricsAccumulator::new(preds.categories(), config);
    acc.add_set(preds, 0);
    acc.finish(names)
}

/// Tab-separated dump: a header of category names, then per image its id,
/// the scores and the binary labels.
pub fn write_dump(path: &Path, names: &[String], preds: &PredictionSet) -> Result<()> {
    let mut out = names.join("\t");
    out.push('\n');
    for (i, id) in preds.image_ids.iter().enumerate() {
        out.push_str(id);
        for s in preds.scores.row(i) {
            write!(out, "\t{s}").unwrap();
        }
        for y in preds.labels.row(i) {
            write!(out, "\t{y}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<(Vec<String>, PredictionSet)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let names: Vec<String> = header.split('\t').map(str::to_owned).collect();
    let c = names.len();
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 1 + 2 * c {
            return Err(err(lineno, format!("expected {} fields, found {}", 1 + 2 * c, fields.len())));
        }
        ids.push(fields[0].to_owned());
        for f in &fields[1..=c] {
            let s: f64 = f.parse().map_err(|e| err(lineno, format!("bad score `{f}`: {e}")))?;
            if !(0.0..=1.0).contains(&s) {
                return Err(err(lineno, format!("score {s} outside [0, 1]")));
            }
            scores.push(s);
        }
        for f in &fields[1 + c..] {
            match *f {
                "0" => labels.push(0u8),
                "1" => labels.push(1u8),
                other => return Err(err(lineno, format!("label `{other}` is not 0 or 1"))),
            }
        }
    }
    let n = ids.len();
    let preds = PredictionSet::new(
        ids,
        Array2::from_shape_vec((n, c), scores).expect("row count checked"),
        Array2::from_shape_vec((n, c), labels).expect("row count checked"),
    )?;
    Ok((names, preds))
}
