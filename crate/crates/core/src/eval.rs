//! Downstream evaluation: frozen-feature linear probe, class-balanced
//! semi-supervised fine-tuning and summaries of training curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::EncoderParams;
use crate::error::{Co2Error, Result};
use crate::numeric::{dot, log_softmax_temp};
use crate::rng::{self, Domain};
use crate::trainer::{sgd_update, MetricsRecord};

/// Embeds every sample with frozen parameters, keeping order and labels.
pub fn extract_features(
    params: &EncoderParams,
    samples: &[Sample],
) -> Result<Vec<(Vec<f64>, Option<u32>)>> {
    samples
        .iter()
        .map(|s| Ok((params.forward(&s.features)?, s.label)))
        .collect()
}

/// Splits indices per class so each class contributes about `test_fraction`
/// of its samples to the test side. Unlabelled samples always go to train.
pub fn stratified_split(samples: &[Sample], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = rng::stream(seed, Domain::Split, 0, 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_test = if label.is_some() {
            ((idx.len() as f64 * test_fraction).round() as usize).min(idx.len().saturating_sub(1))
        } else {
            0
        };
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Minibatch size; 0 trains on the full batch.
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 0,
        }
    }
}

/// Affine softmax classifier, weights stored row-major `classes x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub num_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    /// Index of the largest logit; ties go to the lowest class.
    pub fn predict(&self, x: &[f64]) -> u32 {
        argmax(&self.logits(x)) as u32
    }

    pub fn accuracy<X: AsRef<[f64]>>(&self, xs: &[X], ys: &[u32]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x.as_ref()) == y)
            .count();
        hits as f64 / xs.len() as f64
    }

    /// Adds the gradient of the mean cross entropy over `batch` to
    /// `(grad_w, grad_b)` and returns, per item, the gradient with respect to
    /// the classifier input.
    fn accumulate_grad<X: AsRef<[f64]>>(
        &self,
        xs: &[X],
        ys: &[u32],
        batch: &[usize],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        want_input_grad: bool,
    ) -> Vec<Vec<f64>> {
        let scale = 1.0 / batch.len() as f64;
        let mut input_grads = Vec::new();
        for &i in batch {
            let x = xs[i].as_ref();
            let log_s = log_softmax_temp(&self.logits(x), 1.0).expect("finite logits");
            let mut dx = if want_input_grad {
                vec![0.0; self.dim]
            } else {
                Vec::new()
            };
            for (c, ls) in log_s.iter().enumerate() {
                let target = if c as u32 == ys[i] { 1.0 } else { 0.0 };
                let d = scale * (ls.exp() - target);
                grad_b[c] += d;
                let row = c * self.dim..(c + 1) * self.dim;
                for (g, xv) in grad_w[row.clone()].iter_mut().zip(x) {
                    *g += d * xv;
                }
                if want_input_grad {
                    for (dxv, w) in dx.iter_mut().zip(&self.weights[row]) {
                        *dxv += d * w;
                    }
                }
            }
            if want_input_grad {
                input_grads.push(dx);
            }
        }
        input_grads
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub classifier: LinearClassifier,
}

fn class_count(train_y: &[u32], test_y: &[u32]) -> Result<usize> {
    let c = train_y.iter().chain(test_y).copied().max().map_or(0, |m| m as usize + 1);
    if c < 2 {
        return Err(Co2Error::InvalidConfig("at least two classes are required".into()));
    }
    let mut seen = vec![false; c];
    for &y in train_y {
        seen[y as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Co2Error::DegenerateSplit(missing));
    }
    Ok(c)
}

/// Multinomial logistic regression on frozen features, scored on the test split.
pub fn linear_probe<X: AsRef<[f64]>>(
    train_x: &[X],
    train_y: &[u32],
    test_x: &[X],
    test_y: &[u32],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Co2Error::LengthMismatch {
            left: train_x.len() + test_x.len(),
            right: train_y.len() + test_y.len(),
        });
    }
    let num_classes = class_count(train_y, test_y)?;
    let dim = train_x[0].as_ref().len();
    if train_x.iter().chain(test_x).any(|x| x.as_ref().len() != dim) {
        return Err(Co2Error::DimensionMismatch("probe features of unequal length".into()));
    }

    let mut clf = LinearClassifier::zeros(num_classes, dim);
    let mut vel_w = vec![0.0; clf.weights.len()];
    let mut vel_b = vec![0.0; clf.bias.len()];
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let batch = if cfg.batch_size == 0 {
        order.len()
    } else {
        cfg.batch_size.min(order.len())
    };
    let mut rng = rng::stream(seed, Domain::Probe, 0, 0);
    for _ in 0..cfg.epochs {
        if batch < order.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; clf.weights.len()];
            let mut gb = vec![0.0; clf.bias.len()];
            clf.accumulate_grad(train_x, train_y, chunk, &mut gw, &mut gb, false);
            sgd_update(&mut clf.weights, &gw, cfg.lr, cfg.momentum, cfg.weight_decay, &mut vel_w)?;
            sgd_update(&mut clf.bias, &gb, cfg.lr, cfg.momentum, cfg.weight_decay, &mut vel_b)?;
        }
    }
    Ok(ProbeResult {
        accuracy: clf.accuracy(test_x, test_y),
        train_accuracy: clf.accuracy(train_x, train_y),
        classifier: clf,
    })
}

/// Probe on a labelled dataset with a seeded stratified 80/20 split.
pub fn probe_dataset(
    params: Option<&EncoderParams>,
    samples: &[Sample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let labelled: Vec<Sample> = samples.iter().filter(|s| s.label.is_some()).cloned().collect();
    let (train, test) = stratified_split(&labelled, 0.2, seed);
    let xs: Vec<Vec<f64>> = match params {
        Some(p) => extract_features(p, &labelled)?.into_iter().map(|(x, _)| x).collect(),
        None => labelled.iter().map(|s| s.features.clone()).collect(),
    };
    let ys: Vec<u32> = labelled.iter().map(|s| s.label.expect("filtered")).collect();
    let pick = |idx: &[usize]| -> (Vec<&[f64]>, Vec<u32>) {
        (idx.iter().map(|&i| xs[i].as_slice()).collect(), idx.iter().map(|&i| ys[i]).collect())
    };
    let (tr_x, tr_y) = pick(&train);
    let (te_x, te_y) = pick(&test);
    linear_probe(&tr_x, &tr_y, &te_x, &te_y, cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub label_fraction: f64,
    /// The fresh classification head trains at this multiple of `base_lr`.
    pub head_lr_multiplier: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            label_fraction: 0.1,
            head_lr_multiplier: 100.0,
            epochs: 50,
            base_lr: 0.01,
            seed: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
        }
    }
}

/// Deterministic class-balanced subset: every class contributes the same
/// number of examples, give or take one.
pub fn balanced_subset(labels: &[u32], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Co2Error::InvalidConfig(format!(
            "label fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let classes = by_class.len();
    if classes == 0 {
        return Err(Co2Error::InsufficientLabels("no labelled samples".into()));
    }
    let smallest = by_class.values().map(Vec::len).min().expect("non-empty");
    let wanted = ((fraction * labels.len() as f64).round() as usize).min(smallest * classes);
    if wanted < classes {
        return Err(Co2Error::InsufficientLabels(format!(
            "fraction {fraction} of {} samples gives {wanted} labels for {classes} classes",
            labels.len()
        )));
    }
    let mut rng = rng::stream(seed, Domain::Finetune, 1, 0);
    let mut bonus: Vec<usize> = (0..classes).collect();
    bonus.shuffle(&mut rng);
    let extra = wanted % classes;
    let mut out = Vec::with_capacity(wanted);
    for (rank, (_, mut idx)) in by_class.into_iter().enumerate() {
        let take = wanted / classes + usize::from(bonus[..extra].contains(&rank));
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub accuracy: f64,
    pub num_labelled: usize,
    pub label_fraction: f64,
}

/// Fine-tunes all encoder parameters plus a fresh linear head on a balanced
/// labelled subset of `train`, then reports top-1 accuracy on `test`.
pub fn semi_supervised_finetune(
    params: &EncoderParams,
    train: &[Sample],
    test: &[Sample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    let labelled: Vec<&Sample> = train.iter().filter(|s| s.label.is_some()).collect();
    let labels: Vec<u32> = labelled.iter().map(|s| s.label.expect("filtered")).collect();
    let subset = balanced_subset(&labels, cfg.label_fraction, cfg.seed)?;
    let test_y: Vec<u32> = test
        .iter()
        .map(|s| s.label.ok_or_else(|| Co2Error::InsufficientLabels("unlabelled test sample".into())))
        .collect::<Result<_>>()?;
    let sub_y: Vec<u32> = subset.iter().map(|&i| labels[i]).collect();
    let num_classes = class_count(&sub_y, &test_y)?;

    let mut encoder = params.clone();
    let d = encoder.config().embed_dim;
    let mut head = LinearClassifier::zeros(num_classes, d);
    let bound = (6.0 / (num_classes + d) as f64).sqrt();
    let mut rng = rng::stream(cfg.seed, Domain::Finetune, 2, 0);
    for w in &mut head.weights {
        *w = rng.random_range(-bound..=bound);
    }

    let mut vel_enc = vec![0.0; encoder.len()];
    let mut vel_w = vec![0.0; head.weights.len()];
    let mut vel_b = vec![0.0; head.bias.len()];
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let batch = cfg.batch_size.clamp(1, subset.len());
    for epoch in 0..cfg.epochs {
        // decay by 0.2 at 60% and 80% of training
        let passed = [0.6, 0.8]
            .iter()
            .filter(|&&f| epoch as f64 >= f * cfg.epochs as f64)
            .count() as i32;
        let lr = cfg.base_lr * 0.2f64.powi(passed);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut traces = Vec::with_capacity(chunk.len());
            for &j in chunk {
                traces.push(encoder.forward_trace(&labelled[subset[j]].features)?);
            }
            let feats: Vec<&[f64]> = traces.iter().map(|t| t.embedding()).collect();
            let ys: Vec<u32> = chunk.iter().map(|&j| sub_y[j]).collect();
            let local: Vec<usize> = (0..chunk.len()).collect();
            let mut gw = vec![0.0; head.weights.len()];
            let mut gb = vec![0.0; head.bias.len()];
            let dfeat = head.accumulate_grad(&feats, &ys, &local, &mut gw, &mut gb, true);
            let mut genc = vec![0.0; encoder.len()];
            for (trace, up) in traces.iter().zip(&dfeat) {
                encoder.accumulate_backward(trace, up, 1.0, &mut genc)?;
            }
            sgd_update(encoder.values_mut(), &genc, lr, cfg.momentum, cfg.weight_decay, &mut vel_enc)?;
            let head_lr = lr * cfg.head_lr_multiplier;
            sgd_update(&mut head.weights, &gw, head_lr, cfg.momentum, cfg.weight_decay, &mut vel_w)?;
            sgd_update(&mut head.bias, &gb, head_lr, cfg.momentum, cfg.weight_decay, &mut vel_b)?;
        }
    }

    let test_x = extract_features(&encoder, test)?
        .into_iter()
        .map(|(x, _)| x)
        .collect::<Vec<_>>();
    Ok(FinetuneResult {
        accuracy: head.accuracy(&test_x, &test_y),
        num_labelled: subset.len(),
        label_fraction: cfg.label_fraction,
    })
}

/// Tail-window means of a training curve plus the area under `l_con`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_l_ins: f64,
    pub final_l_con: f64,
    pub final_total: f64,
    pub final_inst_acc: f64,
    /// Sum of `l_con` over steps (unit step width).
    pub auc_l_con: f64,
}

/// Fraction of the run averaged into the `final_*` fields.
pub const TAIL_FRACTION: f64 = 0.05;

pub fn summarize_run(records: &[MetricsRecord]) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Co2Error::EmptyStream);
    }
    let n = records.len();
    let window = ((n as f64 * TAIL_FRACTION).ceil() as usize).clamp(1, n);
    let tail = &records[n - window..];
    let mean = |f: fn(&MetricsRecord) -> f64| tail.iter().map(f).sum::<f64>() / window as f64;
    Ok(RunSummary {
        steps: n,
        final_l_ins: mean(|r| r.l_ins),
        final_l_con: mean(|r| r.l_con),
        final_total: mean(|r| r.total),
        final_inst_acc: mean(|r| r.inst_acc),
        auc_l_con: records.iter().map(|r| r.l_con).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
    Equal,
}

impl Direction {
    pub fn of(delta: f64) -> Self {
        if delta > 0.0 {
            Self::Increase
        } else if delta < 0.0 {
            Self::Decrease
        } else {
            Self::Equal
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Increase => "increase",
            Self::Decrease => "decrease",
            Self::Equal => "equal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub baseline: f64,
    pub co2: f64,
    pub delta: f64,
    pub direction_expected: Direction,
    pub direction_observed: Direction,
}

impl ComparisonRow {
    pub fn new(metric: &str, baseline: f64, co2: f64, expected: Direction) -> Self {
        let delta = co2 - baseline;
        Self {
            metric: metric.to_string(),
            baseline,
            co2,
            delta,
            direction_expected: expected,
            direction_observed: Direction::of(delta),
        }
    }

    pub fn matches_expectation(&self) -> bool {
        self.direction_expected == self.direction_observed
    }
}

/// Baseline (no consistency term) vs consistency-regularized run, with the
/// expected training-curve directions: lower final `l_con`, lower final
/// instance discrimination accuracy. Probe accuracies are added when given.
pub fn compare_runs(
    baseline: &RunSummary,
    co2: &RunSummary,
    probe: Option<(f64, f64)>,
) -> Vec<ComparisonRow> {
    let mut rows = vec![
        ComparisonRow::new("final_l_con", baseline.final_l_con, co2.final_l_con, Direction::Decrease),
        ComparisonRow::new(
            "final_inst_acc",
            baseline.final_inst_acc,
            co2.final_inst_acc,
            Direction::Decrease,
        ),
        ComparisonRow::new("final_l_ins", baseline.final_l_ins, co2.final_l_ins, Direction::Increase),
    ];
    if let Some((b, c)) = probe {
        rows.push(ComparisonRow::new("probe_acc", b, c, Direction::Increase));
    }
    rows
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("metric,baseline,co2,delta,direction_expected,direction_observed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.metric,
            r.baseline,
            r.co2,
            r.delta,
            r.direction_expected.as_str(),
            r.direction_observed.as_str()
        );
    }
    out
}
