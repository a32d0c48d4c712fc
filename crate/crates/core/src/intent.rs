//! Intent classification on top of frozen `r_x` encodings.
//!
//! A two-layer feed-forward network (GeLU hidden layer with dropout, softmax
//! output) is trained with minibatch SGD and early stopping on dev accuracy.
//! Hidden width, dropout and learning rate come from a grid search.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gelu_fast, gelu_fast_grad, softmax};

pub const INTENT_BATCH_SIZE: usize = 32;
pub const EARLY_STOP_PATIENCE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentExample {
    pub text: String,
    pub label: String,
}

pub fn load_intent_examples(path: impl AsRef<Path>) -> Result<Vec<IntentExample>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("intent line {}: {e}", i + 1))))
        .collect()
}

/// Label names in first-seen order of their sorted set.
pub fn label_set(examples: &[IntentExample]) -> Vec<String> {
    let mut labels: Vec<String> = examples.iter().map(|e| e.label.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentSplits {
    pub train: Vec<IntentExample>,
    pub dev: Vec<IntentExample>,
    pub test: Vec<IntentExample>,
}

/// Seeded 80/10/10 split.
pub fn split_80_10_10(examples: &[IntentExample], seed: u64) -> IntentSplits {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = examples.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let pick = |r: &[usize]| r.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    IntentSplits {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentGrid {
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    pub lr: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for IntentGrid {
    fn default() -> Self {
        Self {
            hidden: vec![256, 512],
            dropout: vec![0.0, 0.5, 0.75],
            lr: vec![0.01, 0.03, 0.1],
            max_epochs: 100,
            patience: EARLY_STOP_PATIENCE,
            batch_size: INTENT_BATCH_SIZE,
        }
    }
}

impl IntentGrid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &hidden in &self.hidden {
            for &dropout in &self.dropout {
                for &lr in &self.lr {
                    out.push(GridPoint { hidden, dropout, lr });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentClassifier {
    pub labels: Vec<String>,
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl IntentClassifier {
    fn init(input_dim: usize, hidden: usize, labels: Vec<String>, rng: &mut ChaCha8Rng) -> Self {
        let k = labels.len();
        let n1 = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        Self {
            input_dim,
            hidden,
            w1: (0..input_dim * hidden).map(|_| n1.sample(rng) as f32).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden * k).map(|_| n2.sample(rng) as f32).collect(),
            b2: vec![0.0; k],
            labels,
        }
    }

    fn w1(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.input_dim, self.hidden), &self.w1).unwrap()
    }

    fn w2(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.hidden, self.labels.len()), &self.w2).unwrap()
    }

    fn hidden_pre(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.w1()) + &ArrayView1::from(&self.b1)
    }

    /// Class probabilities for each row of `features`.
    pub fn predict_proba(&self, features: ArrayView2<f32>) -> Array2<f32> {
        let h = self.hidden_pre(features).mapv(gelu_fast);
        let logits = h.dot(&self.w2()) + &ArrayView1::from(&self.b2);
        let mut out = Array2::zeros(logits.raw_dim());
        for (mut o, l) in out.rows_mut().into_iter().zip(logits.rows()) {
            o.assign(&Array1::from(softmax(l.as_slice().unwrap())));
        }
        out
    }

    /// Label (argmax, lowest index on ties) and probability vector.
    pub fn classify(&self, features: ArrayView1<f32>) -> (String, Vec<f32>) {
        let p = self.predict_proba(features.insert_axis(Axis(0)));
        let probs = p.row(0).to_vec();
        (self.labels[argmax(&probs)].clone(), probs)
    }

    pub fn accuracy(&self, features: ArrayView2<f32>, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let p = self.predict_proba(features);
        let hits = p.rows().into_iter().zip(labels).filter(|(r, &y)| argmax(r.as_slice().unwrap()) == y).count();
        hits as f64 / labels.len() as f64
    }

    /// One SGD step on a minibatch, mean cross-entropy.
    fn sgd_step(&mut self, x: ArrayView2<f32>, y: &[usize], point: GridPoint, rng: &mut ChaCha8Rng) {
        let n = x.nrows() as f32;
        let pre = self.hidden_pre(x);
        let keep = 1.0 - point.dropout;
        let mask = Array2::from_shape_fn(pre.raw_dim(), |_| {
            if point.dropout > 0.0 && rng.random::<f64>() < point.dropout { 0.0 } else { (1.0 / keep) as f32 }
        });
        let h = pre.mapv(gelu_fast) * &mask;
        let logits = h.dot(&self.w2()) + &ArrayView1::from(&self.b2);
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (i, l) in logits.rows().into_iter().enumerate() {
            let p = softmax(l.as_slice().unwrap());
            for (j, pj) in p.into_iter().enumerate() {
                dlogits[[i, j]] = (pj - if j == y[i] { 1.0 } else { 0.0 }) / n;
            }
        }
        let dw2 = h.t().dot(&dlogits);
        let db2 = dlogits.sum_axis(Axis(0));
        let dh = dlogits.dot(&self.w2().t()) * &mask;
        let dpre = ndarray::Zip::from(&dh).and(&pre).map_collect(|&g, &z| g * gelu_fast_grad(z));
        let dw1 = x.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        let lr = point.lr as f32;
        let upd = |w: &mut Vec<f32>, g: &[f32]| w.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
        upd(&mut self.w1, dw1.as_standard_layout().as_slice().unwrap());
        upd(&mut self.b1, db1.as_slice().unwrap());
        upd(&mut self.w2, dw2.as_standard_layout().as_slice().unwrap());
        upd(&mut self.b2, db2.as_slice().unwrap());
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Features and integer labels for one split.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Array2<f32>, labels: &[String], label_set: &[String]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = label_set.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let labels = labels
            .iter()
            .map(|l| index.get(l.as_str()).copied().ok_or_else(|| Error::data(format!("label {l:?} not in the label set"))))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != features.nrows() {
            return Err(Error::data("feature rows and labels differ in count"));
        }
        Ok(Self { features, labels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub point: GridPoint,
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train one grid point; keeps the parameters from the best dev epoch and
/// stops after `patience` epochs without improvement.
pub fn train_single(
    train: &FeatureSet,
    dev: &FeatureSet,
    labels: &[String],
    point: GridPoint,
    grid: &IntentGrid,
    seed: u64,
) -> (IntentClassifier, TrainingRun) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = IntentClassifier::init(train.features.ncols(), point.hidden, labels.to_vec(), &mut rng);
    let mut best = (clf.clone(), clf.accuracy(dev.features.view(), &dev.labels), 0usize);
    let mut since = 0;
    let mut epochs = 0;
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    for epoch in 1..=grid.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(grid.batch_size) {
            let x = train.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            clf.sgd_step(x.view(), &y, point, &mut rng);
        }
        let acc = clf.accuracy(dev.features.view(), &dev.labels);
        if acc > best.1 {
            best = (clf.clone(), acc, epoch);
            since = 0;
        } else {
            since += 1;
            if since >= grid.patience {
                break;
            }
        }
    }
    let run = TrainingRun { point, best_dev_accuracy: best.1, best_epoch: best.2, epochs_run: epochs };
    (best.0, run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<TrainingRun>,
    pub chosen: GridPoint,
}

/// Grid search over `grid`, selecting by dev accuracy (first point wins ties).
pub fn train_intent_classifier(
    train: &FeatureSet,
    dev: &FeatureSet,
    labels: &[String],
    grid: &IntentGrid,
    seed: u64,
) -> Result<(IntentClassifier, GridReport)> {
    if labels.len() < 2 {
        return Err(Error::data("intent classification needs at least two classes"));
    }
    let distinct: std::collections::BTreeSet<usize> = train.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::data("training split contains a single class"));
    }
    let mut best: Option<(IntentClassifier, TrainingRun)> = None;
    let mut runs = Vec::new();
    for (i, point) in grid.points().into_iter().enumerate() {
        let (clf, run) = train_single(train, dev, labels, point, grid, seed.wrapping_add(i as u64));
        log::info!("grid {:?}: dev accuracy {:.4} at epoch {}", point, run.best_dev_accuracy, run.best_epoch);
        if best.as_ref().is_none_or(|(_, b)| run.best_dev_accuracy > b.best_dev_accuracy) {
            best = Some((clf, run.clone()));
        }
        runs.push(run);
    }
    let (clf, run) = best.ok_or_else(|| Error::config("empty search grid"))?;
    Ok((clf, GridReport { runs, chosen: run.point }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Array2<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut x = Array2::zeros((n, 6));
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            for j in 0..6 {
                x[[i, j]] = noise.sample(&mut rng) as f32 + if j == c { 2.0 } else { 0.0 };
            }
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let (x, y) = blobs(200, 1);
        let (dx, dy) = blobs(40, 2);
        let train = FeatureSet { features: x, labels: y };
        let dev = FeatureSet { features: dx, labels: dy };
        let grid = IntentGrid { hidden: vec![16], dropout: vec![0.0, 0.5], lr: vec![0.1], ..IntentGrid::default() };
        let (clf, report) = train_intent_classifier(&train, &dev, &labels, &grid, 3).unwrap();
        assert!(clf.accuracy(dev.features.view(), &dev.labels) >= 0.95);
        assert_eq!(report.runs.len(), 2);
        let (label, probs) = clf.classify(dev.features.row(0));
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(labels.contains(&label));
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let (x, y) = blobs(64, 4);
        let train = FeatureSet { features: x.clone(), labels: y.clone() };
        let dev = FeatureSet { features: x, labels: y };
        let grid = IntentGrid { max_epochs: 200, ..IntentGrid::default() };
        let point = GridPoint { hidden: 8, dropout: 0.0, lr: 0.1 };
        let (clf, run) = train_single(&train, &dev, &labels, point, &grid, 0);
        assert!(run.epochs_run < 200);
        assert_eq!(run.epochs_run, run.best_epoch + grid.patience);
        assert_eq!(clf.accuracy(dev.features.view(), &dev.labels), run.best_dev_accuracy);
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _) = blobs(10, 5);
        let fs = FeatureSet { features: x, labels: vec![0; 10] };
        let labels = vec!["a".to_string(), "b".to_string()];
        assert!(train_intent_classifier(&fs, &fs, &labels, &IntentGrid::default(), 0).is_err());
        assert!(train_intent_classifier(&fs, &fs, &labels[..1], &IntentGrid::default(), 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let ex: Vec<IntentExample> = (0..100).map(|i| IntentExample { text: format!("t{i}"), label: format!("{}", i % 3) }).collect();
        let s = split_80_10_10(&ex, 1);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 10, 10));
    }
}
