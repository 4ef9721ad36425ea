//! A small self-contained trainer that produces real activation snapshots.
//!
//! A fully-connected network is trained by mini-batch SGD with weight decay
//! on Gaussian-blob classification (the source task). After every epoch it
//! records post-nonlinearity activations of every hidden layer for a fixed
//! held-out source batch and for a few fixed unlabelled inputs drawn from
//! translated blobs (the target); each target blob moves in its own random
//! direction. It also records validation accuracy on held-out source data
//! and a target accuracy obtained by a nearest-class-centroid readout on the
//! last hidden layer, using labelled translated-blob examples. Target labels
//! only ever feed that evaluation curve, never the snapshots.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{AccuracyCurve, CurveKind};
use crate::snapshot::{
    ActivationSnapshot, LayerActivations, PopulationKind, RunManifest, SnapshotError, SOURCE_VALID_TAG, TARGET_TAG,
};
use crate::synth::rundir::{RunDir, TARGET_CURVE_FILE, VALID_CURVE_FILE};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy spec: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    #[default]
    Relu,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainSpec {
    pub input_dim: usize,
    /// One entry per hidden layer.
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    /// Translation of every target blob, in units of the blob deviation.
    pub shift: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on weights (not biases), applied in the update step.
    pub weight_decay: f64,
    /// Multiplier on the 1/sqrt(fan_in) weight init.
    pub init_scale: f64,
    /// A value at or above the training-set size gives full-batch descent.
    pub batch_size: usize,
    /// Unlabelled target inputs tracked over training.
    pub n_target_unlabelled: usize,
    pub seed: u64,
    pub nonlinearity: Nonlinearity,
    /// Distance of each class mean from the origin.
    pub class_separation: f64,
    pub blob_std: f64,
    pub train_per_class: usize,
    /// Held-out source examples per class for validation accuracy.
    pub valid_per_class: usize,
    /// Size of the held-out source batch whose activations are recorded.
    pub n_source_tracked: usize,
    /// Labelled target examples per class used to form centroids.
    pub target_shots: usize,
    /// Labelled target queries per class scored against the centroids.
    pub target_queries_per_class: usize,
}

impl Default for ToyTrainSpec {
    fn default() -> Self {
        ToyTrainSpec {
            input_dim: 16,
            hidden_dims: vec![32, 32],
            n_classes: 5,
            shift: ACCEPTANCE_SHIFT,
            epochs: 40,
            learning_rate: 1.0,
            weight_decay: 0.02,
            init_scale: 0.35,
            batch_size: 500,
            n_target_unlabelled: 5,
            seed: 42,
            nonlinearity: Nonlinearity::Relu,
            class_separation: 1.0,
            blob_std: 1.0,
            train_per_class: 100,
            valid_per_class: 100,
            n_source_tracked: 50,
            target_shots: 5,
            target_queries_per_class: 100,
        }
    }
}

/// Default target translation: eight blob deviations.
pub const ACCEPTANCE_SHIFT: f64 = 8.0;

/// The default spec at a given shift and seed.
pub fn acceptance_spec(shift: f64, seed: u64) -> ToyTrainSpec {
    ToyTrainSpec {
        shift,
        seed,
        ..ToyTrainSpec::default()
    }
}

impl ToyTrainSpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        let positive = [
            ("input_dim", self.input_dim),
            ("n_classes", self.n_classes),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_target_unlabelled", self.n_target_unlabelled),
            ("train_per_class", self.train_per_class),
            ("valid_per_class", self.valid_per_class),
            ("n_source_tracked", self.n_source_tracked),
            ("target_shots", self.target_shots),
            ("target_queries_per_class", self.target_queries_per_class),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ToyError::Invalid(format!("{name} must be positive")));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(ToyError::Invalid("hidden_dims must be non-empty and positive".into()));
        }
        if self.n_classes < 2 {
            return Err(ToyError::Invalid("need at least 2 classes".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("class_separation", self.class_separation),
            ("blob_std", self.blob_std),
            ("init_scale", self.init_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ToyError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ToyError::Invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(ToyError::Invalid(format!("shift must be >= 0, got {}", self.shift)));
        }
        Ok(())
    }
}

/// Fully-connected network: hidden layers with an elementwise nonlinearity,
/// then a linear softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    nonlinearity: Nonlinearity,
    /// `weights[k]` maps layer k to layer k + 1, stored out x in.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Normal init scaled by 1/sqrt(fan_in), zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], n_classes: usize, nonlinearity: Nonlinearity, rng: &mut impl Rng) -> Self {
        Self::with_init_scale(input_dim, hidden, n_classes, nonlinearity, 1.0, rng)
    }

    /// Normal init scaled by `init_scale / sqrt(fan_in)`, zero biases.
    pub fn with_init_scale(
        input_dim: usize,
        hidden: &[usize],
        n_classes: usize,
        nonlinearity: Nonlinearity,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_classes);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let scale = init_scale / (w[0] as f64).sqrt();
            weights.push((0..w[0] * w[1]).map(|_| scale * normal.sample(rng)).collect());
            biases.push(vec![0.0; w[1]]);
        }
        Mlp {
            sizes,
            nonlinearity,
            weights,
            biases,
        }
    }

    pub fn n_hidden(&self) -> usize {
        self.sizes.len() - 2
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    /// Every layer's output for one input: `[x, h1, .., hL, logits]`.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut outs = vec![x.to_vec()];
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = outs.last().unwrap();
            let n_in = self.sizes[k];
            let mut y: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| bias + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if k < last {
                y.iter_mut().for_each(|v| *v = self.nonlinearity.apply(*v));
            }
            outs.push(y);
        }
        outs
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(self.forward(x).last().unwrap())
    }

    /// Mean cross-entropy over the batch and its gradient, flattened in the
    /// same order as [`params`](Self::params). Weight decay is not part of
    /// this loss.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[usize]) -> (f64, Vec<f64>) {
        let mut grad_w: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut grad_b: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        let inv = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let outs = self.forward(x);
            let probs = softmax(outs.last().unwrap());
            loss -= probs[y].max(f64::MIN_POSITIVE).ln() * inv;
            // dL/dlogits
            let mut delta: Vec<f64> = probs.iter().enumerate().map(|(c, p)| (p - if c == y { 1.0 } else { 0.0 }) * inv).collect();
            for k in (0..self.weights.len()).rev() {
                let n_in = self.sizes[k];
                let input = &outs[k];
                for (o, d) in delta.iter().enumerate() {
                    grad_b[k][o] += d;
                    let row = &mut grad_w[k][o * n_in..(o + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if k > 0 {
                    let mut back = vec![0.0; n_in];
                    for (o, d) in delta.iter().enumerate() {
                        for (i, w) in self.weights[k][o * n_in..(o + 1) * n_in].iter().enumerate() {
                            back[i] += w * d;
                        }
                    }
                    for (b, a) in back.iter_mut().zip(input) {
                        *b *= self.nonlinearity.derivative_from_output(*a);
                    }
                    delta = back;
                }
            }
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for (w, b) in grad_w.into_iter().zip(grad_b) {
            flat.extend(w);
            flat.extend(b);
        }
        (loss, flat)
    }

    pub fn loss(&self, xs: &[&[f64]], ys: &[usize]) -> f64 {
        let inv = 1.0 / xs.len() as f64;
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| -softmax(self.forward(x).last().unwrap())[y].max(f64::MIN_POSITIVE).ln() * inv)
            .sum()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameters flattened layer by layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    fn sgd_step(&mut self, grad: &[f64], lr: f64, weight_decay: f64) {
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.iter_mut() {
                *v -= lr * (grad[at] + weight_decay * *v);
                at += 1;
            }
            for v in b.iter_mut() {
                *v -= lr * grad[at];
                at += 1;
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Labelled {
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_blobs(means: &[Vec<f64>], per_class: usize, std: f64, rng: &mut impl Rng) -> Labelled {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut xs = Vec::with_capacity(means.len() * per_class);
    let mut ys = Vec::with_capacity(means.len() * per_class);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            xs.push(mean.iter().map(|m| m + normal.sample(rng)).collect());
            ys.push(c);
        }
    }
    Labelled { xs, ys }
}

/// Everything one toy run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub spec: ToyTrainSpec,
    pub checkpoints: Vec<u64>,
    pub source_snapshots: Vec<ActivationSnapshot>,
    pub target_snapshots: Vec<ActivationSnapshot>,
    pub valid_curve: AccuracyCurve,
    pub target_curve: AccuracyCurve,
}

fn hidden_snapshot(net: &Mlp, inputs: &[Vec<f64>], checkpoint: u64, population: PopulationKind) -> ActivationSnapshot {
    let outs: Vec<Vec<Vec<f64>>> = inputs.iter().map(|x| net.forward(x)).collect();
    let layers = (0..net.n_hidden())
        .map(|l| {
            let d = net.hidden_dims()[l];
            let values = outs.iter().flat_map(|o| o[l + 1].iter().map(|v| *v as f32)).collect();
            LayerActivations::new(l as u32, inputs.len(), d, values)
        })
        .collect();
    ActivationSnapshot::new(checkpoint, population, layers)
}

fn accuracy(net: &Mlp, data: &Labelled) -> f64 {
    let correct = data.xs.iter().zip(&data.ys).filter(|(x, y)| net.predict(x) == **y).count();
    correct as f64 / data.xs.len() as f64
}

/// Nearest-class-centroid accuracy in the last hidden layer.
fn centroid_accuracy(net: &Mlp, support: &Labelled, queries: &Labelled, n_classes: usize) -> f64 {
    let top = net.n_hidden();
    let d = net.hidden_dims()[top - 1];
    let mut centroids = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (x, &y) in support.xs.iter().zip(&support.ys) {
        let h = &net.forward(x)[top];
        centroids[y].iter_mut().zip(h).for_each(|(c, v)| *c += v);
        counts[y] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = queries
        .xs
        .iter()
        .zip(&queries.ys)
        .filter(|(x, y)| {
            let h = &net.forward(x)[top];
            let dist: Vec<f64> = centroids
                .iter()
                .map(|c| -c.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            argmax(&dist) == **y
        })
        .count();
    correct as f64 / queries.xs.len() as f64
}

/// Trains one network and records snapshots and curves at checkpoints
/// `1..=epochs`, each taken after that epoch. Single-threaded and fully
/// determined by `spec.seed`.
pub fn toy_train(spec: &ToyTrainSpec) -> Result<ToyRun, ToyError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| random_unit(spec.input_dim, &mut rng).into_iter().map(|v| v * spec.class_separation).collect())
        .collect();
    let shifted: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let direction = random_unit(spec.input_dim, &mut rng);
            m.iter().zip(&direction).map(|(a, u)| a + spec.shift * spec.blob_std * u).collect()
        })
        .collect();

    let train = sample_blobs(&means, spec.train_per_class, spec.blob_std, &mut rng);
    let valid = sample_blobs(&means, spec.valid_per_class, spec.blob_std, &mut rng);
    let tracked_source = sample_blobs(&means, spec.n_source_tracked.div_ceil(spec.n_classes), spec.blob_std, &mut rng)
        .xs
        .into_iter()
        .take(spec.n_source_tracked)
        .collect::<Vec<_>>();
    // Unlabelled target inputs: one support set's worth of shifted-blob
    // inputs; the labels are dropped.
    let tracked_target = sample_blobs(&shifted, spec.n_target_unlabelled.div_ceil(spec.n_classes), spec.blob_std, &mut rng)
        .xs
        .into_iter()
        .take(spec.n_target_unlabelled)
        .collect::<Vec<_>>();
    let target_support = sample_blobs(&shifted, spec.target_shots, spec.blob_std, &mut rng);
    let target_queries = sample_blobs(&shifted, spec.target_queries_per_class, spec.blob_std, &mut rng);

    let mut net = Mlp::with_init_scale(
        spec.input_dim,
        &spec.hidden_dims,
        spec.n_classes,
        spec.nonlinearity,
        spec.init_scale,
        &mut rng,
    );

    let mut checkpoints = Vec::with_capacity(spec.epochs);
    let mut source_snapshots = Vec::with_capacity(spec.epochs);
    let mut target_snapshots = Vec::with_capacity(spec.epochs);
    let mut valid_acc = Vec::with_capacity(spec.epochs);
    let mut target_acc = Vec::with_capacity(spec.epochs);
    let mut record = |net: &Mlp, epoch: usize| {
        let c = epoch as u64;
        checkpoints.push(c);
        let src = hidden_snapshot(net, &tracked_source, c, PopulationKind::SourceValid);
        let tgt = hidden_snapshot(net, &tracked_target, c, PopulationKind::Target);
        let finite = src.validate().is_ok() && tgt.validate().is_ok();
        source_snapshots.push(src);
        target_snapshots.push(tgt);
        valid_acc.push(accuracy(net, &valid));
        target_acc.push(centroid_accuracy(net, &target_support, &target_queries, spec.n_classes));
        finite
    };

    let mut order: Vec<usize> = (0..train.xs.len()).collect();
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train.xs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train.ys[i]).collect();
            let (loss, grad) = net.loss_and_grad(&xs, &ys);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ToyError::Diverged { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            net.sgd_step(&grad, spec.learning_rate, spec.weight_decay);
        }
        let epoch_loss = epoch_loss / train.xs.len() as f64;
        // The last step of an epoch can blow up the weights even when every
        // loss seen so far was finite, so the recorded activations are
        // checked too.
        if !epoch_loss.is_finite() || !record(&net, epoch) {
            return Err(ToyError::Diverged { epoch, loss: epoch_loss });
        }
    }

    Ok(ToyRun {
        spec: spec.clone(),
        valid_curve: AccuracyCurve::new(checkpoints.clone(), valid_acc, CurveKind::Maximize).expect("valid curve"),
        target_curve: AccuracyCurve::new(checkpoints.clone(), target_acc, CurveKind::Maximize).expect("target curve"),
        checkpoints,
        source_snapshots,
        target_snapshots,
    })
}

impl ToyRun {
    pub fn layer_dims(&self) -> Vec<usize> {
        self.spec.hidden_dims.clone()
    }

    /// Writes snapshots, `manifest.json`, `valid_curve.csv` and
    /// `target_curve.csv` into `dir`.
    pub fn write_to(&self, dir: &Path, run_id: &str) -> Result<RunManifest, ToyError> {
        let mut meta = serde_json::Map::new();
        meta.insert("generator".into(), "toytrain".into());
        meta.insert("checkpoint_unit".into(), "epoch".into());
        meta.insert("spec".into(), serde_json::to_value(&self.spec).expect("spec serialises"));
        let manifest = RunDir {
            run_id,
            checkpoints: &self.checkpoints,
            layer_dims: &self.spec.hidden_dims,
            populations: &[
                (SOURCE_VALID_TAG, &self.source_snapshots),
                (TARGET_TAG, &self.target_snapshots),
            ],
            curves: &[(VALID_CURVE_FILE, &self.valid_curve), (TARGET_CURVE_FILE, &self.target_curve)],
            meta,
        }
        .write(dir)?;
        Ok(manifest)
    }
}
