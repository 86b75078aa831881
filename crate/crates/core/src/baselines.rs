//! Comparison classifiers: L2 nearest neighbours and a one-hidden-layer
//! sigmoid perceptron trained by backpropagation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{squared_distance, Matrix};
use crate::serial::{FormatError, TextReader, TextWriter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub gallery: Vec<(Vec<f64>, usize)>,
    pub k: usize,
}

impl KnnModel {
    pub fn new(gallery: Vec<(Vec<f64>, usize)>, k: usize) -> Result<Self, BaselineError> {
        if k == 0 || k > gallery.len() {
            return Err(BaselineError::InvalidParameter(format!(
                "k={k} must lie in 1..={}",
                gallery.len()
            )));
        }
        let m = gallery[0].0.len();
        if gallery.iter().any(|(x, _)| x.len() != m) {
            return Err(BaselineError::ShapeMismatch(
                "gallery vectors have differing lengths".into(),
            ));
        }
        Ok(KnnModel { gallery, k })
    }

    pub fn dim(&self) -> usize {
        self.gallery[0].0.len()
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new("KNN v1");
        w.field("k", self.k);
        w.field("dim", self.dim());
        w.field("gallery", self.gallery.len());
        for (x, label) in &self.gallery {
            w.field("label", label);
            w.reals(x);
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let mut r = TextReader::new(text);
        r.expect_header("KNN v1")?;
        let k: usize = r.field("k")?;
        let dim: usize = r.field("dim")?;
        let n: usize = r.field("gallery")?;
        let mut gallery = Vec::with_capacity(n);
        for _ in 0..n {
            let label: usize = r.field("label")?;
            gallery.push((r.reals(dim)?, label));
        }
        KnnModel::new(gallery, k).map_err(|e| r.err(e.to_string()))
    }
}

/// Majority label among the `k` nearest gallery points, plus every distinct
/// gallery label ranked by its nearest distance.
///
/// Vote ties go to the tied label whose closest member is nearer, then to
/// the smaller label.
pub fn knn_classify(model: &KnnModel, x: &[f64]) -> Result<(usize, Vec<usize>), BaselineError> {
    if x.len() != model.dim() {
        return Err(BaselineError::ShapeMismatch(format!(
            "query of length {} for a gallery of length {}",
            x.len(),
            model.dim()
        )));
    }
    let dists: Vec<f64> = model
        .gallery
        .iter()
        .map(|(g, _)| squared_distance(g, x))
        .collect();
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]));

    // (label, votes, nearest distance among the voters)
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for &i in &order[..model.k] {
        let label = model.gallery[i].1;
        match tally.iter_mut().find(|t| t.0 == label) {
            Some(t) => t.1 += 1,
            None => tally.push((label, 1, dists[i])),
        }
    }
    tally.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(a.2.total_cmp(&b.2))
            .then(a.0.cmp(&b.0))
    });
    let winner = tally[0].0;

    let mut nearest: Vec<(usize, f64)> = Vec::new();
    for &i in &order {
        let label = model.gallery[i].1;
        if !nearest.iter().any(|n| n.0 == label) {
            nearest.push((label, dists[i]));
        }
    }
    nearest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok((winner, nearest.into_iter().map(|n| n.0).collect()))
}

/// Logistic function `1 / (1 + e⁻ˣ)`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// One update per sample, samples reshuffled every epoch.
    Stochastic,
    /// One update per epoch with the summed gradient.
    FullBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub mode: UpdateMode,
    /// Standardize each input feature with training-set mean and deviation.
    pub standardize: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 100,
            learning_rate: 0.5,
            mode: UpdateMode::Stochastic,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `hidden × in`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `out × hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub learning_rate: f64,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
}

/// Gradients of the squared-error loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpGradients {
    fn zeros_like(m: &MlpModel) -> Self {
        MlpGradients {
            w1: Matrix::zeros(m.w1.rows(), m.w1.cols()),
            b1: vec![0.0; m.b1.len()],
            w2: Matrix::zeros(m.w2.rows(), m.w2.cols()),
            b2: vec![0.0; m.b2.len()],
        }
    }
}

impl MlpModel {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init(inputs: usize, hidden: usize, outputs: usize, learning_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut layer = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
            let b: Vec<f64> = (0..rows).map(|_| rng.gen_range(-bound..=bound)).collect();
            (Matrix::from_vec(rows, cols, w).expect("sized"), b)
        };
        let (w1, b1) = layer(hidden, inputs);
        let (w2, b2) = layer(outputs, hidden);
        MlpModel {
            w1,
            b1,
            w2,
            b2,
            learning_rate,
            input_shift: vec![0.0; inputs],
            input_scale: vec![1.0; inputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w2.rows()
    }

    fn normalized(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(v, (s, k))| (v - s) * k)
            .collect()
    }

    /// Hidden and output activations for an already-normalized input.
    fn forward_raw(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = (0..self.hidden())
            .map(|j| sigmoid(crate::linalg::dot(self.w1.row(j), x) + self.b1[j]))
            .collect();
        let out: Vec<f64> = (0..self.outputs())
            .map(|o| sigmoid(crate::linalg::dot(self.w2.row(o), &hidden) + self.b2[o]))
            .collect();
        (hidden, out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, BaselineError> {
        if x.len() != self.inputs() {
            return Err(BaselineError::ShapeMismatch(format!(
                "input of length {} for a network with {} inputs",
                x.len(),
                self.inputs()
            )));
        }
        Ok(self.forward_raw(&self.normalized(x)).1)
    }

    /// Loss `½ Σ (oₖ − tₖ)²` and its gradient for one normalized sample.
    pub fn loss_and_gradients(&self, x: &[f64], target: &[f64]) -> (f64, MlpGradients) {
        let (hidden, out) = self.forward_raw(x);
        let mut g = MlpGradients::zeros_like(self);
        let mut loss = 0.0;
        let delta_out: Vec<f64> = out
            .iter()
            .zip(target)
            .map(|(&o, &t)| {
                loss += 0.5 * (o - t) * (o - t);
                (o - t) * o * (1.0 - o)
            })
            .collect();
        for (o, &d) in delta_out.iter().enumerate() {
            g.b2[o] = d;
            for (j, &h) in hidden.iter().enumerate() {
                g.w2.set(o, j, d * h);
            }
        }
        for (j, &h) in hidden.iter().enumerate() {
            let back: f64 = delta_out
                .iter()
                .enumerate()
                .map(|(o, &d)| d * self.w2.get(o, j))
                .sum();
            let d = back * h * (1.0 - h);
            g.b1[j] = d;
            for (i, &xi) in x.iter().enumerate() {
                g.w1.set(j, i, d * xi);
            }
        }
        (loss, g)
    }

    fn apply(&mut self, g: &MlpGradients, step: f64) {
        let upd = |p: &mut [f64], d: &[f64]| p.iter_mut().zip(d).for_each(|(a, b)| *a -= step * b);
        upd(self.w1.as_mut_slice(), g.w1.as_slice());
        upd(&mut self.b1, &g.b1);
        upd(self.w2.as_mut_slice(), g.w2.as_slice());
        upd(&mut self.b2, &g.b2);
    }

    /// Summed squared-error loss over a dataset of raw inputs.
    pub fn total_loss(&self, xs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
        xs.iter()
            .zip(targets)
            .map(|(x, t)| self.loss_and_gradients(&self.normalized(x), t).0)
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new("MLP v1");
        w.field("layers", format!("{} {} {}", self.inputs(), self.hidden(), self.outputs()));
        w.real("learning_rate", self.learning_rate);
        w.vector("input_shift", &self.input_shift);
        w.vector("input_scale", &self.input_scale);
        w.matrix("w1", &self.w1);
        w.vector("b1", &self.b1);
        w.matrix("w2", &self.w2);
        w.vector("b2", &self.b2);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let mut r = TextReader::new(text);
        r.expect_header("MLP v1")?;
        let toks = r.tokens("layers")?;
        let sizes: Vec<usize> = toks.iter().filter_map(|t| t.parse().ok()).collect();
        if sizes.len() != 3 {
            return Err(r.err("expected three layer sizes"));
        }
        let learning_rate: f64 = r.field("learning_rate")?;
        let input_shift = r.vector("input_shift")?;
        let input_scale = r.vector("input_scale")?;
        let w1 = r.matrix("w1")?;
        let b1 = r.vector("b1")?;
        let w2 = r.matrix("w2")?;
        let b2 = r.vector("b2")?;
        let (i, h, o) = (sizes[0], sizes[1], sizes[2]);
        if w1.shape() != (h, i)
            || w2.shape() != (o, h)
            || b1.len() != h
            || b2.len() != o
            || input_shift.len() != i
            || input_scale.len() != i
        {
            return Err(r.err("inconsistent MLP layer shapes"));
        }
        Ok(MlpModel {
            w1,
            b1,
            w2,
            b2,
            learning_rate,
            input_shift,
            input_scale,
        })
    }
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[label] = 1.0;
    t
}

/// Trains a `in → hidden → classes` sigmoid network on squared error.
///
/// Initialization and sample order come from independent streams of one
/// seeded generator, so equal seeds give equal models.
pub fn mlp_train(
    xs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    config: &MlpConfig,
    epochs: usize,
    seed: u64,
) -> Result<MlpModel, BaselineError> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(BaselineError::ShapeMismatch(format!(
            "{} inputs and {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let inputs = xs[0].len();
    if xs.iter().any(|x| x.len() != inputs) {
        return Err(BaselineError::ShapeMismatch("inputs differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(BaselineError::ShapeMismatch(format!(
            "label {bad} outside {classes} output classes"
        )));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate < 1.0) || config.hidden == 0 {
        return Err(BaselineError::InvalidParameter(
            "learning rate must lie in (0, 1) and the hidden layer must be non-empty".into(),
        ));
    }

    let mut model = MlpModel::init(inputs, config.hidden, classes, config.learning_rate, seed);
    if config.standardize {
        let n = xs.len() as f64;
        for f in 0..inputs {
            let mean = xs.iter().map(|x| x[f]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[f] - mean).powi(2)).sum::<f64>() / n;
            model.input_shift[f] = mean;
            model.input_scale[f] = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }
    let inputs_n: Vec<Vec<f64>> = xs.iter().map(|x| model.normalized(x)).collect();
    let targets: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, classes)).collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let eta = config.learning_rate;
    for epoch in 0..epochs {
        let mut loss = 0.0;
        match config.mode {
            UpdateMode::Stochastic => {
                order.shuffle(&mut shuffle_rng);
                for &i in &order {
                    let (l, g) = model.loss_and_gradients(&inputs_n[i], &targets[i]);
                    loss += l;
                    model.apply(&g, eta);
                }
            }
            UpdateMode::FullBatch => {
                let mut acc = MlpGradients::zeros_like(&model);
                for (x, t) in inputs_n.iter().zip(&targets) {
                    let (l, g) = model.loss_and_gradients(x, t);
                    loss += l;
                    let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
                    add(acc.w1.as_mut_slice(), g.w1.as_slice());
                    add(&mut acc.b1, &g.b1);
                    add(acc.w2.as_mut_slice(), g.w2.as_slice());
                    add(&mut acc.b2, &g.b2);
                }
                model.apply(&acc, eta);
            }
        }
        if !loss.is_finite() {
            return Err(BaselineError::NonFiniteLoss { epoch });
        }
    }
    Ok(model)
}

/// Argmax of the output activations (lowest index on ties) and the activations.
pub fn mlp_classify(model: &MlpModel, x: &[f64]) -> Result<(usize, Vec<f64>), BaselineError> {
    let out = model.forward(x)?;
    Ok((crate::svm::argmax(&out), out))
}
