//! Kernel support vector machines.
//!
//! The binary machine solves the dual
//!
//! ```text
//! min ½ αᵀHα − Σαᵢ   s.t.  0 ≤ αᵢ ≤ C,  Σ αᵢ yᵢ = 0,   Hᵢⱼ = yᵢ yⱼ K(xᵢ, xⱼ)
//! ```
//!
//! with SMO: each step picks the maximal violating pair and solves the
//! two-variable subproblem analytically, so the box and equality
//! constraints hold after every update. Multiclass problems use one
//! machine per class against the rest and predict by the largest raw score.

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{dot, squared_distance, Matrix};
use crate::serial::{fmt_real, FormatError, TextReader, TextWriter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all training labels belong to one class")]
    SingleClass,
    #[error("SMO did not converge after {iterations} pair updates (gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("no support vectors above the threshold")]
    NoSupportVectors,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("class {class}: {source}")]
    Class {
        class: usize,
        #[source]
        source: Box<SvmError>,
    },
    #[error("every grid cell failed; last error: {0}")]
    GridFailed(Box<SvmError>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `x·x′`
    Linear,
    /// `(x·x′ + 1)^degree`
    Poly { degree: u32 },
    /// `exp(−‖x − x′‖² / (2σ²))`
    Rbf { sigma: f64 },
}

/// Degree used for polynomial kernels unless configured otherwise.
pub const DEFAULT_POLY_DEGREE: u32 = 3;

impl KernelSpec {
    pub fn validate(&self) -> Result<(), SvmError> {
        match *self {
            KernelSpec::Poly { degree } if degree < 1 => Err(SvmError::InvalidParameter(
                "polynomial degree must be at least 1".into(),
            )),
            KernelSpec::Rbf { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                SvmError::InvalidParameter(format!("RBF sigma must be positive, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(x, y),
            KernelSpec::Poly { degree } => (dot(x, y) + 1.0).powi(degree as i32),
            KernelSpec::Rbf { sigma } => rbf_from_sqdist(squared_distance(x, y), sigma),
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            KernelSpec::Rbf { sigma } => Some(sigma),
            _ => None,
        }
    }

    fn write(&self) -> String {
        match *self {
            KernelSpec::Linear => "linear".into(),
            KernelSpec::Poly { degree } => format!("poly {degree}"),
            KernelSpec::Rbf { sigma } => format!("rbf {}", fmt_real(sigma)),
        }
    }

    fn parse(tokens: &[&str]) -> Option<KernelSpec> {
        match tokens {
            ["linear"] => Some(KernelSpec::Linear),
            ["poly", d] => d.parse().ok().map(|degree| KernelSpec::Poly { degree }),
            ["rbf", s] => s.parse().ok().map(|sigma| KernelSpec::Rbf { sigma }),
            _ => None,
        }
    }
}

#[inline]
fn rbf_from_sqdist(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64, SvmError> {
    if x.len() != y.len() {
        return Err(SvmError::ShapeMismatch(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(spec.eval_unchecked(x, y))
}

fn check_vectors(xs: &[Vec<f64>]) -> Result<usize, SvmError> {
    let m = xs
        .first()
        .map(|x| x.len())
        .ok_or_else(|| SvmError::ShapeMismatch("no training vectors".into()))?;
    if xs.iter().any(|x| x.len() != m) {
        return Err(SvmError::ShapeMismatch(
            "training vectors have differing lengths".into(),
        ));
    }
    Ok(m)
}

/// Symmetric kernel matrix `K(xᵢ, xⱼ)`, filled row-parallel; each entry is
/// computed independently so the result does not depend on scheduling.
pub fn kernel_matrix(spec: &KernelSpec, xs: &[Vec<f64>]) -> Result<Matrix, SvmError> {
    spec.validate()?;
    check_vectors(xs)?;
    let n = xs.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| spec.eval_unchecked(&xs[i], &xs[j])).collect())
        .collect();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // Mirror the upper triangle so K is exactly symmetric.
            let v = if j >= i { rows[i][j] } else { rows[j][i] };
            k.set(i, j, v);
        }
    }
    Ok(k)
}

/// Pairwise squared distances, shared by every RBF width in a grid search.
pub fn squared_distance_matrix(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Matrix {
    let rows: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| ys.iter().map(|y| squared_distance(x, y)).collect())
        .collect();
    let mut d = Matrix::zeros(xs.len(), ys.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            d.set(i, j, v);
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    h: Matrix,
}

impl GramMatrix {
    pub fn from_kernel(k: &Matrix, ys: &[i8]) -> Result<Self, SvmError> {
        let n = ys.len();
        if k.shape() != (n, n) {
            return Err(SvmError::ShapeMismatch(format!(
                "kernel matrix {:?} for {n} labels",
                k.shape()
            )));
        }
        let mut h = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                h.set(i, j, (ys[i] * ys[j]) as f64 * k.get(i, j));
            }
        }
        Ok(GramMatrix { h })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }
}

fn check_labels(ys: &[i8]) -> Result<(), SvmError> {
    if ys.iter().any(|&y| y != 1 && y != -1) {
        return Err(SvmError::InvalidParameter("labels must be -1 or +1".into()));
    }
    Ok(())
}

/// `Hᵢⱼ = yᵢ yⱼ K(xᵢ, xⱼ)`.
pub fn gram(spec: &KernelSpec, xs: &[Vec<f64>], ys: &[i8]) -> Result<GramMatrix, SvmError> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} vectors and {} labels",
            xs.len(),
            ys.len()
        )));
    }
    check_labels(ys)?;
    GramMatrix::from_kernel(&kernel_matrix(spec, xs)?, ys)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoParams {
    /// Stop once the maximal KKT violation gap drops below this.
    pub tol: f64,
    /// Pair-update cap; `None` means `100 · N · class_factor`.
    pub max_iter: Option<usize>,
    /// Multiplier folded into the default cap (number of classes in an OvA run).
    pub class_factor: usize,
}

impl Default for SmoParams {
    fn default() -> Self {
        SmoParams {
            tol: 1e-3,
            max_iter: None,
            class_factor: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Final maximal violation `m(α) − M(α)`.
    pub gap: f64,
}

/// Dual objective `½ αᵀHα − Σαᵢ`.
pub fn dual_objective(h: &Matrix, alphas: &[f64]) -> f64 {
    let ha = h.mul_vec(alphas).expect("square H");
    0.5 * dot(alphas, &ha) - alphas.iter().sum::<f64>()
}

const TAU: f64 = 1e-12;

#[inline]
fn in_up(y: i8, a: f64, c: f64) -> bool {
    (y > 0 && a < c) || (y < 0 && a > 0.0)
}

#[inline]
fn in_low(y: i8, a: f64, c: f64) -> bool {
    (y > 0 && a > 0.0) || (y < 0 && a < c)
}

/// Maximal violating pair `(i, j, gap)`; first index wins ties.
fn select_pair(ys: &[i8], alphas: &[f64], grad: &[f64], c: f64) -> Option<(usize, usize, f64)> {
    let mut i = None;
    let mut gmax = f64::NEG_INFINITY;
    let mut j = None;
    let mut gmin = f64::INFINITY;
    for t in 0..ys.len() {
        let v = -(ys[t] as f64) * grad[t];
        if in_up(ys[t], alphas[t], c) && v > gmax {
            gmax = v;
            i = Some(t);
        }
        if in_low(ys[t], alphas[t], c) && v < gmin {
            gmin = v;
            j = Some(t);
        }
    }
    Some((i?, j?, gmax - gmin))
}

/// Solves the dual QP by SMO with maximal-violating-pair selection.
pub fn solve_dual(h: &GramMatrix, ys: &[i8], c: f64, params: &SmoParams) -> Result<DualSolution, SvmError> {
    let n = ys.len();
    if h.len() != n || n == 0 {
        return Err(SvmError::ShapeMismatch(format!(
            "Gram matrix of size {} for {n} labels",
            h.len()
        )));
    }
    check_labels(ys)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(SvmError::InvalidParameter(format!("C must be positive, got {c}")));
    }
    if !(params.tol > 0.0) {
        return Err(SvmError::InvalidParameter("tol must be positive".into()));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(SvmError::SingleClass);
    }
    let q = &h.h;
    let cap = params
        .max_iter
        .unwrap_or(100 * n * params.class_factor.max(1));

    let mut alphas = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    while let Some((i, j, gap)) = select_pair(ys, &alphas, &grad, c) {
        if gap < params.tol {
            break;
        }
        if iterations >= cap {
            return Err(SvmError::NoConvergence { iterations, gap });
        }
        iterations += 1;

        let (old_i, old_j) = (alphas[i], alphas[j]);
        let (qii, qjj, qij) = (q.get(i, i), q.get(j, j), q.get(i, j));
        if ys[i] != ys[j] {
            let quad = qii + qjj + 2.0 * qij;
            let quad = if quad <= 0.0 { TAU } else { quad };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = old_i - old_j;
            let (mut ai, mut aj) = (old_i + delta, old_j + delta);
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
            alphas[i] = ai;
            alphas[j] = aj;
        } else {
            let quad = qii + qjj - 2.0 * qij;
            let quad = if quad <= 0.0 { TAU } else { quad };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = old_i + old_j;
            let (mut ai, mut aj) = (old_i - delta, old_j + delta);
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
            alphas[i] = ai;
            alphas[j] = aj;
        }

        let (di, dj) = (alphas[i] - old_i, alphas[j] - old_j);
        let (row_i, row_j) = (q.row(i), q.row(j));
        for t in 0..n {
            grad[t] += row_i[t] * di + row_j[t] * dj;
        }
    }

    let gap = select_pair(ys, &alphas, &grad, c).map_or(0.0, |p| p.2);
    // ½ αᵀHα − Σα = ½ Σ αᵢ (Gᵢ − 1) with G = Hα − 1.
    let objective = 0.5 * alphas.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();
    Ok(DualSolution {
        alphas,
        objective,
        iterations,
        gap,
    })
}

/// Support-vector threshold: the index set keeps `αᵢ > 1e-8 · C`.
pub fn support_threshold(c: f64) -> f64 {
    1e-8 * c
}

/// Bias as the average, over every support vector `i`, of
/// `yᵢ − Σⱼ αⱼ yⱼ K(xⱼ, xᵢ)` with both sums restricted to support vectors.
pub fn compute_bias(
    alphas: &[f64],
    ys: &[i8],
    xs: &[Vec<f64>],
    spec: &KernelSpec,
    c: f64,
) -> Result<f64, SvmError> {
    if alphas.len() != ys.len() || ys.len() != xs.len() {
        return Err(SvmError::ShapeMismatch("alphas, labels and vectors differ in length".into()));
    }
    let eps = support_threshold(c);
    let idx: Vec<usize> = (0..alphas.len()).filter(|&i| alphas[i] > eps).collect();
    if idx.is_empty() {
        return Err(SvmError::NoSupportVectors);
    }
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let s: f64 = idx
                .iter()
                .map(|&j| alphas[j] * ys[j] as f64 * spec.eval_unchecked(&xs[j], &xs[i]))
                .sum();
            ys[i] as f64 - s
        })
        .sum();
    Ok(total / idx.len() as f64)
}

/// Bias used for trained machines: the same support-vector average taken
/// over margin vectors (`ε < αᵢ < C − ε`). Vectors at the upper bound do not
/// satisfy `yᵢ f(xᵢ) = 1`, so they are left out. If every support vector is
/// at a bound, the midpoint of the interval allowed by the KKT conditions is used.
fn margin_bias(alphas: &[f64], ys: &[i8], k: &Matrix, c: f64) -> f64 {
    let n = alphas.len();
    let eps = support_threshold(c);
    // yᵢ − Σⱼ αⱼ yⱼ K(xⱼ, xᵢ) over all i
    let residual = |i: usize| -> f64 {
        let s: f64 = (0..n)
            .filter(|&j| alphas[j] > eps)
            .map(|j| alphas[j] * ys[j] as f64 * k.get(j, i))
            .sum();
        ys[i] as f64 - s
    };
    let free: Vec<usize> = (0..n)
        .filter(|&i| alphas[i] > eps && alphas[i] < c - eps)
        .collect();
    if !free.is_empty() {
        return free.iter().map(|&i| residual(i)).sum::<f64>() / free.len() as f64;
    }
    // b must satisfy yᵢ(sᵢ + b) ≥ 1 at αᵢ = 0 and ≤ 1 at αᵢ = C.
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..n {
        let r = residual(i);
        let at_upper = alphas[i] >= c - eps;
        match (ys[i] > 0, at_upper) {
            (true, false) | (false, true) => lo = lo.max(r),
            (false, false) | (true, true) => hi = hi.min(r),
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

/// Binary machine restricted to its support vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmBinaryModel {
    pub kernel: KernelSpec,
    pub c: f64,
    pub bias: f64,
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub labels: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBinary {
    pub model: SvmBinaryModel,
    /// Multipliers for every training point, in input order.
    pub alphas: Vec<f64>,
    pub solution: DualSolution,
}

pub fn train_binary(
    xs: &[Vec<f64>],
    ys: &[i8],
    spec: &KernelSpec,
    c: f64,
    params: &SmoParams,
) -> Result<TrainedBinary, SvmError> {
    if xs.len() != ys.len() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} vectors and {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let k = kernel_matrix(spec, xs)?;
    train_binary_with_kernel(xs, ys, &k, spec, c, params)
}

fn train_binary_with_kernel(
    xs: &[Vec<f64>],
    ys: &[i8],
    k: &Matrix,
    spec: &KernelSpec,
    c: f64,
    params: &SmoParams,
) -> Result<TrainedBinary, SvmError> {
    let (solution, bias) = solve_with_kernel(k, ys, c, params)?;
    let eps = support_threshold(c);
    let idx: Vec<usize> = (0..ys.len()).filter(|&i| solution.alphas[i] > eps).collect();
    let model = SvmBinaryModel {
        kernel: *spec,
        c,
        bias,
        support_vectors: idx.iter().map(|&i| xs[i].clone()).collect(),
        alphas: idx.iter().map(|&i| solution.alphas[i]).collect(),
        labels: idx.iter().map(|&i| ys[i]).collect(),
    };
    Ok(TrainedBinary {
        model,
        alphas: solution.alphas.clone(),
        solution,
    })
}

fn solve_with_kernel(
    k: &Matrix,
    ys: &[i8],
    c: f64,
    params: &SmoParams,
) -> Result<(DualSolution, f64), SvmError> {
    let h = GramMatrix::from_kernel(k, ys)?;
    let solution = solve_dual(&h, ys, c, params)?;
    let bias = margin_bias(&solution.alphas, ys, k, c);
    Ok((solution, bias))
}

impl SvmBinaryModel {
    /// Raw score `Σ αᵢ yᵢ K(xᵢ, x) + b`.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if let Some(sv) = self.support_vectors.first() {
            if sv.len() != x.len() {
                return Err(SvmError::ShapeMismatch(format!(
                    "input of length {} for a model trained on length {}",
                    x.len(),
                    sv.len()
                )));
            }
        }
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(self.alphas.iter().zip(&self.labels))
            .map(|(sv, (a, &y))| a * y as f64 * self.kernel.eval_unchecked(sv, x))
            .sum();
        Ok(s + self.bias)
    }
}

/// Sign of the raw score, with a zero score mapped to `+1`.
pub fn predict_binary(model: &SvmBinaryModel, x: &[f64]) -> Result<(i8, f64), SvmError> {
    let score = model.decision_value(x)?;
    Ok((if score >= 0.0 { 1 } else { -1 }, score))
}

/// One-vs-all model. Every per-class machine draws its support vectors from
/// the shared `vectors` table, so one kernel row per query serves all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaModel {
    pub kernel: KernelSpec,
    pub c: f64,
    /// Class label of each machine, ascending.
    pub classes: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub machines: Vec<OvaMachine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvaMachine {
    pub bias: f64,
    /// `(index into vectors, αᵢ · yᵢ)`
    pub terms: Vec<(usize, f64)>,
}

/// Dense per-class solution over the training set, before compaction.
#[derive(Debug, Clone)]
struct OvaFit {
    classes: Vec<usize>,
    /// `coefs[k][i] = αᵢ yᵢ` for machine k
    coefs: Vec<Vec<f64>>,
    biases: Vec<f64>,
    alphas: Vec<Vec<f64>>,
}

impl OvaFit {
    fn scores(&self, krow: &[f64]) -> Vec<f64> {
        self.coefs
            .iter()
            .zip(&self.biases)
            .map(|(coef, b)| dot(coef, krow) + b)
            .collect()
    }

    fn into_model(self, xs: &[Vec<f64>], spec: &KernelSpec, c: f64) -> OvaModel {
        let n = xs.len();
        let eps = support_threshold(c);
        let used: Vec<bool> = (0..n)
            .map(|i| self.alphas.iter().any(|a| a[i] > eps))
            .collect();
        let mut remap = vec![usize::MAX; n];
        let mut vectors = Vec::new();
        for i in 0..n {
            if used[i] {
                remap[i] = vectors.len();
                vectors.push(xs[i].clone());
            }
        }
        let machines = self
            .coefs
            .iter()
            .zip(&self.alphas)
            .zip(&self.biases)
            .map(|((coef, alpha), &bias)| OvaMachine {
                bias,
                terms: (0..n)
                    .filter(|&i| alpha[i] > eps)
                    .map(|i| (remap[i], coef[i]))
                    .collect(),
            })
            .collect();
        OvaModel {
            kernel: *spec,
            c,
            classes: self.classes,
            vectors,
            machines,
        }
    }
}

/// Relabels for class `k`: `+1` for members, `−1` otherwise.
pub fn one_vs_all_labels(labels: &[usize], k: usize) -> Vec<i8> {
    labels.iter().map(|&l| if l == k { 1 } else { -1 }).collect()
}

fn distinct_classes(labels: &[usize]) -> Vec<usize> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn fit_ova_kernel(k: &Matrix, labels: &[usize], c: f64, params: &SmoParams) -> Result<OvaFit, SvmError> {
    let classes = distinct_classes(labels);
    if classes.len() < 2 {
        return Err(SvmError::SingleClass);
    }
    let params = SmoParams {
        class_factor: classes.len(),
        ..*params
    };
    let results: Vec<Result<(Vec<f64>, f64, Vec<f64>), SvmError>> = classes
        .par_iter()
        .map(|&class| {
            let ys = one_vs_all_labels(labels, class);
            let (sol, bias) = solve_with_kernel(k, &ys, c, &params).map_err(|e| SvmError::Class {
                class,
                source: Box::new(e),
            })?;
            let coef = sol.alphas.iter().zip(&ys).map(|(a, &y)| a * y as f64).collect();
            Ok((coef, bias, sol.alphas))
        })
        .collect();
    let mut fit = OvaFit {
        classes,
        coefs: Vec::new(),
        biases: Vec::new(),
        alphas: Vec::new(),
    };
    for r in results {
        let (coef, bias, alphas) = r?;
        fit.coefs.push(coef);
        fit.biases.push(bias);
        fit.alphas.push(alphas);
    }
    Ok(fit)
}

/// Trains one machine per distinct label (class `k` against the rest).
pub fn train_ova(
    xs: &[Vec<f64>],
    labels: &[usize],
    spec: &KernelSpec,
    c: f64,
    params: &SmoParams,
) -> Result<OvaModel, SvmError> {
    if xs.len() != labels.len() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} vectors and {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let k = kernel_matrix(spec, xs)?;
    let fit = fit_ova_kernel(&k, labels, c, params)?;
    Ok(fit.into_model(xs, spec, c))
}

/// Indices of `scores` sorted by descending score, lower index first on ties.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

impl OvaModel {
    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(|v| v.len())
    }

    /// Raw score of every machine, in `classes` order.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>, SvmError> {
        if let Some(m) = self.dim() {
            if m != x.len() {
                return Err(SvmError::ShapeMismatch(format!(
                    "input of length {} for a model trained on length {m}",
                    x.len()
                )));
            }
        }
        let krow: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| self.kernel.eval_unchecked(v, x))
            .collect();
        Ok(self
            .machines
            .iter()
            .map(|m| m.terms.iter().map(|&(i, coef)| coef * krow[i]).sum::<f64>() + m.bias)
            .collect())
    }

    /// Labels ordered by descending score.
    pub fn ranked_labels(&self, x: &[f64]) -> Result<Vec<usize>, SvmError> {
        let scores = self.scores(x)?;
        Ok(rank_descending(&scores)
            .into_iter()
            .map(|k| self.classes[k])
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new("SVM_OVA v1");
        w.field("kernel", self.kernel.write());
        w.real("c", self.c);
        let labels: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        w.field("classes", format!("{} {}", self.classes.len(), labels.join(" ")));
        let dim = self.dim().unwrap_or(0);
        let mut table = Matrix::zeros(self.vectors.len(), dim);
        for (i, v) in self.vectors.iter().enumerate() {
            table.as_mut_slice()[i * dim..(i + 1) * dim].copy_from_slice(v);
        }
        w.matrix("vectors", &table);
        for (class, m) in self.classes.iter().zip(&self.machines) {
            w.field("class", class);
            w.real("bias", m.bias);
            w.field("terms", m.terms.len());
            for &(i, coef) in &m.terms {
                w.line(&format!("{i} {}", fmt_real(coef)));
            }
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let mut r = TextReader::new(text);
        r.expect_header("SVM_OVA v1")?;
        let toks = r.tokens("kernel")?;
        let kernel = KernelSpec::parse(&toks).ok_or_else(|| r.err("bad kernel spec"))?;
        kernel.validate().map_err(|e| r.err(e.to_string()))?;
        let c: f64 = r.field("c")?;
        let toks = r.tokens("classes")?;
        let count: usize = toks
            .first()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| r.err("bad class count"))?;
        let classes = toks[1..]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| r.err("bad class label"))?;
        if classes.len() != count {
            return Err(r.err("class count does not match label list"));
        }
        let table = r.matrix("vectors")?;
        let vectors: Vec<Vec<f64>> = (0..table.rows()).map(|i| table.row(i).to_vec()).collect();
        let mut machines = Vec::with_capacity(count);
        for &expected in &classes {
            let class: usize = r.field("class")?;
            if class != expected {
                return Err(r.err(format!("expected class {expected}, found {class}")));
            }
            let bias: f64 = r.field("bias")?;
            let nterms: usize = r.field("terms")?;
            let mut terms = Vec::with_capacity(nterms);
            for _ in 0..nterms {
                let l = r.next_line()?;
                let mut it = l.split_whitespace();
                let idx: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .filter(|&i| i < vectors.len())
                    .ok_or_else(|| r.err("bad support-vector index"))?;
                let coef: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| r.err("bad coefficient"))?;
                terms.push((idx, coef));
            }
            machines.push(OvaMachine { bias, terms });
        }
        Ok(OvaModel {
            kernel,
            c,
            classes,
            vectors,
            machines,
        })
    }
}

/// Predicted label (largest raw score, lowest class on ties) and all scores.
pub fn classify_ova(model: &OvaModel, x: &[f64]) -> Result<(usize, Vec<f64>), SvmError> {
    let scores = model.scores(x)?;
    let best = argmax(&scores);
    Ok((model.classes[best], scores))
}

/// First index of the maximum.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Kernel family searched by [`grid_search`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Linear,
    Poly { degree: u32 },
    Rbf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub c: f64,
    pub sigma: Option<f64>,
    /// `None` when training failed for this cell.
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub c: f64,
    pub sigma: Option<f64>,
    pub accuracy: f64,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn kernel(&self, kind: KernelKind) -> KernelSpec {
        match kind {
            KernelKind::Linear => KernelSpec::Linear,
            KernelKind::Poly { degree } => KernelSpec::Poly { degree },
            KernelKind::Rbf => KernelSpec::Rbf {
                sigma: self.sigma.expect("RBF grid result carries sigma"),
            },
        }
    }
}

/// `2^lo, 2^(lo+1), …, 2^hi`
pub fn power_of_two_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 2f64.powi(e)).collect()
}

/// Default C grid: 2⁻⁵ … 2¹⁴.
pub fn default_c_grid() -> Vec<f64> {
    power_of_two_grid(-5, 14)
}

/// Default RBF width grid: 2⁻¹⁵ … 2³.
pub fn default_sigma_grid() -> Vec<f64> {
    power_of_two_grid(-15, 3)
}

/// A labelled set of feature vectors.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub xs: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

/// Picks `(C, σ)` by validation accuracy, preferring smaller C and then
/// smaller σ on ties. `sigma_grid` is ignored for non-RBF kernels. Cells
/// whose training fails are skipped.
pub fn grid_search(
    train: LabeledSet<'_>,
    validation: LabeledSet<'_>,
    c_grid: &[f64],
    sigma_grid: &[f64],
    kind: KernelKind,
    params: &SmoParams,
) -> Result<GridResult, SvmError> {
    grid_search_multi(&[(train, validation)], c_grid, sigma_grid, kind, params)
}

/// Like [`grid_search`], scoring each cell by the total number of correct
/// validation predictions over several (train, validation) splits.
pub fn grid_search_multi(
    splits: &[(LabeledSet<'_>, LabeledSet<'_>)],
    c_grid: &[f64],
    sigma_grid: &[f64],
    kind: KernelKind,
    params: &SmoParams,
) -> Result<GridResult, SvmError> {
    if c_grid.is_empty() || (kind == KernelKind::Rbf && sigma_grid.is_empty()) || splits.is_empty() {
        return Err(SvmError::InvalidParameter("empty grid".into()));
    }
    for (t, v) in splits {
        if t.xs.len() != t.labels.len() || v.xs.len() != v.labels.len() {
            return Err(SvmError::ShapeMismatch("vectors and labels differ in length".into()));
        }
        check_vectors(t.xs)?;
    }
    let sigmas: Vec<Option<f64>> = match kind {
        KernelKind::Rbf => sigma_grid.iter().map(|&s| Some(s)).collect(),
        _ => vec![None],
    };
    for s in sigmas.iter().flatten() {
        KernelSpec::Rbf { sigma: *s }.validate()?;
    }

    let distances: Vec<(Matrix, Matrix)> = splits
        .iter()
        .map(|(t, v)| (squared_distance_matrix(t.xs, t.xs), squared_distance_matrix(v.xs, t.xs)))
        .collect();

    let per_sigma: Vec<Vec<(GridCell, Option<SvmError>)>> = sigmas
        .par_iter()
        .map(|&sigma| {
            let spec = match (kind, sigma) {
                (KernelKind::Rbf, Some(s)) => KernelSpec::Rbf { sigma: s },
                (KernelKind::Poly { degree }, _) => KernelSpec::Poly { degree },
                _ => KernelSpec::Linear,
            };
            let kernels: Vec<(Matrix, Matrix)> = splits
                .iter()
                .zip(&distances)
                .map(|((t, v), (dtt, dvt))| match spec {
                    KernelSpec::Rbf { sigma } => {
                        let f = |d: &Matrix| {
                            let mut m = d.clone();
                            m.as_mut_slice()
                                .iter_mut()
                                .for_each(|x| *x = rbf_from_sqdist(*x, sigma));
                            m
                        };
                        (f(dtt), f(dvt))
                    }
                    _ => (
                        kernel_matrix(&spec, t.xs).expect("validated"),
                        cross_kernel(&spec, v.xs, t.xs),
                    ),
                })
                .collect();
            c_grid
                .iter()
                .map(|&c| {
                    let mut correct = 0;
                    for ((t, v), (ktt, kvt)) in splits.iter().zip(&kernels) {
                        match fit_ova_kernel(ktt, t.labels, c, params) {
                            Ok(fit) => {
                                for (q, &truth) in v.labels.iter().enumerate() {
                                    let scores = fit.scores(kvt.row(q));
                                    if fit.classes[argmax(&scores)] == truth {
                                        correct += 1;
                                    }
                                }
                            }
                            Err(e) => {
                                return (
                                    GridCell {
                                        c,
                                        sigma,
                                        correct: None,
                                    },
                                    Some(e),
                                )
                            }
                        }
                    }
                    (
                        GridCell {
                            c,
                            sigma,
                            correct: Some(correct),
                        },
                        None,
                    )
                })
                .collect()
        })
        .collect();

    let total: usize = splits.iter().map(|(_, v)| v.labels.len()).sum();
    let mut best: Option<&GridCell> = None;
    let mut last_err = None;
    let mut cells = Vec::new();
    for (cell, err) in per_sigma.iter().flatten() {
        if let Some(e) = err {
            log::debug!("grid cell C={} sigma={:?} failed: {e}", cell.c, cell.sigma);
            last_err = Some(e.clone());
        }
        cells.push(cell.clone());
    }
    for cell in &cells {
        let Some(correct) = cell.correct else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bc = b.correct.unwrap_or(0);
                correct > bc
                    || (correct == bc
                        && (cell.c < b.c
                            || (cell.c == b.c && cell.sigma.unwrap_or(0.0) < b.sigma.unwrap_or(0.0))))
            }
        };
        if better {
            best = Some(cell);
        }
    }
    let best = best.ok_or_else(|| {
        SvmError::GridFailed(Box::new(last_err.unwrap_or(SvmError::InvalidParameter(
            "no cells".into(),
        ))))
    })?;
    Ok(GridResult {
        c: best.c,
        sigma: best.sigma,
        accuracy: if total == 0 {
            0.0
        } else {
            best.correct.unwrap_or(0) as f64 / total as f64
        },
        cells,
    })
}

fn cross_kernel(spec: &KernelSpec, queries: &[Vec<f64>], train: &[Vec<f64>]) -> Matrix {
    let rows: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| train.iter().map(|t| spec.eval_unchecked(t, q)).collect())
        .collect();
    let mut m = Matrix::zeros(queries.len(), train.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&[f64]]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| x.to_vec()).collect()
    }

    #[test]
    fn kernel_examples() {
        let poly = KernelSpec::Poly { degree: 3 };
        assert_eq!(kernel_eval(&poly, &[1.0, 0.0], &[1.0, 1.0]).unwrap(), 8.0);
        let rbf = KernelSpec::Rbf { sigma: 1.0 };
        assert_eq!(kernel_eval(&rbf, &[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        let k = kernel_eval(&rbf, &[0.0], &[2.0]).unwrap();
        assert!((k - (-2f64).exp()).abs() < 1e-15);
        assert!((k - 0.135335).abs() < 1e-6);
        assert!(kernel_eval(&rbf, &[0.0], &[0.0, 1.0]).is_err());
        assert!(KernelSpec::Rbf { sigma: 0.0 }.validate().is_err());
        assert!(KernelSpec::Poly { degree: 0 }.validate().is_err());
    }

    #[test]
    fn gram_examples() {
        let h = gram(&KernelSpec::Linear, &v(&[&[1.0], &[-1.0]]), &[1, -1]).unwrap();
        assert_eq!(h.matrix(), &Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let x = v(&[&[0.5, 2.0]]);
        let h = gram(&KernelSpec::Poly { degree: 3 }, &x, &[1]).unwrap();
        assert_eq!(h.matrix().get(0, 0), (4.25f64 + 1.0).powi(3));
        let xs = v(&[&[0.0, 1.0], &[3.0, 1.0], &[-2.0, 0.5]]);
        let h = gram(&KernelSpec::Rbf { sigma: 0.7 }, &xs, &[1, -1, -1]).unwrap();
        for i in 0..3 {
            assert_eq!(h.matrix().get(i, i), 1.0);
        }
        assert_eq!(h.matrix().max_asymmetry(), 0.0);
        assert!(gram(&KernelSpec::Linear, &xs, &[1, -1]).is_err());
    }

    #[test]
    fn two_point_dual() {
        let xs = v(&[&[-1.0], &[1.0]]);
        let ys = [-1, 1];
        let h = gram(&KernelSpec::Linear, &xs, &ys).unwrap();
        let sol = solve_dual(&h, &ys, 10.0, &SmoParams::default()).unwrap();
        assert!((sol.alphas[0] - 0.5).abs() < 1e-12);
        assert!((sol.alphas[1] - 0.5).abs() < 1e-12);
        assert!((sol.objective + 0.5).abs() < 1e-12);
        let b = compute_bias(&sol.alphas, &ys, &xs, &KernelSpec::Linear, 10.0).unwrap();
        assert!(b.abs() < 1e-12);

        let t = train_binary(&xs, &ys, &KernelSpec::Linear, 10.0, &SmoParams::default()).unwrap();
        let (label, score) = predict_binary(&t.model, &[0.7]).unwrap();
        assert_eq!(label, 1);
        assert!((score - 0.7).abs() < 1e-12);
        let (_, margin) = predict_binary(&t.model, &[1.0]).unwrap();
        assert!((margin - 1.0).abs() < 1e-3);
    }

    #[test]
    fn translated_two_point_bias() {
        let xs = v(&[&[0.0], &[2.0]]);
        let ys = [-1, 1];
        let t = train_binary(&xs, &ys, &KernelSpec::Linear, 10.0, &SmoParams::default()).unwrap();
        let b = compute_bias(&t.alphas, &ys, &xs, &KernelSpec::Linear, 10.0).unwrap();
        assert!((b + 1.0).abs() < 1e-12);
        assert!((t.model.bias + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_support_vector_bias() {
        let xs = v(&[&[2.0], &[5.0]]);
        let ys = [1, -1];
        let b = compute_bias(&[0.25, 0.0], &ys, &xs, &KernelSpec::Linear, 1.0).unwrap();
        assert_eq!(b, 1.0 - 0.25 * 4.0);
        assert_eq!(
            compute_bias(&[0.0, 0.0], &ys, &xs, &KernelSpec::Linear, 1.0),
            Err(SvmError::NoSupportVectors)
        );
    }

    #[test]
    fn tiny_c_bounds_alphas() {
        let xs = v(&[&[-1.0], &[1.0], &[0.5]]);
        let ys = [-1, 1, -1];
        let h = gram(&KernelSpec::Linear, &xs, &ys).unwrap();
        let sol = solve_dual(&h, &ys, 1e-9, &SmoParams::default()).unwrap();
        assert!(sol.alphas.iter().all(|&a| (0.0..=1e-9).contains(&a)));
    }

    #[test]
    fn single_class_rejected() {
        let h = gram(&KernelSpec::Linear, &v(&[&[1.0], &[2.0]]), &[1, 1]).unwrap();
        assert_eq!(
            solve_dual(&h, &[1, 1], 1.0, &SmoParams::default()),
            Err(SvmError::SingleClass)
        );
        assert!(matches!(
            train_ova(&v(&[&[1.0], &[2.0]]), &[3, 3], &KernelSpec::Linear, 1.0, &SmoParams::default()),
            Err(SvmError::SingleClass)
        ));
    }

    #[test]
    fn zero_score_predicts_positive() {
        let model = SvmBinaryModel {
            kernel: KernelSpec::Linear,
            c: 1.0,
            bias: 0.0,
            support_vectors: vec![vec![1.0]],
            alphas: vec![1.0],
            labels: vec![1],
        };
        assert_eq!(predict_binary(&model, &[0.0]).unwrap(), (1, 0.0));
        assert!(predict_binary(&model, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[0.2, 0.9, -1.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(rank_descending(&[0.1, 0.5, 0.5, -2.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn grid_tie_prefers_small_c() {
        let xs = v(&[&[-2.0], &[-1.0], &[1.0], &[2.0]]);
        let labels = [0, 0, 1, 1];
        let set = LabeledSet { xs: &xs, labels: &labels };
        let r = grid_search(set, set, &[4.0, 1.0, 2.0], &[], KernelKind::Linear, &SmoParams::default())
            .unwrap();
        assert_eq!(r.c, 1.0);
        assert_eq!(r.accuracy, 1.0);
        let r = grid_search(set, set, &[3.0], &[], KernelKind::Linear, &SmoParams::default()).unwrap();
        assert_eq!(r.c, 3.0);
        assert!(grid_search(set, set, &[], &[], KernelKind::Linear, &SmoParams::default()).is_err());
    }

    #[test]
    fn ova_serialization_round_trip() {
        let xs = v(&[&[0.0, 0.0], &[0.2, 0.1], &[3.0, 3.0], &[3.1, 2.9], &[-3.0, 3.0], &[-2.8, 3.2]]);
        let labels = [0, 0, 1, 1, 2, 2];
        let m = train_ova(&xs, &labels, &KernelSpec::Rbf { sigma: 1.5 }, 10.0, &SmoParams::default())
            .unwrap();
        let back = OvaModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        for x in &xs {
            assert_eq!(back.scores(x).unwrap(), m.scores(x).unwrap());
        }
    }
}
