//! Identification protocol: stratified three-way splits, cross-validation
//! with extractors refit on every training portion, accuracy, and
//! cumulative match score curves.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::{self, BaselineError, KnnModel, MlpConfig, MlpModel};
use crate::imageio::{DataError, Dataset};
use crate::subspace::{ExtractorPipeline, PipelineConfig, SubspaceError};
use crate::svm::{self, KernelKind, KernelSpec, LabeledSet, OvaModel, SmoParams, SvmError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: char,
        #[source]
        source: Box<EvalError>,
    },
}

pub const FOLD_NAMES: [char; 3] = ['A', 'B', 'C'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    /// Fold index (0, 1, 2 for A, B, C) of every sample.
    pub folds: Vec<usize>,
}

impl SplitPlan {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Assigns samples to `parts` groups, class by class: each class's indices
/// are shuffled and dealt round-robin, continuing the rotation across
/// classes so group sizes stay balanced.
pub fn stratified_assignment(labels: &[usize], parts: usize, seed: u64) -> Vec<usize> {
    assert!(parts >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for class in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            out[i] = next;
            next = (next + 1) % parts;
        }
    }
    out
}

/// Stratified random partition into folds A, B and C.
pub fn make_splits(labels: &[usize], seed: u64) -> SplitPlan {
    SplitPlan {
        seed,
        folds: stratified_assignment(labels, 3, seed),
    }
}

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truths.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmsCurve {
    /// `rates[n − 1]`: fraction of queries whose truth is within the top `n`.
    pub rates: Vec<f64>,
}

pub fn cms_curve(ranked: &[Vec<usize>], truths: &[usize], max_rank: usize) -> Result<CmsCurve, EvalError> {
    if ranked.len() != truths.len() || truths.is_empty() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} ranked lists for {} truths",
            ranked.len(),
            truths.len()
        )));
    }
    if max_rank == 0 {
        return Err(EvalError::ShapeMismatch("max_rank must be at least 1".into()));
    }
    let mut hits = vec![0usize; max_rank];
    for (list, truth) in ranked.iter().zip(truths) {
        if let Some(pos) = list.iter().position(|l| l == truth) {
            if pos < max_rank {
                hits[pos] += 1;
            }
        }
    }
    let q = truths.len() as f64;
    let mut acc = 0;
    let rates = hits
        .iter()
        .map(|h| {
            acc += h;
            acc as f64 / q
        })
        .collect();
    Ok(CmsCurve { rates })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierSpec {
    /// One-vs-all SVM. Grids with more than one cell trigger a validation
    /// search on a stratified halving of the training data.
    Svm {
        kind: KernelKind,
        c_grid: Vec<f64>,
        sigma_grid: Vec<f64>,
        params: SmoParams,
    },
    Knn {
        k: usize,
    },
    Mlp {
        config: MlpConfig,
        epochs: usize,
    },
}

impl ClassifierSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierSpec::Svm { .. } => "svm",
            ClassifierSpec::Knn { .. } => "knn",
            ClassifierSpec::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub extractor: PipelineConfig,
    pub classifier: ClassifierSpec,
    /// Seeds inner splits and MLP initialization.
    pub seed: u64,
}

impl MethodSpec {
    /// Display name such as `wpca2d+svm`.
    pub fn name(&self) -> String {
        format!("{}+{}", self.extractor.variant.name(), self.classifier.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedClassifier {
    Svm(OvaModel),
    Knn(KnnModel),
    Mlp(MlpModel),
}

impl TrainedClassifier {
    /// Predicted label and all known labels ranked best first.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<usize>), EvalError> {
        match self {
            TrainedClassifier::Svm(m) => {
                let (label, scores) = svm::classify_ova(m, x)?;
                let ranked = svm::rank_descending(&scores)
                    .into_iter()
                    .map(|k| m.classes[k])
                    .collect();
                Ok((label, ranked))
            }
            TrainedClassifier::Knn(m) => Ok(baselines::knn_classify(m, x)?),
            TrainedClassifier::Mlp(m) => {
                let (label, out) = baselines::mlp_classify(m, x)?;
                Ok((label, svm::rank_descending(&out)))
            }
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            TrainedClassifier::Svm(m) => m.to_text(),
            TrainedClassifier::Knn(m) => m.to_text(),
            TrainedClassifier::Mlp(m) => m.to_text(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self, crate::serial::FormatError> {
        let header = text.lines().next().unwrap_or("").trim();
        match header {
            "SVM_OVA v1" => Ok(TrainedClassifier::Svm(OvaModel::from_text(text)?)),
            "KNN v1" => Ok(TrainedClassifier::Knn(KnnModel::from_text(text)?)),
            "MLP v1" => Ok(TrainedClassifier::Mlp(MlpModel::from_text(text)?)),
            other => Err(crate::serial::FormatError {
                line: 1,
                msg: format!("unknown classifier header `{other}`"),
            }),
        }
    }
}

/// Grid choice `(C, σ)` of an SVM run.
pub type Selected = Option<(f64, Option<f64>)>;

/// Fitted extractor and classifier, plus the grid choice when one ran.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMethod {
    pub pipeline: ExtractorPipeline,
    pub classifier: TrainedClassifier,
    pub selected: Selected,
}

impl TrainedMethod {
    pub fn predict(&self, img: &crate::imageio::GrayImage) -> Result<(usize, Vec<usize>), EvalError> {
        let f = self.pipeline.extract(img)?;
        self.classifier.predict(&f.values)
    }
}

/// Extracts features for every sample of `data`.
pub fn extract_all(pipeline: &ExtractorPipeline, data: &Dataset) -> Result<Vec<Vec<f64>>, EvalError> {
    data.samples()
        .iter()
        .map(|s| Ok(pipeline.extract(&s.image)?.values))
        .collect()
}

/// Trains a classifier on already-extracted features.
pub fn train_classifier(
    spec: &ClassifierSpec,
    xs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<(TrainedClassifier, Selected), EvalError> {
    match spec {
        ClassifierSpec::Svm {
            kind,
            c_grid,
            sigma_grid,
            params,
        } => {
            let cells = c_grid.len() * if *kind == KernelKind::Rbf { sigma_grid.len() } else { 1 };
            let (c, sigma) = if cells == 1 {
                (c_grid[0], sigma_grid.first().copied())
            } else {
                let halves = stratified_assignment(labels, 2, seed ^ 0x9e37_79b9_7f4a_7c15);
                let part = |h: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
                    (0..xs.len())
                        .filter(|&i| halves[i] == h)
                        .map(|i| (xs[i].clone(), labels[i]))
                        .unzip()
                };
                let (x0, l0) = part(0);
                let (x1, l1) = part(1);
                let s0 = LabeledSet { xs: &x0, labels: &l0 };
                let s1 = LabeledSet { xs: &x1, labels: &l1 };
                let r = svm::grid_search_multi(&[(s0, s1), (s1, s0)], c_grid, sigma_grid, *kind, params)?;
                log::info!(
                    "selected C={}, sigma={} (validation accuracy {:.4})",
                    r.c,
                    r.sigma.map_or("-".to_string(), |s| s.to_string()),
                    r.accuracy
                );
                (r.c, r.sigma)
            };
            let kernel = match kind {
                KernelKind::Linear => KernelSpec::Linear,
                KernelKind::Poly { degree } => KernelSpec::Poly { degree: *degree },
                KernelKind::Rbf => KernelSpec::Rbf {
                    sigma: sigma.ok_or_else(|| {
                        SvmError::InvalidParameter("RBF kernel needs a sigma".into())
                    })?,
                },
            };
            let model = svm::train_ova(xs, labels, &kernel, c, params)?;
            Ok((TrainedClassifier::Svm(model), Some((c, kernel.sigma()))))
        }
        ClassifierSpec::Knn { k } => {
            let gallery = xs.iter().cloned().zip(labels.iter().copied()).collect();
            Ok((TrainedClassifier::Knn(KnnModel::new(gallery, *k)?), None))
        }
        ClassifierSpec::Mlp { config, epochs } => {
            let m = baselines::mlp_train(xs, labels, class_count, config, *epochs, seed)?;
            Ok((TrainedClassifier::Mlp(m), None))
        }
    }
}

/// Fits extractor then classifier using only `train`.
pub fn fit_method(train: &Dataset, method: &MethodSpec, class_count: usize) -> Result<TrainedMethod, EvalError> {
    let pipeline = ExtractorPipeline::fit(train, &method.extractor)?;
    let xs = extract_all(&pipeline, train)?;
    let labels = train.labels();
    let (classifier, selected) =
        train_classifier(&method.classifier, &xs, &labels, class_count, method.seed)?;
    Ok(TrainedMethod {
        pipeline,
        classifier,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: char,
    pub accuracy: f64,
    pub selected: Selected,
    pub truths: Vec<usize>,
    pub predictions: Vec<usize>,
    pub ranked: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub method: String,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
}

impl CvReport {
    /// CMS curve over the queries of all folds.
    pub fn cms(&self, max_rank: usize) -> Result<CmsCurve, EvalError> {
        let ranked: Vec<Vec<usize>> = self.folds.iter().flat_map(|f| f.ranked.clone()).collect();
        let truths: Vec<usize> = self.folds.iter().flat_map(|f| f.truths.clone()).collect();
        cms_curve(&ranked, &truths, max_rank)
    }
}

/// Runs the three hold-one-fold-out rounds.
pub fn cross_validate(data: &Dataset, plan: &SplitPlan, method: &MethodSpec) -> Result<CvReport, EvalError> {
    if plan.folds.len() != data.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "split plan covers {} samples, dataset has {}",
            plan.folds.len(),
            data.len()
        )));
    }
    let mut folds = Vec::with_capacity(3);
    for (fold, &name) in FOLD_NAMES.iter().enumerate() {
        let tag = |e: EvalError| EvalError::Fold {
            fold: name,
            source: Box::new(e),
        };
        let train = data.subset(&plan.complement(fold)).map_err(|e| tag(e.into()))?;
        let test = data.subset(&plan.members(fold)).map_err(|e| tag(e.into()))?;
        let trained = fit_method(&train, method, data.class_count()).map_err(tag)?;
        let mut predictions = Vec::with_capacity(test.len());
        let mut ranked = Vec::with_capacity(test.len());
        for s in test.samples() {
            let (p, r) = trained.predict(&s.image).map_err(tag)?;
            predictions.push(p);
            ranked.push(r);
        }
        let truths = test.labels();
        let acc = accuracy(&predictions, &truths).map_err(tag)?;
        log::info!("{} fold {name}: accuracy {acc:.4}", method.name());
        folds.push(FoldResult {
            fold: name,
            accuracy: acc,
            selected: trained.selected,
            truths,
            predictions,
            ranked,
        });
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(CvReport {
        method: method.name(),
        folds,
        mean_accuracy,
    })
}

/// `method,fold,accuracy` rows, one per fold plus a `mean` row per report.
pub fn accuracy_csv(reports: &[CvReport]) -> String {
    let mut s = String::from("method,fold,accuracy\n");
    for r in reports {
        for f in &r.folds {
            let _ = writeln!(s, "{},{},{}", r.method, f.fold, f.accuracy);
        }
        let _ = writeln!(s, "{},mean,{}", r.method, r.mean_accuracy);
    }
    s
}

/// `method,rank,rate` rows.
pub fn cms_csv(curves: &[(String, CmsCurve)]) -> String {
    let mut s = String::from("method,rank,rate\n");
    for (method, c) in curves {
        for (i, rate) in c.rates.iter().enumerate() {
            let _ = writeln!(s, "{method},{},{rate}", i + 1);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn att_shaped_split() {
        let labels: Vec<usize> = (0..40).flat_map(|c| std::iter::repeat(c).take(10)).collect();
        let plan = make_splits(&labels, 7);
        assert_eq!(plan.folds.len(), 400);
        let sizes: Vec<usize> = (0..3).map(|f| plan.members(f).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 400);
        assert!(sizes.iter().all(|&s| (133..=134).contains(&s)));
        for c in 0..40 {
            let mut per: Vec<usize> = (0..3)
                .map(|f| plan.members(f).iter().filter(|&&i| labels[i] == c).count())
                .collect();
            per.sort_unstable();
            assert_eq!(per, vec![3, 3, 4]);
        }
        assert_eq!(make_splits(&labels, 7), plan);
        assert_ne!(make_splits(&labels, 8), plan);
    }

    #[test]
    fn three_samples_one_per_fold() {
        let plan = make_splits(&[5, 5, 5], 1);
        let mut f = plan.folds.clone();
        f.sort_unstable();
        assert_eq!(f, vec![0, 1, 2]);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn cms_examples() {
        let ranked = vec![vec![3, 1, 2], vec![1, 2, 3]];
        let c = cms_curve(&ranked, &[3, 3], 3).unwrap();
        assert_eq!(c.rates, vec![0.5, 0.5, 1.0]);
        assert!(cms_curve(&ranked, &[3], 3).is_err());
        assert!(cms_curve(&ranked, &[3, 3], 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = CvReport {
            method: "pca+knn".into(),
            folds: FOLD_NAMES
                .iter()
                .map(|&fold| FoldResult {
                    fold,
                    accuracy: 0.5,
                    selected: None,
                    truths: vec![0, 1],
                    predictions: vec![0, 0],
                    ranked: vec![vec![0, 1], vec![0, 1]],
                })
                .collect(),
            mean_accuracy: 0.5,
        };
        let csv = accuracy_csv(std::slice::from_ref(&report));
        assert_eq!(
            csv,
            "method,fold,accuracy\npca+knn,A,0.5\npca+knn,B,0.5\npca+knn,C,0.5\npca+knn,mean,0.5\n"
        );
        let curve = report.cms(2).unwrap();
        assert_eq!(curve.rates, vec![0.5, 1.0]);
        assert_eq!(
            cms_csv(&[("pca+knn".into(), curve)]),
            "method,rank,rate\npca+knn,1,0.5\npca+knn,2,1\n"
        );
    }
}
