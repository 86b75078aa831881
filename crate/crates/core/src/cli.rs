//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. Flags override values read from `--config FILE`, a `key = value`
//! file using the long flag names as keys.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::baselines::{BaselineError, MlpConfig, UpdateMode};
use crate::eval::{self, ClassifierSpec, EvalError, MethodSpec, TrainedClassifier};
use crate::imageio::{self, DataError, Dataset};
use crate::linalg::LinalgError;
use crate::serial::FormatError;
use crate::subspace::{ComponentCount, ExtractorPipeline, PipelineConfig, SubspaceError, Variant};
use crate::svm::{self, KernelKind, SmoParams, SvmError, DEFAULT_POLY_DEGREE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::ShapeMismatch(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SubspaceError> for CliError {
    fn from(e: SubspaceError) -> Self {
        match e {
            SubspaceError::Linalg(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SvmError> for CliError {
    fn from(e: SvmError) -> Self {
        fn numeric(e: &SvmError) -> bool {
            match e {
                SvmError::NoConvergence { .. } => true,
                SvmError::Class { source, .. } | SvmError::GridFailed(source) => numeric(source),
                _ => false,
            }
        }
        if numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(e) => e.into(),
            EvalError::Subspace(e) => e.into(),
            EvalError::Svm(e) => e.into(),
            EvalError::Baseline(e) => e.into(),
            EvalError::Fold { fold, source } => match CliError::from(*source) {
                CliError::Config(m) => CliError::Config(format!("fold {fold}: {m}")),
                CliError::Data(m) => CliError::Data(format!("fold {fold}: {m}")),
                CliError::Numeric(m) => CliError::Numeric(format!("fold {fold}: {m}")),
            },
            EvalError::ShapeMismatch(m) => CliError::Data(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "facesvm", version, about = "Face identification with weighted 2DPCA and kernel SVMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a feature extractor on a manifest and write `pipeline.txt`.
    FitExtractor(Options),
    /// Write extracted feature vectors as `features.csv`.
    Extract(Options),
    /// Train a classifier on extracted features and write `model.txt`.
    Train(Options),
    /// Classify every manifest image and write `predictions.csv`.
    Predict(Options),
    /// Three-fold cross-validation; writes `accuracy.csv` and `cms.csv`.
    Evaluate(Options),
    /// Cumulative match scores of a trained model on a manifest; writes `cms.csv`.
    Cms(Options),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// `key = value` file providing defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Feature extractor: `pca` or `wpca2d`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Number of 2DPCA projection axes.
    #[arg(long)]
    pub d: Option<usize>,
    /// Final feature dimension: an integer, `auto` (95% variance) or `var:<fraction>`.
    #[arg(long = "k-final")]
    pub k_final: Option<String>,
    /// Kernel: `linear`, `poly` or `rbf`.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub degree: Option<u32>,
    /// Comma-separated widths or a power-of-two range such as `2^-15..2^3`.
    #[arg(long = "sigma-grid")]
    pub sigma_grid: Option<String>,
    /// Comma-separated values or a power-of-two range such as `2^-5..2^14`.
    #[arg(long = "c-grid")]
    pub c_grid: Option<String>,
    /// Classifier: `svm`, `knn` or `mlp`.
    #[arg(long)]
    pub classifier: Option<String>,
    /// Neighbour count for k-NN.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fitted extractor file (`PIPELINE v1`).
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// Trained classifier file (`SVM_OVA v1`, `KNN v1` or `MLP v1`).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "max-rank")]
    pub max_rank: Option<usize>,
    /// MLP training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// MLP learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// MLP hidden layer width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// SMO stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

fn read_config_file(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected key = value", path.display(), n + 1))
        })?;
        let v = v.trim().trim_matches('"').to_string();
        map.insert(k.trim().replace('_', "-"), v);
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("invalid value `{v}` for `{key}`")))
}

impl Options {
    /// Fills every unset flag from the config file, if one was given.
    pub fn resolve(mut self) -> Result<Options, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let map = read_config_file(&path)?;
        for (key, v) in &map {
            match key.as_str() {
                "manifest" => fill(&mut self.manifest, || Ok(PathBuf::from(v)))?,
                "variant" => fill(&mut self.variant, || Ok(v.clone()))?,
                "d" => fill(&mut self.d, || parse_value(key, v))?,
                "k-final" => fill(&mut self.k_final, || Ok(v.clone()))?,
                "kernel" => fill(&mut self.kernel, || Ok(v.clone()))?,
                "degree" => fill(&mut self.degree, || parse_value(key, v))?,
                "sigma-grid" => fill(&mut self.sigma_grid, || Ok(v.clone()))?,
                "c-grid" => fill(&mut self.c_grid, || Ok(v.clone()))?,
                "classifier" => fill(&mut self.classifier, || Ok(v.clone()))?,
                "k" => fill(&mut self.k, || parse_value(key, v))?,
                "seed" => fill(&mut self.seed, || parse_value(key, v))?,
                "out" => fill(&mut self.out, || Ok(PathBuf::from(v)))?,
                "pipeline" => fill(&mut self.pipeline, || Ok(PathBuf::from(v)))?,
                "model" => fill(&mut self.model, || Ok(PathBuf::from(v)))?,
                "max-rank" => fill(&mut self.max_rank, || parse_value(key, v))?,
                "epochs" => fill(&mut self.epochs, || parse_value(key, v))?,
                "eta" => fill(&mut self.eta, || parse_value(key, v))?,
                "hidden" => fill(&mut self.hidden, || parse_value(key, v))?,
                "tol" => fill(&mut self.tol, || parse_value(key, v))?,
                other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(self)
    }

    fn existing_path(&self, value: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
        let p = value
            .clone()
            .ok_or_else(|| CliError::Config(format!("--{flag} is required")))?;
        if !p.exists() {
            return Err(CliError::Config(format!("{} not found: {}", flag, p.display())));
        }
        Ok(p)
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .ok_or_else(|| CliError::Config("--out is required".into()))?;
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn load_manifest(&self) -> Result<Dataset, CliError> {
        let path = self.existing_path(&self.manifest, "manifest")?;
        Ok(imageio::load_manifest(&path)?)
    }

    fn load_pipeline(&self) -> Result<ExtractorPipeline, CliError> {
        let path = self.existing_path(&self.pipeline, "pipeline")?;
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(ExtractorPipeline::from_text(&text)?)
    }

    fn load_model(&self) -> Result<TrainedClassifier, CliError> {
        let path = self.existing_path(&self.model, "model")?;
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(TrainedClassifier::from_text(&text)?)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let variant: Variant = self
            .variant
            .as_deref()
            .unwrap_or("wpca2d")
            .parse()
            .map_err(CliError::Config)?;
        let k_final = match self.k_final.as_deref() {
            None | Some("auto") => ComponentCount::default(),
            Some(s) => match s.strip_prefix("var:") {
                Some(f) => {
                    let frac: f64 = parse_value("k-final", f)?;
                    if !(frac > 0.0 && frac <= 1.0) {
                        return Err(CliError::Config("variance fraction must lie in (0, 1]".into()));
                    }
                    ComponentCount::Variance(frac)
                }
                None => ComponentCount::Fixed(parse_value("k-final", s)?),
            },
        };
        Ok(PipelineConfig {
            variant,
            d: self.d.unwrap_or(20),
            k_final,
        })
    }

    pub fn classifier_spec(&self) -> Result<ClassifierSpec, CliError> {
        match self.classifier.as_deref().unwrap_or("svm") {
            "svm" => {
                let kind = match self.kernel.as_deref().unwrap_or("rbf") {
                    "linear" => KernelKind::Linear,
                    "poly" => KernelKind::Poly {
                        degree: self.degree.unwrap_or(DEFAULT_POLY_DEGREE),
                    },
                    "rbf" => KernelKind::Rbf,
                    other => return Err(CliError::Config(format!("unknown kernel `{other}`"))),
                };
                if let KernelKind::Poly { degree: 0 } = kind {
                    return Err(CliError::Config("--degree must be at least 1".into()));
                }
                let c_grid = match &self.c_grid {
                    Some(s) => parse_grid(s)?,
                    None => svm::default_c_grid(),
                };
                let sigma_grid = match &self.sigma_grid {
                    Some(s) => parse_grid(s)?,
                    None => svm::default_sigma_grid(),
                };
                let mut params = SmoParams::default();
                if let Some(t) = self.tol {
                    if !(t > 0.0) {
                        return Err(CliError::Config("--tol must be positive".into()));
                    }
                    params.tol = t;
                }
                Ok(ClassifierSpec::Svm {
                    kind,
                    c_grid,
                    sigma_grid,
                    params,
                })
            }
            "knn" => {
                let k = self.k.unwrap_or(1);
                if k == 0 {
                    return Err(CliError::Config("--k must be at least 1".into()));
                }
                Ok(ClassifierSpec::Knn { k })
            }
            "mlp" => {
                let eta = self.eta.unwrap_or(0.5);
                if !(eta > 0.0 && eta < 1.0) {
                    return Err(CliError::Config("--eta must lie in (0, 1)".into()));
                }
                Ok(ClassifierSpec::Mlp {
                    config: MlpConfig {
                        hidden: self.hidden.unwrap_or(100),
                        learning_rate: eta,
                        mode: UpdateMode::Stochastic,
                        standardize: true,
                    },
                    epochs: self.epochs.unwrap_or(200),
                })
            }
            other => Err(CliError::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

fn fill<T>(slot: &mut Option<T>, value: impl FnOnce() -> Result<T, CliError>) -> Result<(), CliError> {
    if slot.is_none() {
        *slot = Some(value()?);
    }
    Ok(())
}

fn parse_power(s: &str) -> Result<i32, CliError> {
    s.trim()
        .strip_prefix("2^")
        .and_then(|e| e.parse().ok())
        .ok_or_else(|| CliError::Config(format!("expected 2^<exponent>, found `{s}`")))
}

/// Parses `a,b,c` or `2^lo..2^hi`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let grid = if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (parse_power(lo)?, parse_power(hi)?);
        if lo > hi {
            return Err(CliError::Config(format!("empty grid `{s}`")));
        }
        svm::power_of_two_grid(lo, hi)
    } else {
        s.split(',')
            .map(|t| {
                let t = t.trim();
                if t.starts_with("2^") {
                    parse_power(t).map(|e| 2f64.powi(e))
                } else {
                    parse_value("grid", t)
                }
            })
            .collect::<Result<Vec<f64>, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(CliError::Config(format!("grid `{s}` must hold positive values")));
    }
    Ok(grid)
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1
        .write_all(contents)
        .and_then(|_| tmp.1.sync_all())
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    fs::rename(&tmp.0, path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(PathBuf, fs::File), CliError> {
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let f = fs::File::create(&tmp)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", tmp.display())))?;
    Ok((tmp, f))
}

pub fn cmd_fit_extractor(opts: &Options) -> Result<PathBuf, CliError> {
    let cfg = opts.pipeline_config()?;
    let out = opts.out_dir()?;
    let data = opts.load_manifest()?;
    let pipeline = ExtractorPipeline::fit(&data, &cfg)?;
    let path = out.join("pipeline.txt");
    write_atomic(&path, pipeline.to_text().as_bytes())?;
    if let Some(m) = &pipeline.wpca2d {
        println!(
            "2DPCA: d={} of width {}, captured variance {:.4}",
            m.d(),
            m.image_dims().1,
            m.captured_variance()
        );
    }
    println!(
        "PCA: k={} of dimension {}, captured variance {:.4}",
        pipeline.pca.k(),
        pipeline.pca.dim(),
        pipeline.pca.captured_variance()
    );
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_extract(opts: &Options) -> Result<PathBuf, CliError> {
    let out = opts.out_dir()?;
    let pipeline = opts.load_pipeline()?;
    let data = opts.load_manifest()?;
    let mut csv = String::from("path,label");
    for i in 0..pipeline.feature_dim() {
        csv.push_str(&format!(",f{}", i + 1));
    }
    csv.push('\n');
    for s in data.samples() {
        let f = pipeline.extract(&s.image)?;
        csv.push_str(&format!("{},{}", s.image.source_id, s.label));
        for v in &f.values {
            csv.push(',');
            csv.push_str(&crate::serial::fmt_real(*v));
        }
        csv.push('\n');
    }
    let path = out.join("features.csv");
    write_atomic(&path, csv.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_train(opts: &Options) -> Result<PathBuf, CliError> {
    let spec = opts.classifier_spec()?;
    let seed = opts.seed.unwrap_or(0);
    let out = opts.out_dir()?;
    let pipeline = opts.load_pipeline()?;
    let data = opts.load_manifest()?;
    let xs = eval::extract_all(&pipeline, &data)?;
    let labels = data.labels();
    let (model, selected) = eval::train_classifier(&spec, &xs, &labels, data.class_count(), seed)?;
    if let (ClassifierSpec::Svm { .. }, Some((c, sigma))) = (&spec, selected) {
        match sigma {
            Some(s) => println!("selected C={c}, sigma={s}"),
            None => println!("selected C={c}"),
        }
    }
    let path = out.join("model.txt");
    write_atomic(&path, model.to_text().as_bytes())?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn classify_all(
    pipeline: &ExtractorPipeline,
    model: &TrainedClassifier,
    data: &Dataset,
) -> Result<(Vec<usize>, Vec<Vec<usize>>), CliError> {
    let mut preds = Vec::with_capacity(data.len());
    let mut ranked = Vec::with_capacity(data.len());
    for s in data.samples() {
        let f = pipeline.extract(&s.image)?;
        let (p, r) = model.predict(&f.values)?;
        preds.push(p);
        ranked.push(r);
    }
    Ok((preds, ranked))
}

pub fn cmd_predict(opts: &Options) -> Result<PathBuf, CliError> {
    let out = opts.out_dir()?;
    let pipeline = opts.load_pipeline()?;
    let model = opts.load_model()?;
    let data = opts.load_manifest()?;
    let (preds, _) = classify_all(&pipeline, &model, &data)?;
    let mut csv = String::from("path,label,predicted\n");
    for (s, p) in data.samples().iter().zip(&preds) {
        csv.push_str(&format!("{},{},{}\n", s.image.source_id, s.label, p));
    }
    let path = out.join("predictions.csv");
    write_atomic(&path, csv.as_bytes())?;
    println!(
        "accuracy {:.4} over {} images",
        eval::accuracy(&preds, &data.labels())?,
        data.len()
    );
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_cms(opts: &Options) -> Result<PathBuf, CliError> {
    let out = opts.out_dir()?;
    let pipeline = opts.load_pipeline()?;
    let model = opts.load_model()?;
    let data = opts.load_manifest()?;
    let (_, ranked) = classify_all(&pipeline, &model, &data)?;
    let max_rank = opts.max_rank.unwrap_or(5);
    let curve = eval::cms_curve(&ranked, &data.labels(), max_rank)?;
    let name = format!("{}+{}", pipeline.variant.name(), classifier_name(&model));
    let path = out.join("cms.csv");
    write_atomic(&path, eval::cms_csv(&[(name, curve)]).as_bytes())?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn classifier_name(m: &TrainedClassifier) -> &'static str {
    match m {
        TrainedClassifier::Svm(_) => "svm",
        TrainedClassifier::Knn(_) => "knn",
        TrainedClassifier::Mlp(_) => "mlp",
    }
}

pub fn cmd_evaluate(opts: &Options) -> Result<(PathBuf, PathBuf), CliError> {
    let seed = opts
        .seed
        .ok_or_else(|| CliError::Config("--seed is required for evaluate".into()))?;
    let method = MethodSpec {
        extractor: opts.pipeline_config()?,
        classifier: opts.classifier_spec()?,
        seed,
    };
    let data = opts.load_manifest()?;
    let out = opts.out_dir()?;
    let plan = eval::make_splits(&data.labels(), seed);
    let report = eval::cross_validate(&data, &plan, &method)?;
    let max_rank = opts.max_rank.unwrap_or_else(|| {
        let mut l = data.labels();
        l.sort_unstable();
        l.dedup();
        l.len()
    });
    let curve = report.cms(max_rank)?;
    let acc_path = out.join("accuracy.csv");
    let cms_path = out.join("cms.csv");
    write_atomic(&acc_path, eval::accuracy_csv(std::slice::from_ref(&report)).as_bytes())?;
    write_atomic(&cms_path, eval::cms_csv(&[(report.method.clone(), curve)]).as_bytes())?;
    for f in &report.folds {
        if let Some((c, sigma)) = f.selected {
            println!(
                "fold {}: selected C={c}, sigma={}",
                f.fold,
                sigma.map_or("-".to_string(), |s| s.to_string())
            );
        }
    }
    println!("mean accuracy ({}): {:.4}", report.method, report.mean_accuracy);
    Ok((acc_path, cms_path))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FitExtractor(o) => cmd_fit_extractor(&o.resolve()?).map(drop),
        Command::Extract(o) => cmd_extract(&o.resolve()?).map(drop),
        Command::Train(o) => cmd_train(&o.resolve()?).map(drop),
        Command::Predict(o) => cmd_predict(&o.resolve()?).map(drop),
        Command::Evaluate(o) => cmd_evaluate(&o.resolve()?).map(drop),
        Command::Cms(o) => cmd_cms(&o.resolve()?).map(drop),
    }
}
