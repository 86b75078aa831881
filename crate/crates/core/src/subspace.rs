//! Subspace feature extractors: classical PCA on flattened images and
//! weighted 2DPCA on image matrices, plus the two-stage pipeline that turns
//! a 2DPCA feature matrix into a short vector.

use thiserror::Error;

use crate::imageio::{Dataset, GrayImage};
use crate::linalg::{self, sym_eig, LinalgError, Matrix, DEFAULT_EIG_TOL};
use crate::serial::{FormatError, TextReader, TextWriter};

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("requested {k} components but at most {max} are available")]
    KTooLarge { k: usize, max: usize },
    #[error("2DPCA dimension d={d} exceeds the image width {width}")]
    DimTooLarge { d: usize, width: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Stable 64-bit fingerprint of a set of reals (FNV-1a over the bit patterns).
fn fingerprint<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for v in part {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Weighted mean image and image scatter matrix over the positive-weight
/// samples:
///
/// ```text
/// Ā = Σ wᵢ Aᵢ / Σ wᵢ
/// G = Σ wᵢ (Aᵢ − Ā)ᵀ(Aᵢ − Ā) / Σ wᵢ
/// ```
pub fn weighted_mean_and_scatter(data: &Dataset) -> Result<(Matrix, Matrix), SubspaceError> {
    let active: Vec<_> = data.samples().iter().filter(|s| s.weight > 0.0).collect();
    if active.len() < 2 {
        return Err(SubspaceError::DegenerateData(format!(
            "need at least 2 positive-weight samples, found {}",
            active.len()
        )));
    }
    let (h, w) = data.image_dims();
    let total_weight = {
        let mut acc = CompensatedSum::default();
        active.iter().for_each(|s| acc.add(s.weight));
        acc.value()
    };

    let mut mean_acc = vec![CompensatedSum::default(); h * w];
    for s in &active {
        for (acc, &p) in mean_acc.iter_mut().zip(s.image.pixels().as_slice()) {
            acc.add(s.weight * p);
        }
    }
    let mean = Matrix::from_vec(
        h,
        w,
        mean_acc.iter().map(|a| a.value() / total_weight).collect(),
    )?;

    let mut scatter_acc = vec![CompensatedSum::default(); w * w];
    let mut contrib = vec![0.0; w * w];
    for s in &active {
        let centered = s.image.pixels().sub(&mean)?;
        contrib.iter_mut().for_each(|c| *c = 0.0);
        for r in 0..h {
            let row = centered.row(r);
            for j in 0..w {
                let rj = row[j];
                if rj == 0.0 {
                    continue;
                }
                for k in j..w {
                    contrib[j * w + k] += rj * row[k];
                }
            }
        }
        for j in 0..w {
            for k in j..w {
                scatter_acc[j * w + k].add(s.weight * contrib[j * w + k]);
            }
        }
    }
    let mut g = Matrix::zeros(w, w);
    for j in 0..w {
        for k in j..w {
            let v = scatter_acc[j * w + k].value() / total_weight;
            g.set(j, k, v);
            g.set(k, j, v);
        }
    }
    Ok((mean, g))
}

/// Weighted 2DPCA model: mean image plus the leading eigenvectors of the
/// image scatter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Wpca2dModel {
    pub mean_image: Matrix,
    /// `w × d`, column `k` is the k-th projection axis.
    pub eigvecs: Matrix,
    pub eigvals: Vec<f64>,
    /// Trace of the scatter matrix (sum of all eigenvalues).
    pub total_variance: f64,
}

impl Wpca2dModel {
    pub fn d(&self) -> usize {
        self.eigvecs.cols()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.mean_image.shape()
    }

    pub fn captured_variance(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.eigvals.iter().sum::<f64>() / self.total_variance
        } else {
            1.0
        }
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new("WPCA2D v1");
        w.field("d", self.d());
        w.real("total_variance", self.total_variance);
        w.matrix("mean", &self.mean_image);
        w.matrix("eigvecs", &self.eigvecs);
        w.vector("eigvals", &self.eigvals);
        w.finish()
    }

    pub fn read(r: &mut TextReader<'_>) -> Result<Self, FormatError> {
        r.expect_header("WPCA2D v1")?;
        let d: usize = r.field("d")?;
        let total_variance: f64 = r.field("total_variance")?;
        let mean_image = r.matrix("mean")?;
        let eigvecs = r.matrix("eigvecs")?;
        let eigvals = r.vector("eigvals")?;
        if eigvecs.cols() != d || eigvals.len() != d || eigvecs.rows() != mean_image.cols() {
            return Err(r.err("inconsistent WPCA2D dimensions"));
        }
        Ok(Wpca2dModel {
            mean_image,
            eigvecs,
            eigvals,
            total_variance,
        })
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        Self::read(&mut TextReader::new(text))
    }
}

/// Fits weighted 2DPCA, keeping the `d` leading eigenpairs of the scatter matrix.
pub fn fit_wpca2d(data: &Dataset, d: usize) -> Result<Wpca2dModel, SubspaceError> {
    let (_, width) = data.image_dims();
    if d == 0 || d > width {
        return Err(SubspaceError::DimTooLarge { d, width });
    }
    let (mean, g) = weighted_mean_and_scatter(data)?;
    let eig = sym_eig(&g, DEFAULT_EIG_TOL)?;
    let eigvals = eig.eigenvalues[..d].to_vec();
    if eigvals[d - 1] <= 1e-12 * eigvals[0] {
        log::warn!(
            "2DPCA scatter is rank deficient: eigenvalue {} of {} is {:e} (largest {:e})",
            d,
            width,
            eigvals[d - 1],
            eigvals[0]
        );
    }
    Ok(Wpca2dModel {
        mean_image: mean,
        eigvecs: eig.eigenvectors.leading_columns(d),
        eigvals,
        total_variance: eig.eigenvalues.iter().sum(),
    })
}

/// Projects an image onto the 2DPCA axes: column `k` of the result is `(A − Ā)Ωₖ`.
pub fn project_2dpca(model: &Wpca2dModel, img: &GrayImage) -> Result<Matrix, SubspaceError> {
    if img.dims() != model.image_dims() {
        return Err(SubspaceError::ShapeMismatch(format!(
            "image is {:?}, model expects {:?}",
            img.dims(),
            model.image_dims()
        )));
    }
    let centered = img.pixels().sub(&model.mean_image)?;
    Ok(linalg::matmul(&centered, &model.eigvecs)?)
}

/// Flattens a feature matrix column by column (X₁ then X₂ …).
pub fn flatten_columns(m: &Matrix) -> Vec<f64> {
    m.transpose().into_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Fingerprint of the extractor that produced the vector.
    pub extractor_id: u64,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `m × k` with orthonormal columns.
    pub basis: Matrix,
    pub eigvals: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    id: u64,
}

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentCount {
    Fixed(usize),
    /// Smallest count whose eigenvalues reach this fraction of the total variance.
    Variance(f64),
}

impl Default for ComponentCount {
    fn default() -> Self {
        ComponentCount::Variance(0.95)
    }
}

/// Which eigenproblem `fit_pca` solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaRoute {
    /// `m × m` covariance when `m ≤ N`, else the `N × N` snapshot Gram matrix.
    Auto,
    Covariance,
    Gram,
}

impl PcaModel {
    pub fn new(mean: Vec<f64>, basis: Matrix, eigvals: Vec<f64>, total_variance: f64) -> Self {
        let id = fingerprint([
            mean.as_slice(),
            basis.as_slice(),
            eigvals.as_slice(),
            std::slice::from_ref(&total_variance),
        ]);
        PcaModel {
            mean,
            basis,
            eigvals,
            total_variance,
            id,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn captured_variance(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.eigvals.iter().sum::<f64>() / self.total_variance
        } else {
            1.0
        }
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new("PCA v1");
        w.field("k", self.k());
        w.real("total_variance", self.total_variance);
        w.vector("mean", &self.mean);
        w.matrix("basis", &self.basis);
        w.vector("eigvals", &self.eigvals);
        w.finish()
    }

    pub fn read(r: &mut TextReader<'_>) -> Result<Self, FormatError> {
        r.expect_header("PCA v1")?;
        let k: usize = r.field("k")?;
        let total_variance: f64 = r.field("total_variance")?;
        let mean = r.vector("mean")?;
        let basis = r.matrix("basis")?;
        let eigvals = r.vector("eigvals")?;
        if basis.cols() != k || basis.rows() != mean.len() || eigvals.len() != k {
            return Err(r.err("inconsistent PCA dimensions"));
        }
        Ok(PcaModel::new(mean, basis, eigvals, total_variance))
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        Self::read(&mut TextReader::new(text))
    }
}

fn orient(col: &mut [f64]) {
    if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Extends `cols` with unit vectors orthogonal to all existing columns
/// (Gram–Schmidt over the standard basis) until there are `k` of them.
fn complete_basis(cols: &mut Vec<Vec<f64>>, m: usize, k: usize) {
    let mut candidate = 0;
    while cols.len() < k && candidate < m {
        let mut v = vec![0.0; m];
        v[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for c in cols.iter() {
                let p = linalg::dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = linalg::norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            orient(&mut v);
            cols.push(v);
        }
    }
}

fn choose_k(eigvals: &[f64], total: f64, count: ComponentCount, max: usize) -> Result<usize, SubspaceError> {
    match count {
        ComponentCount::Fixed(k) => {
            if k == 0 || k > max {
                Err(SubspaceError::KTooLarge { k, max })
            } else {
                Ok(k)
            }
        }
        ComponentCount::Variance(frac) => {
            if total <= 0.0 {
                return Ok(1);
            }
            let mut acc = 0.0;
            for (i, &l) in eigvals.iter().take(max).enumerate() {
                acc += l.max(0.0);
                if acc >= frac * total {
                    return Ok(i + 1);
                }
            }
            Ok(max)
        }
    }
}

/// Fits PCA with a fixed number of components.
pub fn fit_pca(vectors: &[Vec<f64>], k: usize) -> Result<PcaModel, SubspaceError> {
    fit_pca_with(vectors, ComponentCount::Fixed(k), PcaRoute::Auto)
}

/// Fits PCA on the sample covariance `(1/N) Σ (xᵢ − x̄)(xᵢ − x̄)ᵀ`.
///
/// At most `min(m, N − 1)` components are available. When `m > N` the
/// eigenproblem is solved on the `N × N` snapshot matrix and the basis is
/// lifted back with `v = Xᵀu / √(Nλ)`.
pub fn fit_pca_with(
    vectors: &[Vec<f64>],
    count: ComponentCount,
    route: PcaRoute,
) -> Result<PcaModel, SubspaceError> {
    let n = vectors.len();
    if n < 2 {
        return Err(SubspaceError::DegenerateData(format!(
            "PCA needs at least 2 vectors, found {n}"
        )));
    }
    let m = vectors[0].len();
    if m == 0 || vectors.iter().any(|v| v.len() != m) {
        return Err(SubspaceError::ShapeMismatch(
            "PCA input vectors must share one non-zero length".into(),
        ));
    }
    let max_k = m.min(n - 1);

    let mut mean = vec![0.0; m];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, mu)| x - mu).collect())
        .collect();
    let total_variance =
        centered.iter().map(|c| linalg::dot(c, c)).sum::<f64>() / n as f64;

    let use_gram = match route {
        PcaRoute::Auto => m > n,
        PcaRoute::Covariance => false,
        PcaRoute::Gram => true,
    };

    let (eigvals, cols) = if use_gram {
        let mut gram = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = linalg::dot(&centered[i], &centered[j]) / n as f64;
                gram.set(i, j, v);
                gram.set(j, i, v);
            }
        }
        let eig = sym_eig(&gram, DEFAULT_EIG_TOL)?;
        let k = choose_k(&eig.eigenvalues, total_variance, count, max_k)?;
        let floor = 1e-12 * eig.eigenvalues[0].max(0.0);
        let mut cols = Vec::with_capacity(k);
        let mut vals = Vec::with_capacity(k);
        for j in 0..k {
            let lambda = eig.eigenvalues[j];
            vals.push(lambda.max(0.0));
            if lambda <= floor || lambda <= 0.0 {
                continue;
            }
            let u = eig.eigenvectors.column(j);
            let mut v = vec![0.0; m];
            for (ui, c) in u.iter().zip(&centered) {
                v.iter_mut().zip(c).for_each(|(acc, x)| *acc += ui * x);
            }
            let s = 1.0 / (n as f64 * lambda).sqrt();
            v.iter_mut().for_each(|x| *x *= s);
            orient(&mut v);
            cols.push(v);
        }
        complete_basis(&mut cols, m, k);
        (vals, cols)
    } else {
        let mut cov = Matrix::zeros(m, m);
        for c in &centered {
            for i in 0..m {
                if c[i] == 0.0 {
                    continue;
                }
                for j in i..m {
                    let v = cov.get(i, j) + c[i] * c[j];
                    cov.set(i, j, v);
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = cov.get(i, j) / n as f64;
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        let eig = sym_eig(&cov, DEFAULT_EIG_TOL)?;
        let k = choose_k(&eig.eigenvalues, total_variance, count, max_k)?;
        let cols = (0..k).map(|j| eig.eigenvectors.column(j)).collect();
        let vals = eig.eigenvalues[..k].iter().map(|l| l.max(0.0)).collect();
        (vals, cols)
    };

    let k = cols.len();
    let mut basis = Matrix::zeros(m, k);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            basis.set(i, j, x);
        }
    }
    Ok(PcaModel::new(mean, basis, eigvals, total_variance))
}

/// `basisᵀ (x − mean)`.
pub fn project_pca(model: &PcaModel, x: &[f64]) -> Result<FeatureVector, SubspaceError> {
    if x.len() != model.dim() {
        return Err(SubspaceError::ShapeMismatch(format!(
            "vector of length {} for a PCA model of dimension {}",
            x.len(),
            model.dim()
        )));
    }
    let centered: Vec<f64> = x.iter().zip(&model.mean).map(|(a, b)| a - b).collect();
    Ok(FeatureVector {
        values: model.basis.tr_mul_vec(&centered)?,
        extractor_id: model.id,
    })
}

/// `mean + basis · f`.
pub fn reconstruct_pca(model: &PcaModel, f: &[f64]) -> Result<Vec<f64>, SubspaceError> {
    if f.len() != model.k() {
        return Err(SubspaceError::ShapeMismatch(format!(
            "feature of length {} for a PCA model with {} components",
            f.len(),
            model.k()
        )));
    }
    let mut out = model.basis.mul_vec(f)?;
    out.iter_mut().zip(&model.mean).for_each(|(o, m)| *o += m);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    PcaOnly,
    Wpca2dThenPca,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PcaOnly => "pca",
            Variant::Wpca2dThenPca => "wpca2d",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pca" => Ok(Variant::PcaOnly),
            "wpca2d" | "2dpca" => Ok(Variant::Wpca2dThenPca),
            other => Err(format!("unknown extractor variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Number of 2DPCA axes (ignored for `PcaOnly`).
    pub d: usize,
    pub k_final: ComponentCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorPipeline {
    pub variant: Variant,
    pub wpca2d: Option<Wpca2dModel>,
    pub pca: PcaModel,
}

fn flatten_rows(img: &GrayImage) -> Vec<f64> {
    img.pixels().as_slice().to_vec()
}

impl ExtractorPipeline {
    /// Fits the extractor on `data`. The second-stage PCA of the 2DPCA
    /// variant is unweighted and uses the projected training images.
    pub fn fit(data: &Dataset, cfg: &PipelineConfig) -> Result<Self, SubspaceError> {
        match cfg.variant {
            Variant::PcaOnly => {
                let vectors: Vec<Vec<f64>> =
                    data.samples().iter().map(|s| flatten_rows(&s.image)).collect();
                let pca = fit_pca_with(&vectors, cfg.k_final, PcaRoute::Auto)?;
                Ok(ExtractorPipeline {
                    variant: cfg.variant,
                    wpca2d: None,
                    pca,
                })
            }
            Variant::Wpca2dThenPca => {
                let model = fit_wpca2d(data, cfg.d)?;
                let vectors = data
                    .samples()
                    .iter()
                    .map(|s| project_2dpca(&model, &s.image).map(|f| flatten_columns(&f)))
                    .collect::<Result<Vec<_>, _>>()?;
                let pca = fit_pca_with(&vectors, cfg.k_final, PcaRoute::Auto)?;
                Ok(ExtractorPipeline {
                    variant: cfg.variant,
                    wpca2d: Some(model),
                    pca,
                })
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.pca.k()
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.wpca2d.as_ref().map(|m| m.image_dims())
    }

    pub fn id(&self) -> u64 {
        self.pca.id()
    }

    pub fn extract(&self, img: &GrayImage) -> Result<FeatureVector, SubspaceError> {
        match (self.variant, &self.wpca2d) {
            (Variant::PcaOnly, _) => project_pca(&self.pca, &flatten_rows(img)),
            (Variant::Wpca2dThenPca, Some(model)) => {
                let f = project_2dpca(model, img)?;
                project_pca(&self.pca, &flatten_columns(&f))
            }
            (Variant::Wpca2dThenPca, None) => Err(SubspaceError::ShapeMismatch(
                "2DPCA pipeline without a 2DPCA model".into(),
            )),
        }
    }

    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new("PIPELINE v1");
        w.field("variant", self.variant.name());
        if let Some(m) = &self.wpca2d {
            w.embed(&m.to_text());
        }
        w.embed(&self.pca.to_text());
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let mut r = TextReader::new(text);
        r.expect_header("PIPELINE v1")?;
        let name: String = r.field("variant")?;
        let variant: Variant = name.parse().map_err(|e: String| r.err(e))?;
        let wpca2d = match variant {
            Variant::Wpca2dThenPca => Some(Wpca2dModel::read(&mut r)?),
            Variant::PcaOnly => None,
        };
        let pca = PcaModel::read(&mut r)?;
        if let Some(m) = &wpca2d {
            if pca.dim() != m.image_dims().0 * m.d() {
                return Err(r.err("second-stage PCA dimension does not match h·d"));
            }
        }
        Ok(ExtractorPipeline {
            variant,
            wpca2d,
            pca,
        })
    }
}
