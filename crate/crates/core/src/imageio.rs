//! Grayscale image loading (PGM), resampling, and labelled dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad PGM magic (expected P5 or P2)")]
    BadMagic,
    #[error("bad PGM header: {0}")]
    BadHeader(String),
    #[error("PGM pixel data truncated")]
    TruncatedData,
    #[error("missing file {path} (manifest row {row})")]
    MissingFile { path: PathBuf, row: usize },
    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("inconsistent image dimensions: {0}")]
    InconsistentDims(String),
    #[error("unknown label `{label}` at line {line}")]
    UnknownLabel { label: String, line: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Image with intensities in `[0, 1]`, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Matrix,
    pub source_id: String,
}

impl GrayImage {
    pub fn new(pixels: Matrix, source_id: impl Into<String>) -> Result<Self, DataError> {
        if pixels.rows() == 0 || pixels.cols() == 0 {
            return Err(DataError::InvalidImage("empty image".into()));
        }
        if let Some(bad) = pixels
            .as_slice()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::InvalidImage(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(GrayImage {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.rows()
    }

    pub fn width(&self) -> usize {
        self.pixels.cols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&str> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            None
        } else {
            std::str::from_utf8(&self.bytes[start..self.pos]).ok()
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, DataError> {
        self.token()
            .and_then(|t| t.parse::<u64>().ok())
            .ok_or_else(|| DataError::BadHeader(format!("missing or invalid {what}")))
    }
}

/// Decodes a binary (P5) or ASCII (P2) PGM. Samples are divided by maxval.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(DataError::BadMagic),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(DataError::BadHeader(format!(
            "non-positive dimensions {width}x{height}"
        )));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(DataError::BadHeader(format!("maxval {maxval} not in [1, 65535]")));
    }
    let (w, h) = (width as usize, height as usize);
    let count = w
        .checked_mul(h)
        .ok_or_else(|| DataError::BadHeader("dimensions overflow".into()))?;
    let scale = maxval as f64;

    let mut data = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates maxval from the raster.
        let start = cur.pos + 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let needed = count * bpp;
        let raster = bytes
            .get(start..start + needed)
            .ok_or(DataError::TruncatedData)?;
        if bpp == 1 {
            data.extend(raster.iter().map(|&b| (b as u64).min(maxval) as f64 / scale));
        } else {
            data.extend(
                raster
                    .chunks_exact(2)
                    .map(|c| (u16::from_be_bytes([c[0], c[1]]) as u64).min(maxval) as f64 / scale),
            );
        }
    } else {
        for _ in 0..count {
            let tok = cur.token().ok_or(DataError::TruncatedData)?;
            let v: u64 = tok
                .parse()
                .map_err(|_| DataError::BadHeader(format!("bad ASCII sample `{tok}`")))?;
            data.push(v.min(maxval) as f64 / scale);
        }
    }
    let pixels = Matrix::from_vec(h, w, data).expect("sizes checked");
    GrayImage::new(pixels, "")
}

/// Encodes as 8-bit binary PGM, rounding each pixel to the nearest of 256 levels.
pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels
            .as_slice()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn read_pgm_file(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut img = parse_pgm(&bytes)?;
    img.source_id = path.display().to_string();
    Ok(img)
}

/// Corner-aligned coordinate of output index `dst` in a source axis.
fn source_coord(dst: usize, n_src: usize, n_dst: usize) -> f64 {
    if n_dst > 1 {
        dst as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
    } else {
        (n_src - 1) as f64 / 2.0
    }
}

/// Bilinear resampling with corner-aligned sample positions.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(out_h >= 1 && out_w >= 1, "output size must be positive");
    let (h, w) = img.dims();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let src = &img.pixels;
    let mut out = Matrix::zeros(out_h, out_w);
    for r in 0..out_h {
        let y = source_coord(r, h, out_h);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = source_coord(c, w, out_w);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = src.get(y0, x0) * (1.0 - fx) + src.get(y0, x1) * fx;
            let bottom = src.get(y1, x0) * (1.0 - fx) + src.get(y1, x1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out.set(r, c, v.clamp(0.0, 1.0));
        }
    }
    GrayImage {
        pixels: out,
        source_id: img.source_id.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub image: GrayImage,
    pub label: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<WeightedSample>,
    class_count: usize,
}

impl Dataset {
    /// Validates the dataset invariants. `class_count` is one past the largest label.
    pub fn new(samples: Vec<WeightedSample>) -> Result<Self, DataError> {
        let first = samples
            .first()
            .ok_or_else(|| DataError::InvalidDataset("no samples".into()))?;
        let dims = first.image.dims();
        for s in &samples {
            if s.image.dims() != dims {
                return Err(DataError::InconsistentDims(format!(
                    "{} is {:?}, expected {:?}",
                    s.image.source_id,
                    s.image.dims(),
                    dims
                )));
            }
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(DataError::InvalidDataset(format!(
                    "weight {} must be finite and non-negative",
                    s.weight
                )));
            }
        }
        if samples.iter().map(|s| s.weight).sum::<f64>() <= 0.0 {
            return Err(DataError::InvalidDataset("weights sum to zero".into()));
        }
        let class_count = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        Ok(Dataset {
            samples,
            class_count,
        })
    }

    pub fn samples(&self) -> &[WeightedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.samples[0].image.dims()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sub-dataset made of the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }
}

fn parse_dims_pragma(line: &str) -> Option<(usize, usize)> {
    let rest = line.trim().strip_prefix("#dims=")?;
    let (h, w) = rest.split_once(',')?;
    let h: usize = h.trim().parse().ok()?;
    let w: usize = w.trim().parse().ok()?;
    (h > 0 && w > 0).then_some((h, w))
}

/// Reads a `path,label[,weight]` CSV manifest.
///
/// A leading `#dims=H,W` line fixes the size every image is resampled to.
/// Without it all images must already share one size. Relative image paths
/// are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile {
            path: path.to_path_buf(),
            row: 0,
        },
        _ => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let (target, body, line_offset) = match text.lines().next() {
        Some(first) if first.trim_start().starts_with("#dims") => {
            let dims = parse_dims_pragma(first).ok_or_else(|| DataError::Parse {
                line: 1,
                msg: format!("malformed pragma `{}`", first.trim()),
            })?;
            let body = text.split_once('\n').map_or("", |(_, rest)| rest);
            (Some(dims), body, 1)
        }
        _ => (None, text.as_str(), 0),
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| DataError::Parse {
        line: line_offset + 1,
        msg: e.to_string(),
    })?;
    let cols: Vec<&str> = headers.iter().collect();
    let has_weight = match cols.as_slice() {
        ["path", "label"] => false,
        ["path", "label", "weight"] => true,
        _ => {
            return Err(DataError::Parse {
                line: line_offset + 1,
                msg: format!("expected header `path,label[,weight]`, found `{}`", cols.join(",")),
            })
        }
    };

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let row = row + 1;
        let line = line_offset + 1 + row;
        let record = record.map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let rel = record.get(0).unwrap_or("");
        if rel.is_empty() {
            return Err(DataError::Parse {
                line,
                msg: "empty path".into(),
            });
        }
        let raw_label = record.get(1).unwrap_or("");
        let label: usize = raw_label.parse().map_err(|_| DataError::UnknownLabel {
            label: raw_label.to_string(),
            line,
        })?;
        let weight = if has_weight {
            let raw = record.get(2).unwrap_or("");
            let w: f64 = raw.parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("bad weight `{raw}`"),
            })?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(DataError::Parse {
                    line,
                    msg: format!("weight {w} must be finite and non-negative"),
                });
            }
            w
        } else {
            1.0
        };

        let img_path = {
            let p = Path::new(rel);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        if !img_path.is_file() {
            return Err(DataError::MissingFile {
                path: img_path,
                row,
            });
        }
        let mut image = read_pgm_file(&img_path)?;
        image.source_id = rel.to_string();
        if let Some((h, w)) = target {
            image = resize_bilinear(&image, h, w);
        }
        samples.push(WeightedSample {
            image,
            label,
            weight,
        });
    }
    if samples.is_empty() {
        return Err(DataError::InvalidDataset("manifest lists no images".into()));
    }
    Dataset::new(samples)
}
