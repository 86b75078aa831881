#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use facesvm::baselines::MlpModel;
use facesvm::imageio::{self, Dataset, GrayImage, WeightedSample};
use facesvm::linalg::{sym_eig, Matrix, DEFAULT_EIG_TOL};
use facesvm::svm::dual_objective;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, id: &str) -> GrayImage {
    let px: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    GrayImage::new(Matrix::from_vec(h, w, px).unwrap(), id).unwrap()
}

/// Random images with random labels and positive weights.
pub fn random_weighted(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<WeightedSample> {
    (0..n)
        .map(|i| WeightedSample {
            image: random_image(rng, h, w, &format!("r{i}")),
            label: i % 3,
            weight: rng.gen_range(0.1..3.0),
        })
        .collect()
}

struct Blob {
    cy: f64,
    cx: f64,
    r: f64,
    amp: f64,
}

/// Face-like synthetic identities: each subject is a sum of soft blobs on a
/// shared base layout; each image jitters position, brightness and noise.
pub fn synthetic_faces(subjects: usize, per_subject: usize, h: usize, w: usize, seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let base = [
        (0.35, 0.3, 0.10, -0.35),
        (0.35, 0.7, 0.10, -0.35),
        (0.6, 0.5, 0.08, -0.2),
        (0.78, 0.5, 0.12, -0.25),
    ];
    let mut samples = Vec::with_capacity(subjects * per_subject);
    for s in 0..subjects {
        let mut blobs: Vec<Blob> = base
            .iter()
            .map(|&(cy, cx, r, amp)| Blob {
                cy: cy + rng.gen_range(-0.06..0.06),
                cx: cx + rng.gen_range(-0.06..0.06),
                r: r * rng.gen_range(0.7..1.4),
                amp: amp * rng.gen_range(0.6..1.4),
            })
            .collect();
        for _ in 0..3 {
            blobs.push(Blob {
                cy: rng.gen_range(0.1..0.9),
                cx: rng.gen_range(0.1..0.9),
                r: rng.gen_range(0.05..0.2),
                amp: rng.gen_range(-0.25..0.25),
            });
        }
        let skin = rng.gen_range(0.5..0.75);
        for p in 0..per_subject {
            let dy = rng.gen_range(-0.03..0.03);
            let dx = rng.gen_range(-0.03..0.03);
            let gain = rng.gen_range(0.9..1.1);
            let mut px = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    let y = i as f64 / h as f64 - dy;
                    let x = j as f64 / w as f64 - dx;
                    let mut v = skin;
                    for b in &blobs {
                        let d2 = (y - b.cy).powi(2) + (x - b.cx).powi(2);
                        v += b.amp * (-d2 / (2.0 * b.r * b.r)).exp();
                    }
                    v = v * gain + rng.gen_range(-0.03..0.03);
                    px.push(v.clamp(0.0, 1.0));
                }
            }
            let img = GrayImage::new(Matrix::from_vec(h, w, px).unwrap(), format!("s{}/{}", s + 1, p + 1)).unwrap();
            samples.push(WeightedSample {
                image: img,
                label: s,
                weight: 1.0,
            });
        }
    }
    Dataset::new(samples).unwrap()
}

/// Writes every image as PGM under `dir` plus a `manifest.csv`; returns its path.
pub fn write_manifest(dir: &Path, data: &Dataset) -> PathBuf {
    let mut csv = String::from("path,label,weight\n");
    for (i, s) in data.samples().iter().enumerate() {
        let name = format!("img{i:04}.pgm");
        fs::write(dir.join(&name), imageio::write_pgm(&s.image)).unwrap();
        csv.push_str(&format!("{name},{},{}\n", s.label, s.weight));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, csv).unwrap();
    path
}

/// The AT&T database as distributed (`s1..s40/1..10.pgm`), if `ATT_FACES_DIR` points at it.
pub fn att_faces() -> Option<Dataset> {
    let dir = PathBuf::from(std::env::var_os("ATT_FACES_DIR")?);
    let mut samples = Vec::with_capacity(400);
    for s in 1..=40 {
        for p in 1..=10 {
            let image = imageio::read_pgm_file(&dir.join(format!("s{s}")).join(format!("{p}.pgm"))).ok()?;
            samples.push(WeightedSample {
                image,
                label: s - 1,
                weight: 1.0,
            });
        }
    }
    Dataset::new(samples).ok()
}

/// Random point set labelled so both classes are present.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<i8>) {
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut ys: Vec<i8> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
    ys[0] = 1;
    ys[1] = -1;
    (xs, ys)
}

/// Minimum-norm solution of a symmetric system, or `None` if inconsistent.
fn sym_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let eig = sym_eig(a, DEFAULT_EIG_TOL).ok()?;
    let n = b.len();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = vec![0.0; n];
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() <= 1e-10 * top.max(1.0) {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let c: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / lam;
        for i in 0..n {
            x[i] += c * v[i];
        }
    }
    let r = a.mul_vec(&x).ok()?;
    let res: f64 = r.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (res <= 1e-8 * (1.0 + scale)).then_some(x)
}

/// Exhaustive active-set optimum of `½αᵀHα − Σα` over
/// `{0 ≤ α ≤ C, yᵀα = 0}`: every split of the indices into
/// lower-bound, upper-bound and free sets is solved by its KKT system.
pub fn active_set_oracle(h: &Matrix, ys: &[i8], c: f64) -> Option<(f64, Vec<f64>)> {
    let n = ys.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut t = code;
        for s in state.iter_mut() {
            *s = (t % 3) as u8;
            t /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
        if !free.is_empty() {
            let m = free.len();
            let mut a = Matrix::zeros(m + 1, m + 1);
            let mut b = vec![0.0; m + 1];
            for (p, &i) in free.iter().enumerate() {
                for (q, &j) in free.iter().enumerate() {
                    a.set(p, q, h.get(i, j));
                }
                a.set(p, m, ys[i] as f64);
                a.set(m, p, ys[i] as f64);
                b[p] = 1.0 - (0..n).filter(|&j| state[j] == 1).map(|j| h.get(i, j) * c).sum::<f64>();
            }
            b[m] = -(0..n).filter(|&j| state[j] == 1).map(|j| ys[j] as f64 * c).sum::<f64>();
            let Some(sol) = sym_solve(&a, &b) else { continue };
            for (p, &i) in free.iter().enumerate() {
                alpha[i] = sol[p];
            }
        }
        let slack = 1e-9 * c.max(1.0);
        if alpha.iter().any(|&a| a < -slack || a > c + slack) {
            continue;
        }
        let eq: f64 = alpha.iter().zip(ys).map(|(a, &y)| a * y as f64).sum();
        if eq.abs() > 1e-9 * c.max(1.0) {
            continue;
        }
        for a in alpha.iter_mut() {
            *a = a.clamp(0.0, c);
        }
        let obj = dual_objective(h, &alpha);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, alpha));
        }
    }
    best
}

/// Euclidean projection onto `{0 ≤ α ≤ C, yᵀα = 0}` by bisection on the multiplier.
fn project_feasible(v: &[f64], ys: &[i8], c: f64) -> Vec<f64> {
    let at = |mu: f64| -> (Vec<f64>, f64) {
        let a: Vec<f64> = v.iter().zip(ys).map(|(x, &y)| (x - mu * y as f64).clamp(0.0, c)).collect();
        let s = a.iter().zip(ys).map(|(p, &y)| p * y as f64).sum();
        (a, s)
    };
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi)).0
}

/// Accelerated projected gradient on the same QP; returns the objective reached.
pub fn projected_gradient_oracle(h: &Matrix, ys: &[i8], c: f64, iters: usize) -> f64 {
    let n = ys.len();
    let lip = (0..n)
        .map(|i| (0..n).map(|j| h.get(i, j).abs()).sum::<f64>())
        .fold(1e-12, f64::max);
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let g: Vec<f64> = h.mul_vec(&y).unwrap().iter().map(|v| v - 1.0).collect();
        let step: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b / lip).collect();
        let nx = project_feasible(&step, ys, c);
        let nt = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = nx.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / nt * (a - b)).collect();
        x = nx;
        t = nt;
    }
    dual_objective(h, &x)
}

/// Largest KKT violation of a trained binary machine on its training set,
/// measured as distance of `yᵢ f(xᵢ)` outside the interval allowed for `αᵢ`.
pub fn kkt_violation(alphas: &[f64], margins: &[f64], c: f64) -> f64 {
    let eps = facesvm::svm::support_threshold(c);
    alphas
        .iter()
        .zip(margins)
        .map(|(&a, &m)| {
            if a <= eps {
                (1.0 - m).max(0.0)
            } else if a >= c - eps {
                (m - 1.0).max(0.0)
            } else {
                (m - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Worst relative disagreement between backpropagation and central differences.
pub fn gradient_check(rng: &mut ChaCha8Rng, inputs: usize, hidden: usize, outputs: usize) -> f64 {
    let mut model = MlpModel::init(inputs, hidden, outputs, 0.5, rng.gen());
    for p in model.w1.as_mut_slice().iter_mut().chain(model.w2.as_mut_slice()) {
        *p = rng.gen_range(-1.5..1.5);
    }
    let x: Vec<f64> = (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..outputs).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (_, g) = model.loss_and_gradients(&x, &t);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    };
    let params: [(fn(&mut MlpModel) -> &mut [f64], &[f64]); 4] = [
        (|m| m.w1.as_mut_slice(), g.w1.as_slice()),
        (|m| &mut m.b1[..], &g.b1),
        (|m| m.w2.as_mut_slice(), g.w2.as_slice()),
        (|m| &mut m.b2[..], &g.b2),
    ];
    for (get, grad) in params {
        for (i, &analytic) in grad.iter().enumerate() {
            let orig = get(&mut model)[i];
            get(&mut model)[i] = orig + h;
            let up = model.loss_and_gradients(&x, &t).0;
            get(&mut model)[i] = orig - h;
            let down = model.loss_and_gradients(&x, &t).0;
            get(&mut model)[i] = orig;
            check(analytic, (up - down) / (2.0 * h));
        }
    }
    worst
}
