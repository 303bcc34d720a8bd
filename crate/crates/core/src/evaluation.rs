//! Accuracy, corruption robustness, OOD scoring and equivariance probes.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::tensor::{argmax, scale_add_values, Tensor};

const CHUNK: usize = 256;

/// Logits and representations for any number of samples, computed in chunks.
pub fn forward_all(model: &ModelSpec, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = images.rows();
    let (mut logits, mut reps) = (Vec::new(), Vec::new());
    let (mut k, mut d) = (0, 0);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let out = model.forward(&images.select_rows(&idx)?)?;
        k = out.logits.row_len();
        d = out.representation.row_len();
        logits.extend_from_slice(out.logits.data());
        reps.extend_from_slice(out.representation.data());
    }
    Ok((Tensor::new([n, k], logits)?, Tensor::new([n, d], reps)?))
}

/// Fraction of rows whose logit argmax equals the label argmax.
pub fn accuracy_from_logits(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    if logits.is_empty() || logits.rows() == 0 {
        return Err(Error::Usage("accuracy of an empty set".into()));
    }
    if logits.shape() != labels.shape() {
        return Err(Error::Dimension(format!("logits {:?} vs labels {:?}", logits.shape(), labels.shape())));
    }
    let k = logits.row_len();
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels.data().chunks(k))
        .filter(|(z, y)| argmax(z) == argmax(y))
        .count();
    Ok(hits as f64 / logits.rows() as f64)
}

pub fn accuracy(model: &ModelSpec, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("accuracy of an empty dataset".into()));
    }
    let (logits, _) = forward_all(model, data.images())?;
    accuracy_from_logits(&logits, data.labels())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
    ];

    /// Parameter by severity 1..=5: noise std, flipped-pixel fraction,
    /// blur std in pixels, contrast factor.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.8, 1.0, 1.2],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::GaussianBlur => "gaussian-blur",
            CorruptionKind::Contrast => "contrast",
        })
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    kind: CorruptionKind,
    severity: u8,
    parameter: f64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity must be 1..=5, got {severity}")));
        }
        Ok(CorruptionSpec { kind, severity, parameter: kind.table()[severity as usize - 1] })
    }

    /// Off-table strength; reported as severity 0.
    pub fn with_parameter(kind: CorruptionKind, parameter: f64) -> Result<Self> {
        if !(parameter >= 0.0 && parameter.is_finite()) {
            return Err(Error::Config(format!("corruption parameter {parameter}")));
        }
        Ok(CorruptionSpec { kind, severity: 0, parameter })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    pub fn parameter(&self) -> f64 {
        self.parameter
    }
}

/// All 20 table entries, kind-major.
pub fn corruption_grid() -> Vec<CorruptionSpec> {
    CorruptionKind::ALL
        .into_iter()
        .flat_map(|k| (1..=5).map(move |s| CorruptionSpec::new(k, s).unwrap()))
        .collect()
}

/// Normalized discrete Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

// Separable blur of one plane with edge replication.
fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| {
                    let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    k * plane[y * w + xx] as f64
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| {
                    let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    k * tmp[yy * w + x]
                })
                .sum();
            plane[y * w + x] = v as f32;
        }
    }
}

/// Applies one corruption to an `N x C x H x W` batch and clamps to `[0, 1]`.
pub fn corrupt<R: Rng + ?Sized>(images: &Tensor, spec: &CorruptionSpec, rng: &mut R) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::Dimension(format!("corrupt expects N x C x H x W, got {:?}", images.shape())));
    }
    let p = spec.parameter;
    let mut out = images.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in out.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + p * z) as f32;
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in out.data_mut() {
                if rng.random::<f64>() < p {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => {
            let (h, w) = (images.shape()[2], images.shape()[3]);
            let kernel = gaussian_kernel(p);
            for plane in out.data_mut().chunks_mut(h * w) {
                blur_plane(plane, h, w, &kernel);
            }
        }
        CorruptionKind::Contrast => {
            for v in out.data_mut() {
                *v = (0.5 + p * (*v as f64 - 0.5)) as f32;
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub cells: Vec<(CorruptionSpec, f64)>,
    pub mean_accuracy: f64,
}

/// Accuracy on a corrupted copy of `data` for one spec. Cell `cell` of a
/// sweep draws from stream `cell` of `seed`.
pub fn corrupted_accuracy(model: &ModelSpec, data: &Dataset, spec: &CorruptionSpec, seed: u64, cell: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    let images = corrupt(data.images(), spec, &mut rng)?;
    let (logits, _) = forward_all(model, &images)?;
    accuracy_from_logits(&logits, data.labels())
}

/// Mean accuracy over every (kind, severity) cell.
pub fn corruption_suite_eval(model: &ModelSpec, data: &Dataset, seed: u64) -> Result<SuiteResult> {
    let cells = corruption_grid()
        .into_iter()
        .enumerate()
        .map(|(i, spec)| Ok((spec, corrupted_accuracy(model, data, &spec, seed, i as u64)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean_accuracy = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
    Ok(SuiteResult { cells, mean_accuracy })
}

/// Largest softmax probability of every row.
pub fn msp_from_logits(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(logits.row_len())
        .map(|z| {
            let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let s: f64 = z.iter().map(|&v| (v as f64 - m).exp()).sum();
            1.0 / s
        })
        .collect()
}

pub fn msp_scores(model: &ModelSpec, images: &Tensor) -> Result<Vec<f64>> {
    let (logits, _) = forward_all(model, images)?;
    Ok(msp_from_logits(&logits))
}

/// Probability that an in-distribution score beats an OOD score, ties
/// counting one half, via the rank-sum statistic.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Usage("auroc needs non-empty score lists".into()));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::Validation("auroc score is NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (n1, n2) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapCurve {
    pub lambdas: Vec<f64>,
    pub gap_mean: Vec<f64>,
    pub gap_std: Vec<f64>,
    pub pair_count: usize,
}

impl GapCurve {
    pub fn at(&self, lambda: f64) -> Option<f64> {
        self.lambdas.iter().position(|&l| (l - lambda).abs() < 1e-12).map(|i| self.gap_mean[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,gap_mean,gap_std\n");
        for i in 0..self.lambdas.len() {
            writeln!(s, "{},{},{}", self.lambdas[i], self.gap_mean[i], self.gap_std[i]).unwrap();
        }
        s
    }
}

/// `0, 0.1, ..., 1`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// `count` pairs `(i, j)` with different labels, uniformly drawn.
pub fn cross_class_pairs(data: &Dataset, count: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = data.label_indices();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Usage("cross-class pairs need at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::with_capacity(count), Vec::with_capacity(count));
    while a.len() < count {
        let i = rng.random_range(0..labels.len());
        let j = rng.random_range(0..labels.len());
        if labels[i] != labels[j] {
            a.push(i);
            b.push(j);
        }
    }
    Ok((a, b))
}

/// Per-λ mean and sample std over pairs of `|g(mix(x_i, x_j)) - mix(g(x_i), g(x_j))|`.
pub fn equivariance_gap(model: &ModelSpec, x_i: &Tensor, x_j: &Tensor, lambdas: &[f64]) -> Result<GapCurve> {
    if x_i.shape() != x_j.shape() {
        return Err(Error::Dimension(format!("pair batches {:?} vs {:?}", x_i.shape(), x_j.shape())));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Validation(format!("lambda {l} outside [0, 1]")));
    }
    let (_, r_i) = forward_all(model, x_i)?;
    let (_, r_j) = forward_all(model, x_j)?;
    let n = x_i.rows();
    let (mut gap_mean, mut gap_std) = (Vec::new(), Vec::new());
    for &lambda in lambdas {
        let mixed = scale_add_values(x_i, x_j, lambda as f32)?;
        let (_, r_m) = forward_all(model, &mixed)?;
        let target = scale_add_values(&r_i, &r_j, lambda as f32)?;
        let gaps: Vec<f64> = (0..n)
            .map(|r| {
                r_m.row(r)
                    .iter()
                    .zip(target.row(r))
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mean = gaps.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        gap_mean.push(mean);
        gap_std.push(var.sqrt());
    }
    Ok(GapCurve { lambdas: lambdas.to_vec(), gap_mean, gap_std, pair_count: n })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as columns of a row-major matrix).
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| m[i * d + i]).collect(), v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `N x dims`.
    pub projection: Tensor<f64>,
    /// `dims` unit vectors of length `D`.
    pub components: Vec<Vec<f64>>,
    /// All `D` singular values of the centered data, descending.
    pub singular_values: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Centers the rows and projects them onto the top right singular vectors.
/// Each component is signed so its largest-magnitude loading is positive.
pub fn pca_project(reps: &Tensor, dims: usize) -> Result<Pca> {
    if reps.rank() != 2 {
        return Err(Error::Dimension(format!("pca_project expects N x D, got {:?}", reps.shape())));
    }
    let (n, d) = (reps.rows(), reps.row_len());
    if d < 2 || n < 3 {
        return Err(Error::Usage(format!("pca_project needs N >= 3 and D >= 2, got {n} x {d}")));
    }
    if dims == 0 || dims > d {
        return Err(Error::Usage(format!("cannot keep {dims} of {d} dimensions")));
    }
    let mut mean = vec![0.0; d];
    for row in reps.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = reps
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(&v, m)| v as f64 - m))
        .collect();
    let mut gram = vec![0.0; d * d];
    for row in centered.chunks(d) {
        for a in 0..d {
            for b in a..d {
                gram[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[a * d + b] = gram[b * d + a];
        }
    }
    let (eigvals, vecs) = symmetric_eigen(&gram, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let singular_values = order.iter().map(|&i| eigvals[i].max(0.0).sqrt()).collect();
    let components: Vec<Vec<f64>> = order[..dims]
        .iter()
        .map(|&c| {
            let mut col: Vec<f64> = (0..d).map(|r| vecs[r * d + c]).collect();
            let lead = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if lead < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            col
        })
        .collect();
    let proj: Vec<f64> = centered
        .chunks(d)
        .flat_map(|row| components.iter().map(move |c| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()))
        .collect();
    Ok(Pca { projection: Tensor::new([n, dims], proj)?, components, singular_values, mean })
}

/// `x,y,lambda,class` rows for a 2-D projection.
pub fn projection_csv(projection: &Tensor<f64>, lambdas: &[f64], classes: &[usize]) -> Result<String> {
    let n = projection.rows();
    if projection.row_len() < 2 || lambdas.len() != n || classes.len() != n {
        return Err(Error::Dimension(format!(
            "projection {:?} with {} lambdas and {} classes",
            projection.shape(),
            lambdas.len(),
            classes.len()
        )));
    }
    let mut s = String::from("x,y,lambda,class\n");
    for i in 0..n {
        let row = projection.row(i);
        writeln!(s, "{},{},{},{}", row[0], row[1], lambdas[i], classes[i]).unwrap();
    }
    Ok(s)
}
