//! Mixup-family transforms: mixing-ratio sampling, within-batch pairing,
//! input mixing (linear interpolation or CutMix box pasting), label mixing and
//! representation mixing.
//!
//! One ratio is drawn per batch. The rng is consumed in a fixed order for each
//! batch: the pairing permutation, then the ratio, then (CutMix only) the box
//! center.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{scale_add_values, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    None,
    Linear,
    CutMix,
}

impl fmt::Display for MixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixKind::None => "none",
            MixKind::Linear => "linear",
            MixKind::CutMix => "cutmix",
        })
    }
}

impl FromStr for MixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MixKind::None),
            "linear" | "mixup" => Ok(MixKind::Linear),
            "cutmix" => Ok(MixKind::CutMix),
            other => Err(Error::Config(format!("unknown mix kind {other:?}"))),
        }
    }
}

/// How a batch is mixed and how the ratio is distributed (`Beta(alpha, alpha)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixPolicy {
    pub kind: MixKind,
    pub alpha: f64,
}

impl MixPolicy {
    pub fn new(kind: MixKind, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(MixPolicy { kind, alpha })
    }

    pub fn none() -> Self {
        MixPolicy { kind: MixKind::None, alpha: 1.0 }
    }
}

/// A mixed batch: row `r` combines sample `r` with sample `pair[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub x_mixed: Tensor,
    pub y_mixed: Tensor,
    /// Ratio actually realised (area ratio after clipping for CutMix).
    pub lambda_eff: f64,
    /// Ratio that was requested or sampled.
    pub lambda_target: f64,
    pub pair: Vec<usize>,
    /// `H x W` binary box mask, CutMix only. Ones select the first sample.
    pub mask: Option<Tensor>,
}

/// Draws `Gamma(shape, 1)` by Marsaglia and Tsang's squeeze method. Shapes
/// below one are boosted to `shape + 1` and corrected by `U^(1/shape)`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Draws a mixing ratio from `Beta(alpha, alpha)` as `G1 / (G1 + G2)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    loop {
        let g1 = sample_gamma(alpha, rng);
        let g2 = sample_gamma(alpha, rng);
        let total = g1 + g2;
        if total > 0.0 {
            return Ok(g1 / total);
        }
    }
}

/// Uniform random permutation of `0..n`; sample `i` is paired with `perm[i]`.
pub fn pair_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Usage(format!("pairing needs at least 2 samples, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(perm)
}

fn check_unit(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("mixing ratio {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn check_pair(x_i: &Tensor, x_j: &Tensor, y_i: &Tensor, y_j: &Tensor) -> Result<()> {
    if x_i.shape() != x_j.shape() || y_i.shape() != y_j.shape() {
        return Err(dim_err!(
            "mixing inputs {:?}/{:?} with labels {:?}/{:?}",
            x_i.shape(),
            x_j.shape(),
            y_i.shape(),
            y_j.shape()
        ));
    }
    if x_i.rows() != y_i.rows() {
        return Err(dim_err!("{} inputs but {} label rows", x_i.rows(), y_i.rows()));
    }
    Ok(())
}

/// `x = l*x_i + (1-l)*x_j`, `y = l*y_i + (1-l)*y_j`, row by row.
pub fn mix_linear(x_i: &Tensor, x_j: &Tensor, y_i: &Tensor, y_j: &Tensor, lambda: f64) -> Result<MixedBatch> {
    check_unit(lambda)?;
    check_pair(x_i, x_j, y_i, y_j)?;
    let lam = lambda as f32;
    Ok(MixedBatch {
        x_mixed: scale_add_values(x_i, x_j, lam)?,
        y_mixed: scale_add_values(y_i, y_j, lam)?,
        lambda_eff: lambda,
        lambda_target: lambda,
        pair: (0..x_i.rows()).collect(),
        mask: None,
    })
}

/// Box mask for a target area ratio: sides `round(H*sqrt(l)) x round(W*sqrt(l))`
/// around a uniformly drawn center, clipped at the borders. Returns the mask
/// and the realised area ratio.
pub fn cutmix_mask<R: Rng + ?Sized>(h: usize, w: usize, lambda_target: f64, rng: &mut R) -> Result<(Tensor, f64)> {
    check_unit(lambda_target)?;
    if h < 2 || w < 2 {
        return Err(dim_err!("cutmix needs images of at least 2x2, got {h}x{w}"));
    }
    let side = lambda_target.sqrt();
    let bh = (h as f64 * side).round() as isize;
    let bw = (w as f64 * side).round() as isize;
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let (y0, x0) = (cy - bh / 2, cx - bw / 2);
    let (y1, x1) = ((y0 + bh).clamp(0, h as isize) as usize, (x0 + bw).clamp(0, w as isize) as usize);
    let (y0, x0) = (y0.clamp(0, h as isize) as usize, x0.clamp(0, w as isize) as usize);
    let mut mask = vec![0.0f32; h * w];
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            mask[y * w + x] = 1.0;
            count += 1;
        }
    }
    Ok((Tensor::new([h, w], mask)?, count as f64 / (h * w) as f64))
}

/// Pastes one box of `x_i` onto `x_j` (same box for every row and channel);
/// labels are mixed with the realised area ratio.
pub fn mix_cutmix<R: Rng + ?Sized>(
    x_i: &Tensor,
    x_j: &Tensor,
    y_i: &Tensor,
    y_j: &Tensor,
    lambda_target: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    check_pair(x_i, x_j, y_i, y_j)?;
    let s = x_i.shape();
    if s.len() < 3 {
        return Err(dim_err!("cutmix needs C x H x W samples, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (mask, lambda_eff) = cutmix_mask(h, w, lambda_target, rng)?;
    let m = mask.data();
    let data = x_i
        .data()
        .chunks(h * w)
        .zip(x_j.data().chunks(h * w))
        .flat_map(|(pi, pj)| (0..h * w).map(move |k| if m[k] == 1.0 { pi[k] } else { pj[k] }))
        .collect();
    let x_mixed = Tensor::new(s.to_vec(), data)?;
    Ok(MixedBatch {
        x_mixed,
        y_mixed: scale_add_values(y_i, y_j, lambda_eff as f32)?,
        lambda_eff,
        lambda_target,
        pair: (0..x_i.rows()).collect(),
        mask: Some(mask),
    })
}

/// `l*r_i + (1-l)*r_j` recorded on the tape.
pub fn mix_representations<T: Element>(tape: &mut Tape<T>, r_i: Var, r_j: Var, lambda: f64) -> Result<Var> {
    check_unit(lambda)?;
    tape.scale_add(r_i, r_j, lambda)
}

/// Mixes a batch with itself under `perm` at a given ratio.
pub fn mix_with_lambda<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    kind: MixKind,
    perm: Vec<usize>,
    lambda: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    if kind == MixKind::None {
        return Ok(identity_batch(x, y));
    }
    let x_j = x.select_rows(&perm)?;
    let y_j = y.select_rows(&perm)?;
    let mut mixed = match kind {
        MixKind::Linear => mix_linear(x, &x_j, y, &y_j, lambda)?,
        MixKind::CutMix => mix_cutmix(x, &x_j, y, &y_j, lambda, rng)?,
        MixKind::None => unreachable!(),
    };
    mixed.pair = perm;
    Ok(mixed)
}

fn identity_batch(x: &Tensor, y: &Tensor) -> MixedBatch {
    MixedBatch {
        x_mixed: x.clone(),
        y_mixed: y.clone(),
        lambda_eff: 1.0,
        lambda_target: 1.0,
        pair: (0..x.rows()).collect(),
        mask: None,
    }
}

/// Pairs the batch, draws one ratio and mixes inputs and labels.
pub fn make_mixed_batch<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, policy: &MixPolicy, rng: &mut R) -> Result<MixedBatch> {
    if policy.kind == MixKind::None {
        return Ok(identity_batch(x, y));
    }
    let perm = pair_indices(x.rows(), rng)?;
    let lambda = sample_lambda(policy.alpha, rng)?;
    mix_with_lambda(x, y, policy.kind, perm, lambda, rng)
}
