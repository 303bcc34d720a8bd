//! The SEM objective and the SGD training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixing::{make_mixed_batch, mix_representations, MixKind, MixPolicy, MixedBatch};
use crate::models::ModelSpec;
use crate::optim::Sgd;
use crate::tensor::gradcheck::ShadowLoss;
use crate::tensor::{argmax, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PenaltyVariant {
    #[default]
    Norm,
    SquaredNorm,
}

impl fmt::Display for PenaltyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyVariant::Norm => "norm",
            PenaltyVariant::SquaredNorm => "squared-norm",
        })
    }
}

impl FromStr for PenaltyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "norm" => Ok(PenaltyVariant::Norm),
            "squared-norm" | "squared_norm" => Ok(PenaltyVariant::SquaredNorm),
            other => Err(Error::Config(format!("unknown penalty_variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemConfig {
    pub gamma: f64,
    /// Treat the mixed clean representations as constants.
    pub stop_gradient_targets: bool,
    pub penalty_variant: PenaltyVariant,
}

impl SemConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        let cfg = SemConfig { gamma, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Multiplies the base rate by `factor` once for every milestone reached.
/// Milestones are 0-based epoch indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Decay by 10x at half and three quarters of the run.
    pub fn step_decay(epochs: usize) -> Self {
        let at = |f: f64| (f * epochs as f64).round() as usize;
        LrSchedule { milestones: vec![at(0.5), at(0.75)], factor: 0.1 }
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
        base * self.factor.powi(hits as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mix: MixPolicy,
    pub sem: SemConfig,
    /// Fraction of trailing epochs trained without mixing.
    pub es_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.02,
            lr_schedule: LrSchedule::step_decay(30),
            momentum: 0.9,
            weight_decay: 5e-4,
            mix: MixPolicy { kind: MixKind::Linear, alpha: 1.0 },
            sem: SemConfig::default(),
            es_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.es_fraction) {
            return Err(Error::Config(format!("es_fraction must lie in [0, 1), got {}", self.es_fraction)));
        }
        if !(self.lr_schedule.factor > 0.0 && self.lr_schedule.factor <= 1.0) {
            return Err(Error::Config(format!("lr_factor must lie in (0, 1], got {}", self.lr_schedule.factor)));
        }
        if self.mix.kind != MixKind::None {
            MixPolicy::new(self.mix.kind, self.mix.alpha)?;
        }
        self.sem.validate()?;
        Sgd::new(self.lr, self.momentum, self.weight_decay)?;
        Ok(())
    }

    /// Number of trailing mix-free epochs.
    pub fn es_epochs(&self) -> usize {
        ((self.es_fraction * self.epochs as f64).round() as usize).min(self.epochs)
    }

    /// Whether 0-based `epoch` trains on mixed samples.
    pub fn mixing_enabled(&self, epoch: usize) -> bool {
        self.mix.kind != MixKind::None && epoch < self.epochs - self.es_epochs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_label: f64,
    pub loss_sem: f64,
    pub accuracy: f64,
}

/// Vars of one recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct SemTerms {
    pub total: Var,
    pub label: Var,
    /// Absent when the batch was not mixed.
    pub penalty: Option<Var>,
    /// Logits of the unmixed batch.
    pub clean_logits: Var,
}

/// Records the label term on the mixed batch plus `gamma` times the mean
/// per-row distance between `g(x_mixed)` and the mix of `g(x_i)`, `g(x_j)`.
///
/// `g(x_j)` is the row permutation of `g(x_i)` by `mixed.pair`, which is the
/// same value as a separate pass over `x[pair]`.
pub fn record_sem_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &ModelSpec,
    params: &[Var],
    x: &Tensor,
    mixed: &MixedBatch,
    sem: &SemConfig,
) -> Result<SemTerms> {
    let n = x.rows();
    if mixed.x_mixed.rows() != n || mixed.y_mixed.rows() != n || mixed.pair.len() != n {
        return Err(Error::Usage(format!(
            "batch of {n} rows with a mixed batch of {} rows and {} pairs",
            mixed.x_mixed.rows(),
            mixed.pair.len()
        )));
    }
    let xm = tape.constant(mixed.x_mixed.cast())?;
    let out = model.forward_on(tape, params, xm)?;
    let label = tape.softmax_cross_entropy(out.logits, &mixed.y_mixed.cast())?;

    let xc = tape.constant(x.cast())?;
    if sem.gamma == 0.0 {
        // plain mixup; the clean pass only feeds the accuracy
        let clean = model.forward_on(tape, params, xc)?;
        return Ok(SemTerms { total: label, label, penalty: None, clean_logits: clean.logits });
    }
    let r_i = model.extract(tape, params, xc)?;
    let clean_logits = model.head(tape, params, r_i)?;
    let r_i = if sem.stop_gradient_targets { tape.detach(r_i)? } else { r_i };
    let r_j = tape.gather_rows(r_i, &mixed.pair)?;
    let target = mix_representations(tape, r_i, r_j, mixed.lambda_eff)?;
    let diff = tape.sub(out.representation, target)?;
    let diff = tape.flatten(diff)?;
    let norms = tape.row_norms(diff, sem.penalty_variant == PenaltyVariant::SquaredNorm)?;
    let penalty = tape.mean(norms)?;
    let weighted = tape.scale(penalty, sem.gamma)?;
    let total = tape.add(label, weighted)?;
    Ok(SemTerms { total, label, penalty: Some(penalty), clean_logits })
}

/// Plain cross-entropy on an unmixed batch.
pub fn record_erm_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &ModelSpec,
    params: &[Var],
    x: &Tensor,
    y: &Tensor,
) -> Result<SemTerms> {
    let xv = tape.constant(x.cast())?;
    let out = model.forward_on(tape, params, xv)?;
    let label = tape.softmax_cross_entropy(out.logits, &y.cast())?;
    Ok(SemTerms { total: label, label, penalty: None, clean_logits: out.logits })
}

/// Evaluates the objective without gradients: `(total, label, sem)`.
pub fn sem_loss(model: &ModelSpec, x: &Tensor, mixed: &MixedBatch, sem: &SemConfig) -> Result<(Tensor, f64, f64)> {
    let mut tape = Tape::<f32>::new();
    let params = model.bind(&mut tape, false)?;
    let terms = record_sem_loss(&mut tape, model, &params, x, mixed, sem)?;
    let penalty = terms.penalty.map_or(Ok(0.0), |p| tape.value(p).item())?;
    Ok((tape.value(terms.total).clone(), tape.value(terms.label).item()? as f64, penalty as f64))
}

/// The full objective at a fixed batch, as a function of the parameters only.
pub struct SemObjective<'a> {
    pub model: &'a ModelSpec,
    pub x: &'a Tensor,
    pub mixed: &'a MixedBatch,
    pub sem: &'a SemConfig,
}

impl ShadowLoss for SemObjective<'_> {
    fn record<T: Element>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        Ok(record_sem_loss(tape, self.model, params, self.x, self.mixed, self.sem)?.total)
    }
}

fn correct(logits: &Tensor, y: &Tensor) -> usize {
    let k = y.row_len();
    logits
        .data()
        .chunks(k)
        .zip(y.data().chunks(k))
        .filter(|(z, t)| argmax(z) == argmax(t))
        .count()
}

/// Batch boundaries; a trailing single sample joins the previous batch so
/// every batch can be paired.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if end - start == 1 && !out.is_empty() {
            let last: &mut (usize, usize) = out.last_mut().unwrap();
            last.1 = end;
        } else {
            out.push((start, end));
        }
        start = end;
    }
    out
}

/// Random stream for 0-based `epoch`: the run seed, with the epoch as stream id.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One SGD step on `(x, y)`; returns `(total, label, sem, correct)` measured
/// before the update.
fn train_step(
    model: &mut ModelSpec,
    opt: &mut Sgd,
    x: &Tensor,
    y: &Tensor,
    mixed: Option<&MixedBatch>,
    sem: &SemConfig,
) -> Result<(f64, f64, f64, usize)> {
    let mut tape = Tape::<f32>::new();
    let params = model.bind(&mut tape, true)?;
    let terms = match mixed {
        Some(m) => record_sem_loss(&mut tape, model, &params, x, m, sem)?,
        None => record_erm_loss(&mut tape, model, &params, x, y)?,
    };
    let total = tape.value(terms.total).item()? as f64;
    let label = tape.value(terms.label).item()? as f64;
    let penalty = match terms.penalty {
        Some(p) => tape.value(p).item()? as f64,
        None => 0.0,
    };
    let hits = correct(tape.value(terms.clean_logits), y);
    tape.backward(terms.total)?;
    let mut values = model.param_tensors();
    for (value, &var) in values.iter_mut().zip(&params) {
        let grad = tape.grad(var).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; value.len()]);
        value.set_grad(grad)?;
    }
    opt.step(&mut values)?;
    let named = model.params().iter().map(|p| p.name.clone()).zip(values).collect();
    model.set_params(named)?;
    Ok((total, label, penalty, hits))
}

/// One pass over `data` in an order shuffled from the epoch stream. Each
/// batch draws its pairing, ratio and (for CutMix) box from the same stream.
pub fn train_epoch(
    model: &mut ModelSpec,
    opt: &mut Sgd,
    data: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    mixing_enabled: bool,
) -> Result<MetricsRecord> {
    if data.len() < 2 {
        return Err(Error::Usage(format!("training needs at least 2 samples, got {}", data.len())));
    }
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let (mut total, mut label, mut penalty, mut hits) = (0.0, 0.0, 0.0, 0usize);
    for (b, (start, end)) in batch_ranges(data.len(), config.batch_size).into_iter().enumerate() {
        let (x, y) = data.batch(&order[start..end])?;
        let mixed = if mixing_enabled { Some(make_mixed_batch(&x, &y, &config.mix, &mut rng)?) } else { None };
        let step = train_step(model, opt, &x, &y, mixed.as_ref(), &config.sem);
        let (t, l, p, h) = match step {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged { epoch: epoch + 1, batch: b, lr: opt.lr() });
            }
            other => other?,
        };
        let w = (end - start) as f64;
        total += t * w;
        label += l * w;
        penalty += p * w;
        hits += h;
    }
    let n = data.len() as f64;
    Ok(MetricsRecord {
        epoch: epoch + 1,
        split: "train".into(),
        loss_total: total / n,
        loss_label: label / n,
        loss_sem: penalty / n,
        accuracy: hits as f64 / n,
    })
}

/// Clean cross-entropy and accuracy, in chunks.
pub fn evaluate_split(model: &ModelSpec, data: &Dataset, epoch: usize, split: &str) -> Result<MetricsRecord> {
    let (mut loss, mut hits) = (0.0, 0usize);
    for (start, end) in batch_ranges(data.len(), 256) {
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = data.batch(&idx)?;
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false)?;
        let terms = record_erm_loss(&mut tape, model, &params, &x, &y)?;
        loss += tape.value(terms.label).item()? as f64 * (end - start) as f64;
        hits += correct(tape.value(terms.clean_logits), &y);
    }
    let n = data.len() as f64;
    Ok(MetricsRecord {
        epoch,
        split: split.into(),
        loss_total: loss / n,
        loss_label: loss / n,
        loss_sem: 0.0,
        accuracy: hits as f64 / n,
    })
}

/// Trains for `config.epochs`, handing every record to `sink` as it is made.
pub fn train_with(
    mut model: ModelSpec,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    config: &TrainConfig,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<ModelSpec> {
    config.validate()?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay)?;
    for epoch in 0..config.epochs {
        opt.set_lr(config.lr_schedule.lr_at(config.lr, epoch))?;
        let rec = train_epoch(&mut model, &mut opt, train_data, config, epoch, config.mixing_enabled(epoch))?;
        sink(&rec)?;
        if let Some(val) = val_data {
            sink(&evaluate_split(&model, val, epoch + 1, "val")?)?;
        }
    }
    Ok(model)
}

pub fn train(
    model: ModelSpec,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelSpec, Vec<MetricsRecord>)> {
    let mut records = Vec::new();
    let model = train_with(model, train_data, val_data, config, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((model, records))
}
