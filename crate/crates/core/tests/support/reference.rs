#![allow(dead_code)]

// Plain mixup trainer built from the tape, the model forward and the Beta
// sampler only. Shares nothing with the library's training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semix::data::Dataset;
use semix::mixing::sample_lambda;
use semix::models::ModelSpec;
use semix::tensor::{argmax, scale_add_values, Tape, Tensor};

pub struct RefConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub es_epochs: usize,
    pub seed: u64,
}

pub struct RefTrainer {
    pub model: ModelSpec,
    velocity: Vec<Vec<f32>>,
    pub steps: usize,
}

impl RefTrainer {
    pub fn new(model: ModelSpec) -> Self {
        let velocity = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        RefTrainer { model, velocity, steps: 0 }
    }

    fn sgd(&mut self, grads: Vec<Vec<f32>>, lr: f32, cfg: &RefConfig) {
        let (m, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
        for ((param, vel), grad) in self.model.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((p, v), g) in param.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }

    /// Runs 0-based `epoch`; returns the mean label loss.
    pub fn epoch(&mut self, data: &Dataset, cfg: &RefConfig, epoch: usize) -> f64 {
        self.epoch_metrics(data, cfg, epoch).0
    }

    /// Runs 0-based `epoch`; returns the mean label loss and the accuracy on
    /// the clean batches, both measured before each update.
    pub fn epoch_metrics(&mut self, data: &Dataset, cfg: &RefConfig, epoch: usize) -> (f64, f64) {
        let decays = cfg.milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
        let lr = (cfg.lr * cfg.factor.powi(decays as i32)) as f32;
        let mixing = epoch < cfg.epochs - cfg.es_epochs;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut bounds: Vec<(usize, usize)> = Vec::new();
        for start in (0..data.len()).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(data.len());
            match bounds.last_mut() {
                Some(last) if end - start == 1 => last.1 = end,
                _ => bounds.push((start, end)),
            }
        }

        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (start, end) in bounds {
            let idx = &order[start..end];
            let x = data.images().select_rows(idx).unwrap();
            let y = data.labels().select_rows(idx).unwrap();
            hits += hits_of(&self.model.forward(&x).unwrap().logits, &y);
            let (xm, ym) = if mixing {
                let mut perm: Vec<usize> = (0..idx.len()).collect();
                perm.shuffle(&mut rng);
                let lam = sample_lambda(cfg.alpha, &mut rng).unwrap() as f32;
                let xj = x.select_rows(&perm).unwrap();
                let yj = y.select_rows(&perm).unwrap();
                (scale_add_values(&x, &xj, lam).unwrap(), scale_add_values(&y, &yj, lam).unwrap())
            } else {
                (x, y)
            };
            let mut tape = Tape::<f32>::new();
            let params = self.model.bind(&mut tape, true).unwrap();
            let xv = tape.constant(xm).unwrap();
            let out = self.model.forward_on(&mut tape, &params, xv).unwrap();
            let loss = tape.softmax_cross_entropy(out.logits, &ym).unwrap();
            loss_sum += tape.value(loss).item().unwrap() as f64 * (end - start) as f64;
            tape.backward(loss).unwrap();
            let grads = params
                .iter()
                .zip(self.model.params())
                .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]))
                .collect();
            self.sgd(grads, lr, cfg);
            self.steps += 1;
        }
        (loss_sum / data.len() as f64, hits as f64 / data.len() as f64)
    }
}

fn hits_of(logits: &Tensor, y: &Tensor) -> usize {
    (0..y.rows()).filter(|&r| argmax(logits.row(r)) == argmax(y.row(r))).count()
}

/// Clean loss and accuracy over `data` in chunks of 256.
pub fn evaluate(model: &ModelSpec, data: &Dataset) -> (f64, f64) {
    let (mut loss, mut hits) = (0.0, 0usize);
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let x = data.images().select_rows(&idx).unwrap();
        let y = data.labels().select_rows(&idx).unwrap();
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false).unwrap();
        let xv = tape.constant(x).unwrap();
        let out = model.forward_on(&mut tape, &params, xv).unwrap();
        let l = tape.softmax_cross_entropy(out.logits, &y).unwrap();
        loss += tape.value(l).item().unwrap() as f64 * (end - start) as f64;
        hits += hits_of(tape.value(out.logits), &y);
    }
    (loss / data.len() as f64, hits as f64 / data.len() as f64)
}

/// Largest `|a - b| / max(|a|, |b|)` over all parameters (0 where both are 0).
pub fn max_relative_diff(a: &ModelSpec, b: &ModelSpec) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()))
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
