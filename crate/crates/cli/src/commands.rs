//! Subcommand bodies. Each returns its result instead of printing so tests
//! can drive them directly.

use std::any::TypeId;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use semix::data::{write_idx, Dataset};
use semix::evaluation::{
    accuracy, auroc, corruption_suite_eval, equivariance_gap, forward_all, msp_scores, pca_project, projection_csv,
    CorruptionKind, GapCurve,
};
use semix::mixing::{make_mixed_batch, MixKind, MixPolicy};
use semix::models::{LayerDesc, ModelSpec};
use semix::tensor::gradcheck::{check, ShadowLoss, STEP};
use semix::tensor::{scale_add_values, Element};
use semix::training::{train_with, MetricsRecord, SemConfig, SemObjective};
use semix::{Error, Result, Tape, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::metrics::MetricsWriter;
use crate::source::{build_model, load, Part};

pub const MODEL_FILE: &str = "model.semx";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub struct TrainOutput {
    pub model: ModelSpec,
    pub records: Vec<MetricsRecord>,
    pub out_dir: PathBuf,
}

/// Trains on the train part of `config.dataset`, validating on the test part.
pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    let train_cfg = config.train_config()?;
    let train_data = load(&config.dataset, Part::Train)?;
    let val_data = load(&config.dataset, Part::Test)?;
    let model = build_model(&config.model, train_data.sample_shape(), train_data.classes(), config.seed)?;
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join(RESOLVED_FILE), config.to_text())?;
    let mut writer = MetricsWriter::create(out_dir.join(METRICS_FILE))?;
    let mut records = Vec::new();
    let model = train_with(model, &train_data, Some(&val_data), &train_cfg, |r| {
        records.push(r.clone());
        writer.append(r)
    })?;
    Checkpoint::from_model(config, &model).save(out_dir.join(MODEL_FILE))?;
    Ok(TrainOutput { model, records, out_dir })
}

fn with_echo(ckpt: &Checkpoint, mut body: Map<String, Value>) -> Value {
    body.insert("config".into(), Value::String(ckpt.echo.clone()));
    Value::Object(body)
}

/// Dataset spec of an evaluation, falling back to the one the model was
/// trained on.
fn dataset_spec(ckpt: &Checkpoint, spec: Option<&str>) -> Result<String> {
    Ok(match spec {
        Some(s) => s.to_string(),
        None => ckpt.config()?.dataset,
    })
}

pub fn eval(checkpoint: &Path, dataset: Option<&str>, part: Part) -> Result<Value> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let spec = dataset_spec(&ckpt, dataset)?;
    let data = load(&spec, part)?;
    let acc = accuracy(&model, &data)?;
    let mut body = Map::new();
    body.insert("accuracy".into(), json!(acc));
    body.insert("dataset".into(), json!(spec));
    body.insert("samples".into(), json!(data.len()));
    Ok(with_echo(&ckpt, body))
}

pub fn corrupt_eval(checkpoint: &Path, dataset: Option<&str>, part: Part, seed: u64) -> Result<Value> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let spec = dataset_spec(&ckpt, dataset)?;
    let data = load(&spec, part)?;
    let suite = corruption_suite_eval(&model, &data, seed)?;
    let mut cells = Map::new();
    for kind in CorruptionKind::ALL {
        let row: Vec<f64> = suite.cells.iter().filter(|(s, _)| s.kind() == kind).map(|c| c.1).collect();
        cells.insert(kind.to_string(), json!(row));
    }
    let mut body = Map::new();
    body.insert("per_kind_per_severity".into(), Value::Object(cells));
    body.insert("mean".into(), json!(suite.mean_accuracy));
    body.insert("dataset".into(), json!(spec));
    body.insert("seed".into(), json!(seed));
    Ok(with_echo(&ckpt, body))
}

pub fn ood_eval(checkpoint: &Path, id_dataset: Option<&str>, ood_dataset: &str, part: Part) -> Result<Value> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let id_spec = dataset_spec(&ckpt, id_dataset)?;
    let id = load(&id_spec, part)?;
    let ood = load(ood_dataset, part)?;
    if ood.sample_shape() != id.sample_shape() {
        return Err(Error::Usage(format!(
            "OOD samples {:?} do not match the model input {:?}",
            ood.sample_shape(),
            id.sample_shape()
        )));
    }
    let score = auroc(&msp_scores(&model, id.images())?, &msp_scores(&model, ood.images())?)?;
    let mut body = Map::new();
    body.insert("auroc".into(), json!(score));
    body.insert("id_dataset".into(), json!(id_spec));
    body.insert("ood_dataset".into(), json!(ood_dataset));
    Ok(with_echo(&ckpt, body))
}

/// `0, step, ..., 1`; `step` must divide one.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("lambda_step must be in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("lambda_step {step} does not divide 1")));
    }
    let n = n as usize;
    Ok((0..=n).map(|k| k as f64 / n as f64).collect())
}

pub struct ProbeArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: Option<&'a str>,
    pub part: Part,
    pub class_a: usize,
    pub class_b: usize,
    pub pair_count: usize,
    pub lambda_step: f64,
    pub seed: u64,
    pub out_dir: &'a Path,
}

pub struct ProbeOutput {
    pub curve: GapCurve,
    pub gap_csv: PathBuf,
    pub projection_csv: PathBuf,
}

fn class_sample(data: &Dataset, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = data.label_indices().iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
    if idx.len() < count {
        return Err(Error::Usage(format!("class {class} has {} samples, {count} pairs requested", idx.len())));
    }
    idx.shuffle(rng);
    idx.truncate(count);
    Ok(idx)
}

/// Pairs class-a with class-b samples, sweeps λ, writes `gap_curve.csv`
/// and a 2-D PCA of the mixed-sample representations to `projection.csv`.
/// Rows of the projection are tagged with the class holding the larger share.
pub fn probe(args: &ProbeArgs) -> Result<ProbeOutput> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let model = ckpt.model()?;
    let data = load(&dataset_spec(&ckpt, args.dataset)?, args.part)?;
    for c in [args.class_a, args.class_b] {
        if c >= data.classes() {
            return Err(Error::Usage(format!("class {c} not in dataset with {} classes", data.classes())));
        }
    }
    if args.class_a == args.class_b || args.pair_count == 0 {
        return Err(Error::Usage("probe needs two distinct classes and at least one pair".into()));
    }
    let lambdas = lambda_grid(args.lambda_step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let a = class_sample(&data, args.class_a, args.pair_count, &mut rng)?;
    let b = class_sample(&data, args.class_b, args.pair_count, &mut rng)?;
    let (x_i, _) = data.batch(&a)?;
    let (x_j, _) = data.batch(&b)?;
    let curve = equivariance_gap(&model, &x_i, &x_j, &lambdas)?;

    let mut reps = Vec::new();
    let (mut tags, mut owners) = (Vec::new(), Vec::new());
    for &l in &lambdas {
        let (_, r) = forward_all(&model, &scale_add_values(&x_i, &x_j, l as f32)?)?;
        reps.push(r);
        tags.extend(std::iter::repeat_n(l, args.pair_count));
        let owner = if l >= 0.5 { args.class_a } else { args.class_b };
        owners.extend(std::iter::repeat_n(owner, args.pair_count));
    }
    let stacked = Tensor::concat_rows(&reps.iter().collect::<Vec<_>>())?;
    let pca = pca_project(&stacked, 2)?;

    fs::create_dir_all(args.out_dir)?;
    let gap_csv = args.out_dir.join("gap_curve.csv");
    let projection = args.out_dir.join("projection.csv");
    fs::write(&gap_csv, curve.to_csv())?;
    fs::write(&projection, projection_csv(&pca.projection, &tags, &owners)?)?;
    fs::write(args.out_dir.join(RESOLVED_FILE), &ckpt.echo)?;
    Ok(ProbeOutput { curve, gap_csv, projection_csv: projection })
}

/// Writes the chosen part of a dataset as an IDX image/label file pair.
pub fn gen_data(dataset: &str, part: Part, images: &Path, labels: &Path) -> Result<Dataset> {
    let data = load(dataset, part)?;
    write_idx(&data, images, labels)?;
    Ok(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            crate::EXIT_CHECK
        }
    }
}

/// Two-block conv net on `1 x 8 x 8` inputs, well under 5k parameters.
pub fn gradcheck_model(seed: u64) -> Result<ModelSpec> {
    let descs = [
        LayerDesc::Conv { filters: 4, kernel: 3, stride: 1, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool(2),
        LayerDesc::Conv { filters: 4, kernel: 3, stride: 1, pad: 1 },
        LayerDesc::Relu,
        LayerDesc::AvgPool(2),
        LayerDesc::Flatten,
        LayerDesc::Dense { out: 8 },
    ];
    ModelSpec::new(&[1, 8, 8], &descs, 3, seed)
}

/// Random batch of six samples, mixed, with γ = 0.5.
pub fn gradcheck_problem(seed: u64) -> Result<(ModelSpec, Tensor, semix::mixing::MixedBatch, SemConfig)> {
    use rand::Rng;
    let model = gradcheck_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::new([6, 1, 8, 8], (0..6 * 64).map(|_| rng.random::<f32>()).collect())?;
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let y = Tensor::one_hot(&labels, 3)?;
    let mixed = make_mixed_batch(&x, &y, &MixPolicy::new(MixKind::Linear, 1.0)?, &mut rng)?;
    Ok((model, x, mixed, SemConfig::new(0.5)?))
}

/// Runs the central-difference check of `loss` against `model`'s parameters.
pub fn gradcheck_with<L: ShadowLoss>(loss: &L, model: &ModelSpec) -> Result<GradcheckOutcome> {
    let report = check(loss, &model.param_tensors(), STEP)?;
    Ok(GradcheckOutcome {
        max_rel_error: report.max_rel_error,
        worst_param: model.params()[report.worst.0].name.clone(),
        checked: report.checked,
        skipped_kinks: report.skipped_kinks,
    })
}

pub fn gradcheck(seed: u64) -> Result<GradcheckOutcome> {
    let (model, x, mixed, sem) = gradcheck_problem(seed)?;
    gradcheck_with(&SemObjective { model: &model, x: &x, mixed: &mixed, sem: &sem }, &model)
}

/// Wraps an objective so that only the single-precision recording, whose
/// backward pass supplies the analytic gradient, is scaled.
pub struct SkewedBackward<L> {
    pub inner: L,
    pub scale: f64,
}

impl<L: ShadowLoss> ShadowLoss for SkewedBackward<L> {
    fn record<T: Element>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let out = self.inner.record(tape, params)?;
        if TypeId::of::<T>() == TypeId::of::<f32>() {
            tape.scale(out, self.scale)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(lambda_grid(0.1).unwrap().len(), 11);
        assert_eq!(lambda_grid(0.25).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(lambda_grid(1.0).unwrap(), vec![0.0, 1.0]);
        assert!(lambda_grid(0.3).is_err());
        assert!(lambda_grid(0.0).is_err());
    }

    #[test]
    fn gradcheck_model_is_small() {
        assert!(gradcheck_model(0).unwrap().param_count() <= 5000);
    }
}
