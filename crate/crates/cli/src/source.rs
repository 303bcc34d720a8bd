//! Dataset and model specifiers.
//!
//! ```text
//! synth_shapes[:n=6000,hw=16,classes=3,noise=0.05,seed=0]
//! noise[:n=..,c=..,hw=..,classes=..,seed=..]
//! idx:<images>:<labels>
//! cifar:<file>
//! ```

use std::str::FromStr;

use semix::data::{read_cifar_binary, read_idx, split, synth_shapes, uniform_noise, Dataset};
use semix::models::{LayerDesc, ModelSpec};
use semix::{Error, Result};

/// Train/test fractions applied to every source.
pub const SPLIT: [f64; 2] = [0.8, 0.2];
pub const SPLIT_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
    All,
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "test" => Ok(Part::Test),
            "all" => Ok(Part::All),
            other => Err(Error::Config(format!("unknown split `{other}` (train, test, all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Synth { n: usize, hw: usize, classes: usize, noise: f64, seed: u64 },
    Noise { n: usize, channels: usize, hw: usize, classes: usize, seed: u64 },
    Idx { images: String, labels: String },
    Cifar { path: String },
}

fn options(body: &str) -> Result<Vec<(&str, &str)>> {
    body.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("dataset option `{kv}` is not key=value")))
        })
        .collect()
}

fn opt<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("dataset option {key}: cannot parse {value:?}")))
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let (head, body) = spec.split_once(':').unwrap_or((spec, ""));
        match head {
            "synth_shapes" => {
                let (mut n, mut hw, mut classes, mut noise, mut seed) = (6000, 16, 3, 0.05, 0);
                for (k, v) in options(body)? {
                    match k {
                        "n" => n = opt(k, v)?,
                        "hw" => hw = opt(k, v)?,
                        "classes" => classes = opt(k, v)?,
                        "noise" => noise = opt(k, v)?,
                        "seed" => seed = opt(k, v)?,
                        _ => return Err(Error::Config(format!("synth_shapes has no option `{k}`"))),
                    }
                }
                Ok(Source::Synth { n, hw, classes, noise, seed })
            }
            "noise" => {
                let (mut n, mut channels, mut hw, mut classes, mut seed) = (1000, 1, 16, 3, 0);
                for (k, v) in options(body)? {
                    match k {
                        "n" => n = opt(k, v)?,
                        "c" => channels = opt(k, v)?,
                        "hw" => hw = opt(k, v)?,
                        "classes" => classes = opt(k, v)?,
                        "seed" => seed = opt(k, v)?,
                        _ => return Err(Error::Config(format!("noise has no option `{k}`"))),
                    }
                }
                Ok(Source::Noise { n, channels, hw, classes, seed })
            }
            "idx" => match body.split_once(':') {
                Some((images, labels)) if !images.is_empty() && !labels.is_empty() => {
                    Ok(Source::Idx { images: images.into(), labels: labels.into() })
                }
                _ => Err(Error::Config(format!("expected idx:<images>:<labels>, got `{spec}`"))),
            },
            "cifar" if !body.is_empty() => Ok(Source::Cifar { path: body.into() }),
            _ => Err(Error::Config(format!("unknown dataset `{spec}`"))),
        }
    }
}

impl Source {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            Source::Synth { n, hw, classes, noise, seed } => synth_shapes(*n, *hw, *classes, *noise, *seed),
            Source::Noise { n, channels, hw, classes, seed } => {
                uniform_noise(*n, &[*channels, *hw, *hw], *classes, *seed)
            }
            Source::Idx { images, labels } => read_idx(images, labels),
            Source::Cifar { path } => read_cifar_binary(path),
        }
    }

    pub fn load_part(&self, part: Part) -> Result<Dataset> {
        let data = self.load()?;
        if part == Part::All {
            return Ok(data);
        }
        let mut parts = split(&data, &SPLIT, SPLIT_SEED)?;
        let keep = if part == Part::Train { 0 } else { 1 };
        Ok(parts.swap_remove(keep))
    }
}

pub fn load(spec: &str, part: Part) -> Result<Dataset> {
    spec.parse::<Source>()?.load_part(part)
}

/// Builds a freshly initialised model of the named architecture.
pub fn build_model(name: &str, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelSpec> {
    let mut descs = Vec::new();
    if input_shape.len() > 1 {
        descs.push(LayerDesc::Flatten);
    }
    match name {
        "small_cnn" => {
            if input_shape.len() != 3 || input_shape[1] != input_shape[2] {
                return Err(Error::Config(format!("small_cnn needs square C x H x W input, got {input_shape:?}")));
            }
            return ModelSpec::small_cnn(input_shape[0], input_shape[1], classes, seed);
        }
        "small_mlp" => {
            for out in [128, 64] {
                descs.extend([LayerDesc::Dense { out }, LayerDesc::Relu]);
            }
        }
        "linear" => descs.push(LayerDesc::Dense { out: 32 }),
        other => return Err(Error::Config(format!("unknown model `{other}` (small_cnn, small_mlp, linear)"))),
    }
    ModelSpec::new(input_shape, &descs, classes, seed)
}
