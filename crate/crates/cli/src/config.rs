//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use semix::mixing::{MixKind, MixPolicy};
use semix::training::{LrSchedule, PenaltyVariant, SemConfig, TrainConfig};
use semix::{Error, Result};

pub const SEED_ENV: &str = "SEMX_SEED";

pub const KEYS: [&str; 17] = [
    "dataset",
    "model",
    "epochs",
    "batch_size",
    "lr",
    "lr_milestones",
    "lr_factor",
    "momentum",
    "weight_decay",
    "mix_kind",
    "alpha",
    "gamma",
    "stop_gradient_targets",
    "penalty_variant",
    "es_fraction",
    "seed",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` resolves to decay at 50% and 75% of the epochs.
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mix_kind: MixKind,
    pub alpha: f64,
    pub gamma: f64,
    pub stop_gradient_targets: bool,
    pub penalty_variant: PenaltyVariant,
    pub es_fraction: f64,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synth_shapes".into(),
            model: "small_cnn".into(),
            epochs: 30,
            batch_size: 64,
            lr: 0.02,
            lr_milestones: None,
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            mix_kind: MixKind::Linear,
            alpha: 1.0,
            gamma: 0.5,
            stop_gradient_targets: false,
            penalty_variant: PenaltyVariant::Norm,
            es_fraction: 0.1,
            seed: 0,
            out_dir: "runs/default".into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "model" => self.model = v.to_string(),
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_milestones" => {
                self.lr_milestones = if v.is_empty() || v == "auto" {
                    None
                } else {
                    Some(v.split(',').map(|m| num(key, m.trim())).collect::<Result<_>>()?)
                }
            }
            "lr_factor" => self.lr_factor = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "mix_kind" => self.mix_kind = v.parse()?,
            "alpha" => self.alpha = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "stop_gradient_targets" => self.stop_gradient_targets = num(key, v)?,
            "penalty_variant" => self.penalty_variant = v.parse()?,
            "es_fraction" => self.es_fraction = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`. Errors name the offending line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}: `{raw}`", no + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected `key = value`".into()))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(at(format!("unknown key `{key}`")));
            }
            if seen.contains(&key) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Defaults, then the file, then `SEMX_SEED`, then explicit overrides.
    pub fn resolve(file_text: Option<&str>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        if let Some(seed) = env_seed {
            cfg.seed = num(SEED_ENV, seed)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v).map_err(|e| Error::Config(format!("--{k} {v}: {e}")))?;
        }
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.lr_milestones.clone().unwrap_or_else(|| LrSchedule::step_decay(self.epochs).milestones)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mix = if self.mix_kind == MixKind::None {
            MixPolicy { kind: MixKind::None, alpha: self.alpha }
        } else {
            MixPolicy::new(self.mix_kind, self.alpha)?
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: LrSchedule { milestones: self.milestones(), factor: self.lr_factor },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            mix,
            sem: SemConfig {
                gamma: self.gamma,
                stop_gradient_targets: self.stop_gradient_targets,
                penalty_variant: self.penalty_variant,
            },
            es_fraction: self.es_fraction,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in canonical order. Parses back to
    /// an identical config.
    pub fn to_text(&self) -> String {
        let milestones: Vec<String> = self.milestones().iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("dataset", self.dataset.clone());
        put("model", self.model.clone());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("lr_milestones", milestones.join(","));
        put("lr_factor", self.lr_factor.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("mix_kind", self.mix_kind.to_string());
        put("alpha", self.alpha.to_string());
        put("gamma", self.gamma.to_string());
        put("stop_gradient_targets", self.stop_gradient_targets.to_string());
        put("penalty_variant", self.penalty_variant.to_string());
        put("es_fraction", self.es_fraction.to_string());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.clone());
        if self.mix_kind == MixKind::CutMix {
            s.push_str("# representations mix with the realised box area ratio\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_milestones() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.milestones(), vec![15, 23]);
        assert!(cfg.train_config().is_ok());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::parse("gamma = 0.25\nmix_kind = cutmix\nlr_milestones = 3, 7\n").unwrap();
        cfg.lr = 0.013;
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap().to_text(), RunConfig::default().to_text());
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse("# c\nepochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("line 3") && msg.contains("learning_rate = 0.1"), "{msg}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(RunConfig::parse("epochs 3").is_err());
        assert!(RunConfig::parse("epochs = three").is_err());
        assert!(RunConfig::parse("epochs = 3\nepochs = 4").is_err());
        assert!(RunConfig::parse("mix_kind = blend").is_err());
    }

    #[test]
    fn seed_precedence() {
        let file = "seed = 5\n";
        assert_eq!(RunConfig::resolve(None, None, &[]).unwrap().seed, 0);
        assert_eq!(RunConfig::resolve(Some(file), None, &[]).unwrap().seed, 5);
        assert_eq!(RunConfig::resolve(Some(file), Some("7"), &[]).unwrap().seed, 7);
        let flag = [("seed".to_string(), "9".to_string())];
        assert_eq!(RunConfig::resolve(Some(file), Some("7"), &flag).unwrap().seed, 9);
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
    }
}
