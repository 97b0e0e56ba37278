//! Line-oriented `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! consumed by the reader; leftovers are reported as unknown keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::ModelFlags;

#[derive(Debug, Clone)]
pub struct KeyValues {
    origin: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let origin = origin.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin,
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin,
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if let Some((first, _)) = entries.insert(key.clone(), (i + 1, v.trim().to_string())) {
                return Err(Error::Parse {
                    path: origin,
                    line: i + 1,
                    msg: format!("duplicate key {key:?} (first on line {first})"),
                });
            }
        }
        Ok(Self { origin, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Removes `key` and parses it, or returns `default` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| Error::Parse {
                path: self.origin.clone(),
                line,
                msg: format!("cannot parse value {v:?} for {key}"),
            }),
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse {
                path: self.origin,
                line: *line,
                msg: format!("unknown key {k:?}"),
            }),
        }
    }
}

/// Optimization and loss settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_steps_per_g_step: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub paper_literal_decoder_relu: bool,
    pub generator_linear_head: bool,
    pub saturating_gan: bool,
    /// Zero the last layer of the recognizer and discriminator at init.
    pub zero_init_heads: bool,
    /// Subtract the per-vertex mean training shape before the global
    /// scale, instead of only the centroid.
    pub template_normalization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 300,
            batch_size: 16,
            d_steps_per_g_step: 1,
            train_fraction: 0.7,
            seed: 0,
            paper_literal_decoder_relu: false,
            generator_linear_head: false,
            saturating_gan: false,
            zero_init_heads: false,
            template_normalization: true,
        }
    }
}

impl TrainConfig {
    pub fn model_flags(&self) -> ModelFlags {
        ModelFlags {
            paper_literal_decoder_relu: self.paper_literal_decoder_relu,
            generator_linear_head: self.generator_linear_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return bad("epochs, batch_size and d_steps_per_g_step must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            weights: LossWeights {
                l2l: kv.take("lambda_l2l", d.weights.l2l)?,
                l1: kv.take("lambda_l1", d.weights.l1)?,
                gan: kv.take("lambda_gan", d.weights.gan)?,
                id: kv.take("lambda_id", d.weights.id)?,
                rec: kv.take("lambda_rec", d.weights.rec)?,
            },
            learning_rate: kv.take("learning_rate", d.learning_rate)?,
            beta1: kv.take("beta1", d.beta1)?,
            beta2: kv.take("beta2", d.beta2)?,
            adam_eps: kv.take("adam_eps", d.adam_eps)?,
            epochs: kv.take("epochs", d.epochs)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            d_steps_per_g_step: kv.take("d_steps_per_g_step", d.d_steps_per_g_step)?,
            train_fraction: kv.take("train_fraction", d.train_fraction)?,
            seed: kv.take("seed", d.seed)?,
            paper_literal_decoder_relu: kv.take("paper_literal_decoder_relu", d.paper_literal_decoder_relu)?,
            generator_linear_head: kv.take("generator_linear_head", d.generator_linear_head)?,
            saturating_gan: kv.take("saturating_gan", d.saturating_gan)?,
            zero_init_heads: kv.take("zero_init_heads", d.zero_init_heads)?,
            template_normalization: kv.take("template_normalization", d.template_normalization)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text, "<config>")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let pairs: [(&str, String); 19] = [
            ("lambda_l2l", w.l2l.to_string()),
            ("lambda_l1", w.l1.to_string()),
            ("lambda_gan", w.gan.to_string()),
            ("lambda_id", w.id.to_string()),
            ("lambda_rec", w.rec.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("d_steps_per_g_step", self.d_steps_per_g_step.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("paper_literal_decoder_relu", self.paper_literal_decoder_relu.to_string()),
            ("generator_linear_head", self.generator_linear_head.to_string()),
            ("saturating_gan", self.saturating_gan.to_string()),
            ("zero_init_heads", self.zero_init_heads.to_string()),
            ("template_normalization", self.template_normalization.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let d = TrainConfig::parse("").unwrap();
        assert_eq!(d, TrainConfig::default());
        assert_eq!(d.weights, LossWeights::default());
        assert_eq!((d.learning_rate, d.beta1, d.beta2), (1e-3, 0.9, 0.999));
        assert_eq!((d.epochs, d.batch_size, d.d_steps_per_g_step), (300, 16, 1));

        let cfg = TrainConfig::parse("# comment\nepochs = 5\n lambda_id=0\nlearning_rate = 3e-4\nzero_init_heads = true\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.weights.id, 0.0);
        assert!(cfg.zero_init_heads);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(matches!(TrainConfig::parse("epoch = 3"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("\nepochs = x"), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::parse("epochs = 3\nepochs = 4").is_err());
        assert!(TrainConfig::parse("just words").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
        assert!(TrainConfig::parse("learning_rate = -1").is_err());
        assert!(TrainConfig::parse("train_fraction = 1").is_err());
        assert!(TrainConfig::parse("lambda_rec = -2").is_err());
    }
}
