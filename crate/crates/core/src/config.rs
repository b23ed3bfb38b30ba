//! Flat `key=value` configuration for model shape and training. Unknown
//! keys are rejected; `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Dtype;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dtype: Dtype,
    // model shape
    pub d_emb: usize,
    pub heads: usize,
    pub layers: usize,
    pub region_layers: usize,
    /// 0 = auto (4 * d_emb)
    pub ff_hidden: usize,
    /// 0 = auto (d_emb)
    pub refine_hidden: usize,
    /// 0 = auto (d_emb); width of the frame-local fusion keys.
    pub d_key: usize,
    /// 0 = auto (d_emb); width of the matching space.
    pub match_dim: usize,
    /// Weight init standard deviation; 0 = fan-in scaled (1/sqrt(fan_in)).
    pub init_std: f64,
    pub keep_prob: f64,
    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    // objective weights
    pub beta_t: f64,
    pub beta_nt: f64,
    pub beta_distill: f64,
    pub beta_level1: f64,
    pub beta_level2: f64,
    pub deterministic: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dtype: Dtype::F32,
            d_emb: 64,
            heads: 8,
            layers: 2,
            region_layers: 2,
            ff_hidden: 0,
            refine_hidden: 0,
            d_key: 0,
            match_dim: 0,
            init_std: 0.0,
            keep_prob: 0.5,
            lr: 3e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            beta_t: 1.0,
            beta_nt: 1.0,
            beta_distill: 1.0,
            beta_level1: 1.0,
            beta_level2: 1.0,
            deterministic: false,
        }
    }
}

impl Config {
    pub fn ff_hidden_or_default(&self) -> usize {
        if self.ff_hidden == 0 {
            4 * self.d_emb
        } else {
            self.ff_hidden
        }
    }

    pub fn refine_hidden_or_default(&self) -> usize {
        if self.refine_hidden == 0 {
            self.d_emb
        } else {
            self.refine_hidden
        }
    }

    pub fn d_key_or_default(&self) -> usize {
        if self.d_key == 0 {
            self.d_emb
        } else {
            self.d_key
        }
    }

    pub fn match_dim_or_default(&self) -> usize {
        if self.match_dim == 0 {
            self.d_emb
        } else {
            self.match_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_emb", self.d_emb),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_emb % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_emb {} must be divisible by heads {}",
                self.d_emb, self.heads
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob must be in (0, 1], got {}",
                self.keep_prob
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_std must be nonnegative (0 = fan-in scaled), got {}",
                self.init_std
            )));
        }
        for (name, v) in [
            ("beta_t", self.beta_t),
            ("beta_nt", self.beta_nt),
            ("beta_distill", self.beta_distill),
            ("beta_level1", self.beta_level1),
            ("beta_level2", self.beta_level2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0)
        {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                detail: format!("expected key=value, got {raw:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            // beta_distill_1/2 are accepted as aliases of the per-level
            // weights (the distillation objective reuses them).
            let canonical = match key {
                "beta_distill_1" => "beta_level1",
                "beta_distill_2" => "beta_level2",
                other => other,
            };
            if seen.iter().any(|s| s == canonical) {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("duplicate key {key:?}"),
                });
            }
            seen.push(canonical.to_string());
            let bad = |detail: String| Error::Parse { line: i + 1, detail };
            macro_rules! parse_into {
                ($field:expr, $ty:ty) => {
                    $field = value
                        .parse::<$ty>()
                        .map_err(|e| bad(format!("{key}: {e}")))?
                };
            }
            match canonical {
                "dtype" => {
                    cfg.dtype = match value {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        other => return Err(bad(format!("dtype must be f32 or f64, got {other:?}"))),
                    }
                }
                "d_emb" => parse_into!(cfg.d_emb, usize),
                "heads" => parse_into!(cfg.heads, usize),
                "layers" => parse_into!(cfg.layers, usize),
                "region_layers" => parse_into!(cfg.region_layers, usize),
                "ff_hidden" => parse_into!(cfg.ff_hidden, usize),
                "refine_hidden" => parse_into!(cfg.refine_hidden, usize),
                "d_key" => parse_into!(cfg.d_key, usize),
                "match_dim" => parse_into!(cfg.match_dim, usize),
                "init_std" => parse_into!(cfg.init_std, f64),
                "keep_prob" => parse_into!(cfg.keep_prob, f64),
                "lr" => parse_into!(cfg.lr, f64),
                "weight_decay" => parse_into!(cfg.weight_decay, f64),
                "adam_beta1" => parse_into!(cfg.adam_beta1, f64),
                "adam_beta2" => parse_into!(cfg.adam_beta2, f64),
                "adam_eps" => parse_into!(cfg.adam_eps, f64),
                "batch_size" => parse_into!(cfg.batch_size, usize),
                "max_epochs" => parse_into!(cfg.max_epochs, usize),
                "patience" => parse_into!(cfg.patience, usize),
                "seed" => parse_into!(cfg.seed, u64),
                "beta_t" => parse_into!(cfg.beta_t, f64),
                "beta_nt" => parse_into!(cfg.beta_nt, f64),
                "beta_distill" => parse_into!(cfg.beta_distill, f64),
                "beta_level1" => parse_into!(cfg.beta_level1, f64),
                "beta_level2" => parse_into!(cfg.beta_level2, f64),
                "deterministic" => parse_into!(cfg.deterministic, bool),
                unknown => {
                    return Err(bad(format!("unknown key {unknown:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization; embedded in checkpoints so eval and infer
    /// can rebuild the model without the original config file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("dtype", self.dtype.to_string());
        kv("d_emb", self.d_emb.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("region_layers", self.region_layers.to_string());
        kv("ff_hidden", self.ff_hidden.to_string());
        kv("refine_hidden", self.refine_hidden.to_string());
        kv("d_key", self.d_key.to_string());
        kv("match_dim", self.match_dim.to_string());
        kv("init_std", format!("{:?}", self.init_std));
        kv("keep_prob", format!("{:?}", self.keep_prob));
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("adam_beta1", format!("{:?}", self.adam_beta1));
        kv("adam_beta2", format!("{:?}", self.adam_beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("seed", self.seed.to_string());
        kv("beta_t", format!("{:?}", self.beta_t));
        kv("beta_nt", format!("{:?}", self.beta_nt));
        kv("beta_distill", format!("{:?}", self.beta_distill));
        kv("beta_level1", format!("{:?}", self.beta_level1));
        kv("beta_level2", format!("{:?}", self.beta_level2));
        kv("deterministic", self.deterministic.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = Config::default();
        cfg.d_emb = 192;
        cfg.heads = 4;
        cfg.lr = 1e-4;
        cfg.deterministic = true;
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Config::parse("nonsense=1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn paper_sweep_learning_rates_accepted() {
        for lr in ["1e-1", "3e-4", "1e-4", "3e-5", "1e-5"] {
            let cfg = Config::parse(&format!("lr={lr}\n")).unwrap();
            assert!(cfg.lr > 0.0);
        }
    }

    #[test]
    fn paper_batch_sizes_accepted() {
        for bs in [8usize, 16, 32] {
            let cfg = Config::parse(&format!("batch_size={bs}\n")).unwrap();
            assert_eq!(cfg.batch_size, bs);
        }
    }

    #[test]
    fn distill_level_aliases_map_onto_level_weights() {
        let cfg = Config::parse("beta_distill_1=0.5\nbeta_distill_2=2.0\n").unwrap();
        assert_eq!(cfg.beta_level1, 0.5);
        assert_eq!(cfg.beta_level2, 2.0);
        // Alias and canonical name together collide.
        assert!(Config::parse("beta_distill_1=0.5\nbeta_level1=1.0\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::parse("keep_prob=0\n").is_err());
        assert!(Config::parse("lr=-1\n").is_err());
        assert!(Config::parse("d_emb=65\nheads=8\n").is_err());
        assert!(Config::parse("batch_size=0\n").is_err());
    }
}
