//! Run configuration: line-based `key = value` files with `#` comments.
//! Unknown keys are rejected so a typo never silently falls back to a
//! default.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsidata::SynthConfig;
use crate::trainpipe::{Batching, TrainConfig};

/// Shape of the synthetic task; everything else comes from
/// [`SynthConfig::desk`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub classes: usize,
    pub domains: usize,
    pub bands: usize,
    pub samples_per_cell: usize,
    pub noise_sigma: f64,
    pub latent_scale: f64,
    pub domain_jitter: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            classes: d.classes,
            domains: d.domains,
            bands: d.bands,
            samples_per_cell: d.samples_per_cell,
            noise_sigma: d.noise_sigma,
            latent_scale: d.latent_scale,
            domain_jitter: d.domain_jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySettings {
    /// Run the probes after training.
    pub enabled: bool,
    pub check_batches: usize,
    pub check_batch: usize,
    /// True-domain softmax a sample needs to enter the Theorem 1 check.
    pub confidence: f64,
    pub entropy_draws: usize,
    pub entropy_batch: usize,
    pub bound_gamma: f64,
    pub bound_samples: usize,
    pub fisher_batch: usize,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            enabled: true,
            check_batches: 50,
            check_batch: 256,
            confidence: 0.9,
            entropy_draws: 1000,
            entropy_batch: 32,
            bound_gamma: 0.01,
            bound_samples: 16,
            fisher_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSettings,
    /// Quadrant held out when training from a scene (1 = NW … 4 = SE).
    pub target: usize,
    pub theory: TheorySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthSettings::default(),
            target: 4,
            theory: TheorySettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth_config().validate()?;
        if !(1..=4).contains(&self.target) {
            return Err(Error::Config(format!("target must be a quadrant 1..=4, got {}", self.target)));
        }
        let t = &self.theory;
        if t.check_batches == 0 || t.check_batch == 0 || t.entropy_draws == 0 || t.entropy_batch == 0 {
            return Err(Error::Config("theory counts must be at least 1".into()));
        }
        if t.bound_samples == 0 || t.fisher_batch == 0 {
            return Err(Error::Config("theory counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&t.confidence) {
            return Err(Error::Config(format!("confidence must lie in [0, 1], got {}", t.confidence)));
        }
        if !(t.bound_gamma > 0.0 && t.bound_gamma.is_finite()) {
            return Err(Error::Config(format!("bound_gamma must be positive, got {}", t.bound_gamma)));
        }
        Ok(())
    }

    /// Full synthetic generator settings; the data seed is the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            samples_per_cell: s.samples_per_cell,
            noise_sigma: s.noise_sigma,
            latent_scale: s.latent_scale,
            domain_jitter: s.domain_jitter,
            seed: self.train.seed,
            ..SynthConfig::desk(s.classes, s.domains, s.bands)
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let th = &mut self.theory;
        match key {
            "lambda1" => t.lambda1 = num(key, value)?,
            "lambda2" => t.lambda2 = num(key, value)?,
            "beta" => t.beta = num(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "train_batch" => t.train_batch = num(key, value)?,
            "test_batch" => t.test_batch = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "mode" => t.mode = value.parse()?,
            "per_domain_cap" => {
                t.per_domain_cap = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "batching" => {
                t.batching = match value {
                    "joint" => Batching::Joint,
                    "domain" => Batching::Domain,
                    _ => return Err(Error::Config(format!("batching must be joint or domain, got {value:?}"))),
                }
            }
            "kl_sign" => t.kl_sign = num(key, value)?,
            "supp_sign" => t.supp_sign = num(key, value)?,
            "classes" => s.classes = num(key, value)?,
            "domains" => s.domains = num(key, value)?,
            "bands" => s.bands = num(key, value)?,
            "samples_per_cell" => s.samples_per_cell = num(key, value)?,
            "noise_sigma" => s.noise_sigma = num(key, value)?,
            "latent_scale" => s.latent_scale = num(key, value)?,
            "domain_jitter" => s.domain_jitter = num(key, value)?,
            "target" => self.target = num(key, value)?,
            "theory" => th.enabled = num(key, value)?,
            "check_batches" => th.check_batches = num(key, value)?,
            "check_batch" => th.check_batch = num(key, value)?,
            "confidence" => th.confidence = num(key, value)?,
            "entropy_draws" => th.entropy_draws = num(key, value)?,
            "entropy_batch" => th.entropy_batch = num(key, value)?,
            "bound_gamma" => th.bound_gamma = num(key, value)?,
            "bound_samples" => th.bound_samples = num(key, value)?,
            "fisher_batch" => th.fisher_batch = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let th = &self.theory;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        put("mode", t.mode.to_string());
        put("seed", t.seed.to_string());
        put("epochs", t.epochs.to_string());
        put("lambda1", t.lambda1.to_string());
        put("lambda2", t.lambda2.to_string());
        put("beta", t.beta.to_string());
        put("gamma", t.gamma.to_string());
        put("lr", t.lr.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("train_batch", t.train_batch.to_string());
        put("test_batch", t.test_batch.to_string());
        put("per_domain_cap", t.per_domain_cap.map_or("none".into(), |c| c.to_string()));
        put(
            "batching",
            match t.batching {
                Batching::Joint => "joint",
                Batching::Domain => "domain",
            }
            .into(),
        );
        put("kl_sign", t.kl_sign.to_string());
        put("supp_sign", t.supp_sign.to_string());
        put("classes", s.classes.to_string());
        put("domains", s.domains.to_string());
        put("bands", s.bands.to_string());
        put("samples_per_cell", s.samples_per_cell.to_string());
        put("noise_sigma", s.noise_sigma.to_string());
        put("latent_scale", s.latent_scale.to_string());
        put("domain_jitter", s.domain_jitter.to_string());
        put("target", self.target.to_string());
        put("theory", th.enabled.to_string());
        put("check_batches", th.check_batches.to_string());
        put("check_batch", th.check_batch.to_string());
        put("confidence", th.confidence.to_string());
        put("entropy_draws", th.entropy_draws.to_string());
        put("entropy_batch", th.entropy_batch.to_string());
        put("bound_gamma", th.bound_gamma.to_string());
        put("bound_samples", th.bound_samples.to_string());
        put("fisher_batch", th.fisher_batch.to_string());
        out
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}
