//! Training loop: per batch, route by true labels, build the class
//! contexts, evaluate every loss term, one backward pass, one Adam step.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cribnet::{argmax_rows, ContextMode, CribModel, Noise, Route};
use crate::error::{Error, Result};
use crate::hsidata::{make_batches, Batch, DomainDataset};
use crate::losses::{batch_losses, LossBreakdown, LossWeights};
use crate::numcore::{AdamConfig, AdamState, Tape};

/// How source samples are grouped into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    /// All sources pooled, then cut into batches.
    Joint,
    /// Each batch drawn from a single source domain; batch order shuffled.
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_batch: usize,
    pub test_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: ContextMode,
    /// Keep at most this many samples per class in each source domain.
    pub per_domain_cap: Option<usize>,
    pub batching: Batching,
    pub kl_sign: f64,
    pub supp_sign: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            beta: 0.1,
            gamma: 1.0,
            lr: 0.005,
            weight_decay: 1e-4,
            train_batch: 256,
            test_batch: 64,
            epochs: 100,
            seed: 0,
            mode: ContextMode::Crib,
            per_domain_cap: None,
            batching: Batching::Domain,
            kl_sign: 1.0,
            supp_sign: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.train_batch == 0 || self.test_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.per_domain_cap == Some(0) {
            return bad("per_domain_cap must be at least 1".into());
        }
        for (name, v) in [("kl_sign", self.kl_sign), ("supp_sign", self.supp_sign)] {
            if v != 1.0 && v != -1.0 {
                return bad(format!("{name} must be 1 or -1, got {v}"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta: self.beta,
            gamma: self.gamma,
            kl_sign: self.kl_sign,
            supp_sign: self.supp_sign,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Per-sample averages of the loss terms.
    pub losses: LossBreakdown,
    /// Backbone accuracy on the training batches (true-label contexts).
    pub train_oa: f64,
}

/// Checks the sources against the model and applies the per-class cap.
pub fn prepare_sources(model: &CribModel, sources: &[DomainDataset], cfg: &TrainConfig) -> Result<Vec<DomainDataset>> {
    if sources.is_empty() || sources.iter().all(DomainDataset::is_empty) {
        return Err(Error::Data("no source samples".into()));
    }
    let dims = model.dims();
    let mut out = Vec::with_capacity(sources.len());
    for ds in sources {
        if ds.bands != dims.bands {
            return Err(Error::Shape(format!(
                "source has {} bands, model expects {}",
                ds.bands, dims.bands
            )));
        }
        for (i, s) in ds.samples.iter().enumerate() {
            if s.class == 0 || s.class > dims.classes {
                return Err(Error::Data(format!(
                    "sample {i}: class {} outside 1..={}",
                    s.class, dims.classes
                )));
            }
            if s.domain == 0 || s.domain > dims.domains {
                return Err(Error::Data(format!(
                    "sample {i}: domain {} outside the model's 1..={}",
                    s.domain, dims.domains
                )));
            }
        }
        out.push(match cfg.per_domain_cap {
            Some(cap) => ds.capped_per_class(cap),
            None => ds.clone(),
        });
    }
    Ok(out)
}

/// One epoch's batches; depends only on the data, the batching rule and `rng`.
pub fn epoch_batches<R: RngCore>(sources: &[DomainDataset], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Batch>> {
    match cfg.batching {
        Batching::Joint => {
            let pooled = DomainDataset::concat(sources)?;
            make_batches(&pooled, cfg.train_batch, rng)
        }
        Batching::Domain => {
            let pooled = DomainDataset::concat(sources)?;
            let max_domain = pooled.samples.iter().map(|s| s.domain).max().unwrap_or(0);
            let mut batches = Vec::new();
            for d in 1..=max_domain {
                let mut rows: Vec<usize> = (0..pooled.len()).filter(|&i| pooled.samples[i].domain == d).collect();
                rows.shuffle(rng);
                batches.extend(rows.chunks(cfg.train_batch).map(|c| pooled.batch(c)));
            }
            batches.shuffle(rng);
            Ok(batches)
        }
    }
}

/// Runs one epoch. `rng` drives batch order; a seed drawn from it at the
/// start drives the reparameterization noise, so the batch sequence does
/// not depend on the context mode.
pub fn train_epoch(
    model: &mut CribModel,
    adam: &mut AdamState,
    sources: &[DomainDataset],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let noise_seed = rng.next_u64();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let batches = epoch_batches(sources, cfg, rng)?;
    let w = cfg.weights();
    let mut sums = LossBreakdown::default();
    let (mut seen, mut correct) = (0usize, 0usize);
    for batch in &batches {
        let n = batch.len();
        let mut tape = Tape::new();
        let fwd = model.forward(
            &mut tape,
            &batch.spectra,
            Route::Labels(&batch.classes),
            &mut Noise::Sample(&mut noise_rng),
        )?;
        let vars = batch_losses(&mut tape, model, &fwd, &batch.classes, &batch.domains, &w)?;
        let parts = vars.breakdown(&tape, &w)?;
        correct += argmax_rows(tape.value(fwd.logits))
            .iter()
            .zip(&batch.classes)
            .filter(|(p, y)| **p + 1 == **y)
            .count();
        seen += n;
        sums.l_cls += parts.l_cls;
        sums.l_recon += parts.l_recon;
        sums.l_rev += parts.l_rev;
        // the suppression term is already a batch mean
        sums.l_supp += parts.l_supp * n as f64;
        sums.kl += parts.kl;
        sums.total += parts.total;
        let grads = tape.backward(vars.total)?.param_grads(model.params());
        adam.step(model.params_mut(), &grads)?;
    }
    let k = seen.max(1) as f64;
    Ok(EpochStats {
        epoch: 0,
        losses: LossBreakdown {
            l_cls: sums.l_cls / k,
            l_recon: sums.l_recon / k,
            l_rev: sums.l_rev / k,
            l_supp: sums.l_supp / k,
            kl: sums.kl / k,
            total: sums.total / k,
        },
        train_oa: correct as f64 / k,
    })
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn fit_with(
    mut model: CribModel,
    sources: &[DomainDataset],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(CribModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let sources = prepare_sources(&model, sources, cfg)?;
    let mut adam = AdamState::new(cfg.adam(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut stats = train_epoch(&mut model, &mut adam, &sources, cfg, &mut rng)?;
        stats.epoch = epoch;
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

pub fn fit(model: CribModel, sources: &[DomainDataset], cfg: &TrainConfig) -> Result<(CribModel, Vec<EpochStats>)> {
    fit_with(model, sources, cfg, |_| {})
}
