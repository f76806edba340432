//! End-to-end runs: data → training → held-out evaluation → theory probes.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::metrics::{confusion, metrics, ConfusionMatrix, MetricsReport};
use super::report::{RunReport, Theorem1Summary, TheoryReport};
use crate::cribnet::{CribModel, ModelDims};
use crate::error::{Error, Result};
use crate::hsidata::{quadrant_split, synth_generate, to_scene, DomainDataset, HsiCube, LabelMap, SynthConfig, SynthWorld};
use crate::inferpipe::predict_dataset;
use crate::theorylab::{
    bound_probe, disentangle_probe, entropy_estimator_check, theorem1_batch_check, theorem1_closed_form,
    theorem1_one_layer, BoundProbeConfig, BoundProbeReport, EntropyReport,
};
use crate::trainpipe::fit;

/// Source domains, the held-out domain, and where it sits in a scene.
#[derive(Clone, Debug)]
pub struct Task {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    /// Scene-sized map whose nonzero entries are the target's pixels, in
    /// target order.
    pub mask: Option<LabelMap>,
    /// Generator behind the data, when it is synthetic.
    pub synth: Option<SynthConfig>,
}

impl Task {
    /// The synthetic task of `cfg`; the last domain is held out.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let synth = cfg.synth_config();
        let data = synth_generate(&synth)?;
        let mask = if data.sources.len() == 3 {
            let parts: Vec<&DomainDataset> = data.sources.iter().chain([&data.target]).collect();
            let (_, labels) = to_scene(&parts)?;
            Some(quadrant_mask(&labels, 4))
        } else {
            None
        };
        Ok(Self {
            sources: data.sources,
            target: data.target,
            mask,
            synth: Some(synth),
        })
    }

    /// Quadrant domains of a scene; `target` is held out and the other
    /// three are renumbered `1..=3` in quadrant order.
    pub fn from_scene(cube: &HsiCube, labels: &LabelMap, target: usize) -> Result<Self> {
        if !(1..=4).contains(&target) {
            return Err(Error::Config(format!("target must be a quadrant 1..=4, got {target}")));
        }
        let parts = quadrant_split(cube, labels)?;
        let mut sources = Vec::with_capacity(3);
        let mut held = None;
        for (q, mut ds) in parts.into_iter().enumerate() {
            if q + 1 == target {
                held = Some(ds);
                continue;
            }
            let d = sources.len() + 1;
            ds.samples.iter_mut().for_each(|s| s.domain = d);
            ds.domains = 3;
            sources.push(ds);
        }
        let target_ds = held.expect("target in 1..=4");
        if target_ds.is_empty() {
            return Err(Error::Data(format!("quadrant {target} has no labeled pixels")));
        }
        Ok(Self {
            sources,
            target: target_ds,
            mask: Some(quadrant_mask(labels, target)),
            synth: None,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            bands: self.target.bands,
            classes: self.target.classes,
            domains: self.sources.len(),
        }
    }
}

/// `labels` with every pixel outside quadrant `q` cleared.
fn quadrant_mask(labels: &LabelMap, q: usize) -> LabelMap {
    let (mid_h, mid_w) = (labels.height / 2, labels.width / 2);
    let mut out = labels.clone();
    for h in 0..labels.height {
        for w in 0..labels.width {
            let at = 1 + usize::from(w >= mid_w) + 2 * usize::from(h >= mid_h);
            if at != q {
                out.labels[h * labels.width + w] = 0;
            }
        }
    }
    out
}

/// Predictions, confusion matrix and scores on the held-out domain.
pub fn evaluate(model: &CribModel, task: &Task, batch_size: usize) -> Result<(Vec<usize>, ConfusionMatrix, MetricsReport)> {
    let preds = predict_dataset(model, &task.target, batch_size)?;
    let truth: Vec<usize> = task.target.samples.iter().map(|s| s.class).collect();
    let cm = confusion(&preds, &truth, model.dims().classes)?;
    let m = metrics(&cm)?;
    Ok((preds, cm, m))
}

fn probe_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn theorem1_summary(cfg: &RunConfig, model: &CribModel, pool: &DomainDataset) -> Result<Theorem1Summary> {
    let th = &cfg.theory;
    let sign = cfg.train.supp_sign;
    let mut rng = probe_rng(cfg.train.seed, 101);
    let check = theorem1_batch_check(model, pool, th.check_batches, th.check_batch, th.confidence, sign, &mut rng)?;
    let (ip, p, q) = theorem1_one_layer(&[0.5, 0.3, 0.2], 0.5, 0.4, 0.1, true, sign)?;
    let fold = |f: fn(f64, f64) -> f64| check.totals.iter().copied().reduce(f);
    Ok(Theorem1Summary {
        supp_sign: sign,
        confidence: th.confidence,
        confident_samples: check.confident_samples,
        pool: check.pool,
        batches: check.totals.len(),
        batch_size: th.check_batch.min(check.confident_samples),
        nonnegative: check.nonnegative(),
        min_total: fold(f64::min),
        max_total: fold(f64::max),
        excluded: check.excluded,
        one_layer_autodiff: ip,
        one_layer_closed_form: theorem1_closed_form(true, p, q, 1.0, sign),
    })
}

/// Monte-Carlo entropy check on the first `entropy_batch` pooled sources.
pub fn entropy_report(cfg: &RunConfig, model: &CribModel, pool: &DomainDataset) -> Result<EntropyReport> {
    let take: Vec<usize> = (0..cfg.theory.entropy_batch.min(pool.len())).collect();
    entropy_estimator_check(
        model,
        &pool.batch(&take),
        cfg.theory.entropy_draws,
        &mut probe_rng(cfg.train.seed, 102),
    )
}

/// Risk-bound probe with fresh draws from the task's generator; only
/// synthetic tasks have one.
pub fn bound_report(cfg: &RunConfig, model: &CribModel, task: &Task) -> Result<BoundProbeReport> {
    let th = &cfg.theory;
    let synth = task
        .synth
        .as_ref()
        .ok_or_else(|| Error::Data("the bound probe needs synthetic data to draw fresh samples from".into()))?;
    let pooled = DomainDataset::concat(&task.sources)?;
    let world = SynthWorld::new(synth)?;
    let mut rng = probe_rng(cfg.train.seed, 103);
    let fresh: Vec<DomainDataset> = task
        .sources
        .iter()
        .map(|s| {
            let d = s.samples.first().map_or(1, |x| x.domain);
            world.domain_dataset(d, &mut rng)
        })
        .collect();
    let fresh = DomainDataset::concat(&fresh)?;
    let all: Vec<usize> = (0..pooled.len()).collect();
    let pick: Vec<usize> = all.choose_multiple(&mut rng, th.fisher_batch.min(all.len())).copied().collect();
    let probe = BoundProbeConfig {
        gamma: th.bound_gamma,
        samples: th.bound_samples,
        population: synth.classes * synth.domains * synth.samples_per_cell,
        batch_size: cfg.train.test_batch.max(64),
        ..BoundProbeConfig::default()
    };
    bound_probe(model, &pooled, &fresh, &pooled.batch(&pick), &probe, &mut rng)
}

/// Every probe that applies to the model and the data.
pub fn theory_report(cfg: &RunConfig, model: &CribModel, task: &Task) -> Result<TheoryReport> {
    let pooled = DomainDataset::concat(&task.sources)?;
    let mut report = TheoryReport::default();
    if model.mode().has_vae() {
        report.theorem1 = Some(theorem1_summary(cfg, model, &pooled)?);
        report.entropy = Some(entropy_report(cfg, model, &pooled)?);
        report.disentangle = Some(disentangle_probe(model, &pooled)?);
    }
    if task.synth.is_some() {
        report.bound = Some(bound_report(cfg, model, task)?);
    }
    Ok(report)
}

/// Trains on the sources, scores the held-out domain and, if enabled,
/// runs the theory probes. Returns the model, the report and the held-out
/// predictions.
pub fn train_run(cfg: &RunConfig, task: &Task) -> Result<(CribModel, RunReport, Vec<usize>)> {
    cfg.validate()?;
    let model = CribModel::new(task.dims(), cfg.train.mode, cfg.train.seed)?;
    let (model, history) = fit(model, &task.sources, &cfg.train)?;
    let (preds, cm, m) = evaluate(&model, task, cfg.train.test_batch)?;
    let theory = if cfg.theory.enabled {
        Some(theory_report(cfg, &model, task)?)
    } else {
        None
    };
    let report = RunReport {
        config: cfg.clone(),
        history,
        confusion: cm,
        metrics: m,
        theory,
    };
    Ok((model, report, preds))
}

/// Scores a trained model on the held-out domain; no history, no probes.
pub fn eval_run(cfg: &RunConfig, model: &CribModel, task: &Task) -> Result<(RunReport, Vec<usize>)> {
    let dims = task.dims();
    if model.dims().bands != dims.bands || model.dims().classes < dims.classes {
        return Err(Error::Data(format!(
            "model expects {} bands and {} classes, data has {} and {}",
            model.dims().bands,
            model.dims().classes,
            dims.bands,
            dims.classes
        )));
    }
    let (preds, cm, m) = evaluate(model, task, cfg.train.test_batch)?;
    Ok((
        RunReport {
            config: cfg.clone(),
            history: Vec::new(),
            confusion: cm,
            metrics: m,
            theory: None,
        },
        preds,
    ))
}
