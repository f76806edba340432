//! Diagonal empirical Fisher information of the backbone's predictive
//! distribution, and a probe of the risk bound over the Fisher ellipsoid
//! `{ε : εᵀ F̂ ε ≤ γ}`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cribnet::{CribModel, Noise, Route};
use crate::error::{Error, Result};
use crate::hsidata::{batches_in_order, Batch, DomainDataset};
use crate::numcore::{Array, ParamStore, Tape};

/// Added to Fisher entries that are exactly zero before inverting.
pub const FISHER_RIDGE: f64 = 1e-8;

/// `(1/N) Σ_i g_i²` per parameter tensor, where `g_i` are per-sample score
/// gradients aligned with `store` (`None` = no dependence).
pub fn fisher_from_scores(store: &ParamStore, scores: &[Vec<Option<Vec<f64>>>]) -> Result<Vec<Array>> {
    if scores.is_empty() {
        return Err(Error::Contract("Fisher estimate needs at least one sample".into()));
    }
    let mut out: Vec<Array> = store.iter().map(|(_, p)| Array::zeros(p.value.shape().to_vec())).collect();
    let inv = 1.0 / scores.len() as f64;
    for sample in scores {
        if sample.len() != out.len() {
            return Err(Error::shape(format!("{} score tensors for {} parameters", sample.len(), out.len())));
        }
        for (acc, g) in out.iter_mut().zip(sample) {
            if let Some(g) = g {
                acc.data_mut().iter_mut().zip(g).for_each(|(a, v)| *a += v * v * inv);
            }
        }
    }
    Ok(out)
}

/// `∇ log p(y_i | x_i)` of every sample of `batch`, each within the
/// batch's own contexts, routed by the labels.
pub fn score_gradients(model: &CribModel, batch: &Batch) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
    (0..batch.len())
        .map(|i| {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch.spectra, Route::Labels(&batch.classes), &mut Noise::Mean)?;
            let row = tape.gather_rows(fwd.logits, &[i])?;
            let nll = tape.softmax_cross_entropy(row, &[batch.classes[i] - 1])?;
            let ll = tape.scale(nll, -1.0);
            Ok(tape.backward(ll)?.param_grads(model.params()))
        })
        .collect()
}

/// `F̂ = (1/|B|) Σ_i diag(∇ log p(y_i | x_i, θ))²`, one array per tensor.
pub fn fisher_diag(model: &CribModel, batch: &Batch) -> Result<Vec<Array>> {
    if batch.is_empty() {
        return Err(Error::Contract("Fisher estimate needs a non-empty batch".into()));
    }
    fisher_from_scores(model.params(), &score_gradients(model, batch)?)
}

/// Mean backbone cross-entropy over a dataset, routed by the labels like
/// the scores behind the Fisher estimate.
pub fn dataset_risk(model: &CribModel, data: &DomainDataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("risk of an empty dataset".into()));
    }
    let mut total = 0.0;
    for b in batches_in_order(data, batch_size)? {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &b.spectra, Route::Labels(&b.classes), &mut Noise::Mean)?;
        let targets: Vec<usize> = b.classes.iter().map(|c| c - 1).collect();
        let ce = tape.softmax_cross_entropy(fwd.logits, &targets)?;
        total += tape.scalar(ce);
    }
    Ok(total / data.len() as f64)
}

/// `√(c·(k + ln(n/(1 − δ))) / (n − 1))`.
pub fn bound_slack(k: usize, n: usize, delta: f64, constant: f64) -> Result<f64> {
    if n < 2 || !(0.0..1.0).contains(&delta) || constant <= 0.0 {
        return Err(Error::Contract(format!(
            "slack needs n >= 2, 0 <= delta < 1, c > 0; got n={n} delta={delta} c={constant}"
        )));
    }
    let n_f = n as f64;
    Ok((constant * (k as f64 + (n_f / (1.0 - delta)).ln()) / (n_f - 1.0)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProbeConfig {
    /// Ellipsoid radius `γ`.
    pub gamma: f64,
    /// Perturbations sampled.
    pub samples: usize,
    /// Constant inside `O(·)`.
    pub constant: f64,
    /// Size `N` of the population the training set is drawn from; `δ = n/N`.
    pub population: usize,
    pub batch_size: usize,
}

impl Default for BoundProbeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            samples: 16,
            constant: 1.0,
            population: 0,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProbeReport {
    /// Mean fresh-data risk over the sampled perturbations.
    pub lhs: f64,
    /// `L(w + ε₀) + slack`.
    pub rhs: f64,
    pub train_risk: f64,
    pub train_risk_at_eps0: f64,
    pub slack: f64,
    pub constant: f64,
    pub gamma: f64,
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub samples: usize,
    /// Largest `εᵀ F̂ ε` over the samples (with the ridge applied).
    pub max_quadratic_form: f64,
    /// Fisher entries that were zero and received the ridge.
    pub ridged_entries: usize,
}

fn flatten(arrays: &[Array]) -> Vec<f64> {
    arrays.iter().flat_map(|a| a.data().iter().copied()).collect()
}

fn quadratic_form(fisher: &[f64], eps: &[f64]) -> f64 {
    fisher.iter().zip(eps).map(|(f, e)| f * e * e).sum()
}

/// A point drawn uniformly from `{ε : εᵀ diag(f) ε ≤ γ}`.
pub fn sample_ellipsoid<R: Rng + ?Sized>(fisher: &[f64], gamma: f64, rng: &mut R) -> Vec<f64> {
    let k = fisher.len();
    let dir: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = rng.random::<f64>().powf(1.0 / k as f64);
    let scale = radius * gamma.sqrt() / norm;
    let mut eps: Vec<f64> = dir.iter().zip(fisher).map(|(d, f)| d * scale / f.sqrt()).collect();
    // Rounding may land a hair outside the boundary; pull it back in.
    while quadratic_form(fisher, &eps) > gamma {
        eps.iter_mut().for_each(|e| *e *= 1.0 - 1e-12);
    }
    eps
}

fn perturbed(model: &CribModel, eps: &[f64]) -> CribModel {
    let mut m = model.clone();
    let ids: Vec<_> = m.params().ids().collect();
    let mut at = 0;
    for id in ids {
        let data = m.params_mut().get_mut(id).data_mut();
        data.iter_mut().zip(&eps[at..]).for_each(|(v, e)| *v += e);
        at += data.len();
    }
    m
}

/// Samples perturbations in the Fisher ellipsoid of `fisher_batch`, takes
/// `ε₀` as the sample with the largest training risk, and compares the
/// mean fresh-data risk with `L(w + ε₀) + slack`.
pub fn bound_probe<R: Rng + ?Sized>(
    model: &CribModel,
    train: &DomainDataset,
    fresh: &DomainDataset,
    fisher_batch: &Batch,
    cfg: &BoundProbeConfig,
    rng: &mut R,
) -> Result<BoundProbeReport> {
    if !(cfg.gamma > 0.0 && cfg.gamma.is_finite()) || cfg.samples == 0 || cfg.batch_size == 0 {
        return Err(Error::Contract(format!(
            "bound probe needs gamma > 0, at least one sample and a batch size; got {cfg:?}"
        )));
    }
    let n = train.len();
    if cfg.population < n || cfg.population == 0 {
        return Err(Error::Contract(format!("population {} smaller than the training set {n}", cfg.population)));
    }
    let delta = n as f64 / cfg.population as f64;
    let k = model.params().num_scalars();
    let slack = bound_slack(k, n, delta, cfg.constant)?;

    let mut fisher = flatten(&fisher_diag(model, fisher_batch)?);
    let mut ridged_entries = 0;
    for f in &mut fisher {
        if *f == 0.0 {
            *f = FISHER_RIDGE;
            ridged_entries += 1;
        }
    }

    let mut max_q: f64 = 0.0;
    let mut lhs = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.samples {
        let eps = sample_ellipsoid(&fisher, cfg.gamma, rng);
        max_q = max_q.max(quadratic_form(&fisher, &eps));
        let m = perturbed(model, &eps);
        worst = worst.max(dataset_risk(&m, train, cfg.batch_size)?);
        lhs += dataset_risk(&m, fresh, cfg.batch_size)? / cfg.samples as f64;
    }
    let report = BoundProbeReport {
        lhs,
        rhs: worst + slack,
        train_risk: dataset_risk(model, train, cfg.batch_size)?,
        train_risk_at_eps0: worst,
        slack,
        constant: cfg.constant,
        gamma: cfg.gamma,
        n,
        k,
        delta,
        samples: cfg.samples,
        max_quadratic_form: max_q,
        ridged_entries,
    };
    if !(report.lhs.is_finite() && report.rhs.is_finite()) {
        return Err(Error::Data(format!("bound probe produced non-finite values: {report:?}")));
    }
    Ok(report)
}
