//! Agreement between the domain-classification gradient and the entropy
//! suppression gradient on the domain head.
//!
//! `g₁` is the gradient of the summed cross-entropy `Σ CE(ĥ_d(z_d, z_s), d)`
//! and `g₂` the gradient of `Σ Σ_k q̂_k log q̂_k` of `ĥ_d(z_d, 0)`, both over
//! the domain head's parameters. With the suppression term entering the
//! loss as `s·H`, the head is trained along `g₁ − s·g₂`; the report gives
//! `⟨g₁, g₁ − s·g₂⟩` per tensor and in total (`s = 1` is the default
//! training sign, `s = −1` the sign under which the textbook expansion of
//! the one-layer case is usually written).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cribnet::{CribModel, Noise, Route};
use crate::error::{Error, Result};
use crate::hsidata::{Batch, DomainDataset};
use crate::numcore::{Array, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorProduct {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerProductReport {
    pub per_tensor: Vec<TensorProduct>,
    pub total: f64,
    /// `|g₁|²` and `⟨g₁, g₂⟩` over all head tensors.
    pub supp_sign: f64,
    pub g1_sq_norm: f64,
    pub cross: f64,
    /// Share of tensors whose inner product is `≥ 0`.
    pub fraction_nonnegative: f64,
    /// Softmax probability of the true domain, over the kept samples.
    pub min_true_confidence: f64,
    pub max_true_confidence: f64,
    pub samples: usize,
    /// Samples dropped because a probability saturated at 0 or 1.
    pub excluded: usize,
    pub closed_form: Option<f64>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn interior(p: &[f64]) -> bool {
    p.iter().all(|&v| v > 0.0 && v < 1.0)
}

/// Domain-head logits of a batch routed by its true classes:
/// `(with z_s, with zeros, kept rows)`, per group.
struct HeadPass {
    full: Vec<Var>,
    plug: Vec<Var>,
    rows: Vec<Vec<usize>>,
}

fn head_pass(tape: &mut Tape, model: &CribModel, batch: &Batch) -> Result<HeadPass> {
    if !model.mode().has_vae() {
        return Err(Error::Contract(format!("{} mode has no domain head", model.mode())));
    }
    let fwd = model.forward(tape, &batch.spectra, Route::Labels(&batch.classes), &mut Noise::Mean)?;
    let mut pass = HeadPass {
        full: Vec::new(),
        plug: Vec::new(),
        rows: Vec::new(),
    };
    for g in &fwd.groups {
        let zeros = tape.constant(Array::zeros(vec![g.rows.len(), crate::cribnet::LATENT]));
        pass.full.push(model.domain_logits(tape, g.vae, g.enc.z_d, g.z_s)?);
        pass.plug.push(model.domain_logits(tape, g.vae, g.enc.z_d, zeros)?);
        pass.rows.push(g.rows.clone());
    }
    Ok(pass)
}

fn head_param_grads(model: &CribModel, grads: Vec<Option<Vec<f64>>>) -> Vec<(String, Vec<f64>)> {
    let store = model.params();
    store
        .iter()
        .zip(grads)
        .filter(|((_, p), _)| is_head_param(&p.name))
        .map(|((_, p), g)| (p.name.clone(), g.unwrap_or_else(|| vec![0.0; p.value.len()])))
        .collect()
}

fn is_head_param(name: &str) -> bool {
    name.split('.').nth(1) == Some("dom")
}

/// Names of the domain-head tensors of a store.
pub fn domain_head_params(store: &ParamStore) -> Vec<String> {
    store.iter().map(|(_, p)| p.name.clone()).filter(|n| is_head_param(n)).collect()
}

/// Softmax probability of each sample's true domain under `ĥ_d(z_d, z_s)`
/// (`full`) and `ĥ_d(z_d, 0)` (`plug`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainConfidence {
    pub full: f64,
    pub plug: f64,
}

impl DomainConfidence {
    pub fn confident(&self, threshold: f64) -> bool {
        self.full >= threshold
    }
}

pub fn true_domain_confidence(model: &CribModel, batch: &Batch) -> Result<Vec<DomainConfidence>> {
    let mut tape = Tape::new();
    let pass = head_pass(&mut tape, model, batch)?;
    let mut out = vec![DomainConfidence { full: 0.0, plug: 0.0 }; batch.len()];
    for ((&full, &plug), rows) in pass.full.iter().zip(&pass.plug).zip(&pass.rows) {
        let fv = tape.value(full);
        let pv = tape.value(plug);
        for (j, &r) in rows.iter().enumerate() {
            let d = batch.domains[r];
            if d == 0 || d > fv.shape()[1] {
                return Err(Error::Data(format!("domain label {d} outside 1..={}", fv.shape()[1])));
            }
            out[r] = DomainConfidence {
                full: softmax(fv.row(j))[d - 1],
                plug: softmax(pv.row(j))[d - 1],
            };
        }
    }
    Ok(out)
}

pub fn theorem1_inner_product(model: &CribModel, batch: &Batch, supp_sign: f64) -> Result<InnerProductReport> {
    if batch.is_empty() {
        return Err(Error::Contract("theorem 1 check needs a non-empty batch".into()));
    }
    let d = model.dims().domains;
    if let Some(&bad) = batch.domains.iter().find(|&&v| v == 0 || v > d) {
        return Err(Error::Data(format!("domain label {bad} outside 1..={d}")));
    }

    // Probe pass: find saturated samples.
    let mut tape = Tape::new();
    let pass = head_pass(&mut tape, model, batch)?;
    let mut keep: Vec<Vec<usize>> = Vec::new();
    let mut excluded = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((&full, &plug), rows) in pass.full.iter().zip(&pass.plug).zip(&pass.rows) {
        let fv = tape.value(full);
        let pv = tape.value(plug);
        let mut k = Vec::new();
        for (j, &r) in rows.iter().enumerate() {
            let p = softmax(fv.row(j));
            let q = softmax(pv.row(j));
            if interior(&p) && interior(&q) {
                let t = p[batch.domains[r] - 1];
                lo = lo.min(t);
                hi = hi.max(t);
                k.push(j);
            } else {
                excluded += 1;
            }
        }
        keep.push(k);
    }
    let samples = batch.len() - excluded;
    if samples == 0 {
        return Err(Error::Data("every sample saturated the domain head".into()));
    }

    let grads = |second: bool| -> Result<Vec<(String, Vec<f64>)>> {
        let mut tape = Tape::new();
        let pass = head_pass(&mut tape, model, batch)?;
        let mut parts = Vec::new();
        for (g, k) in keep.iter().enumerate() {
            if k.is_empty() {
                continue;
            }
            if second {
                let logits = tape.gather_rows(pass.plug[g], k)?;
                let h = tape.softmax_entropy(logits)?;
                parts.push(tape.scale(h, -1.0));
            } else {
                let logits = tape.gather_rows(pass.full[g], k)?;
                let targets: Vec<usize> = k.iter().map(|&j| batch.domains[pass.rows[g][j]] - 1).collect();
                parts.push(tape.softmax_cross_entropy(logits, &targets)?);
            }
        }
        let mut root = parts[0];
        for &p in &parts[1..] {
            root = tape.add(root, p)?;
        }
        let g = tape.backward(root)?;
        Ok(head_param_grads(model, g.param_grads(model.params())))
    };
    let g1 = grads(false)?;
    let g2 = grads(true)?;

    let per_tensor: Vec<TensorProduct> = g1
        .iter()
        .zip(&g2)
        .map(|((name, a), (_, b))| TensorProduct {
            name: name.clone(),
            value: a.iter().zip(b).map(|(x, y)| x * (x - supp_sign * y)).sum(),
        })
        .collect();
    let total = per_tensor.iter().map(|t| t.value).sum();
    let dot = |x: &[(String, Vec<f64>)], y: &[(String, Vec<f64>)]| -> f64 {
        x.iter()
            .zip(y)
            .map(|((_, a), (_, b))| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>())
            .sum()
    };
    let fraction_nonnegative =
        per_tensor.iter().filter(|t| t.value >= 0.0).count() as f64 / per_tensor.len().max(1) as f64;
    Ok(InnerProductReport {
        per_tensor,
        total,
        supp_sign,
        g1_sq_norm: dot(&g1, &g1),
        cross: dot(&g1, &g2),
        fraction_nonnegative,
        min_true_confidence: lo,
        max_true_confidence: hi,
        samples,
        excluded,
        closed_form: None,
    })
}

/// Batch-level view of the check: `batches` random batches of `batch_size`
/// samples drawn from the samples of `pool` that meet
/// [`DomainConfidence::confident`] at `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchCheck {
    pub confident_samples: usize,
    pub pool: usize,
    pub totals: Vec<f64>,
    pub excluded: usize,
}

impl BatchCheck {
    pub fn nonnegative(&self) -> usize {
        self.totals.iter().filter(|&&t| t >= 0.0).count()
    }
}

pub fn theorem1_batch_check<R: Rng + ?Sized>(
    model: &CribModel,
    pool: &DomainDataset,
    batches: usize,
    batch_size: usize,
    threshold: f64,
    supp_sign: f64,
    rng: &mut R,
) -> Result<BatchCheck> {
    if batches == 0 || batch_size == 0 {
        return Err(Error::Contract("theorem 1 check needs at least one batch of one sample".into()));
    }
    let all: Vec<usize> = (0..pool.len()).collect();
    let mut confident = Vec::new();
    for chunk in all.chunks(1024) {
        let conf = true_domain_confidence(model, &pool.batch(chunk))?;
        confident.extend(chunk.iter().zip(conf).filter(|(_, c)| c.confident(threshold)).map(|(&i, _)| i));
    }
    // No confident sample: nothing to check, reported as zero batches.
    let rounds = if confident.is_empty() { 0 } else { batches };
    let mut totals = Vec::with_capacity(rounds);
    let mut excluded = 0;
    for _ in 0..rounds {
        let idx: Vec<usize> = confident
            .choose_multiple(rng, batch_size.min(confident.len()))
            .copied()
            .collect();
        let r = theorem1_inner_product(model, &pool.batch(&idx), supp_sign)?;
        totals.push(r.total);
        excluded += r.excluded;
    }
    Ok(BatchCheck {
        confident_samples: confident.len(),
        pool: pool.len(),
        totals,
        excluded,
    })
}

/// `(Σz)² · a · (a − s·log((1 − q)/q))` with `a = (y − p)/(p(1 − p))`: the
/// inner product for one sample of a one-layer, two-domain head whose
/// rectified outputs are read directly as probabilities. `p` is the
/// first-domain output of the classification pass, `q` that of the
/// entropy pass, `y` whether the sample belongs to the first domain and
/// `s` the suppression sign.
pub fn theorem1_closed_form(first_domain: bool, p: f64, q: f64, z_sum: f64, supp_sign: f64) -> f64 {
    let y = if first_domain { 1.0 } else { 0.0 };
    let a = (y - p) / (p * (1.0 - p));
    z_sum * z_sum * a * (a - supp_sign * ((1.0 - q) / q).ln())
}

/// The same quantity by reverse-mode differentiation. The head's first
/// row shares one weight `w` across the inputs `z`, so both passes have
/// `∂d̂/∂w = Σz`; `p_bias` and `q_bias` place the two outputs. Returns
/// `(inner product, p, q)`.
pub fn theorem1_one_layer(
    z: &[f64],
    w: f64,
    p_bias: f64,
    q_bias: f64,
    first_domain: bool,
    supp_sign: f64,
) -> Result<(f64, f64, f64)> {
    let y = if first_domain { 1.0 } else { 0.0 };
    let s: f64 = z.iter().sum();
    let pass = |tape: &mut Tape, bias: f64| -> Result<(Var, Var)> {
        let wv = tape.constant(Array::matrix(1, 1, vec![w])?);
        let x = tape.constant(Array::vector(vec![s]));
        let b = tape.constant(Array::vector(vec![bias]));
        let pre = tape.affine(x, wv, b)?;
        Ok((wv, tape.relu(pre)))
    };
    let one_minus = |tape: &mut Tape, v: Var| {
        let neg = tape.scale(v, -1.0);
        tape.shift(neg, 1.0)
    };

    // g₁: −(y log p + (1 − y) log(1 − p))
    let mut t1 = Tape::new();
    let (w1, p) = pass(&mut t1, p_bias)?;
    let lp = t1.ln(p)?;
    let om = one_minus(&mut t1, p);
    let lq = t1.ln(om)?;
    let a = t1.scale(lp, -y);
    let b = t1.scale(lq, y - 1.0);
    let ce = t1.add(a, b)?;
    let ce = t1.sum(ce);
    let g1 = t1.backward(ce)?.wrt(w1).map_or(0.0, |g| g[0]);
    let p_val = t1.value(p).data()[0];

    // g₂: q log q + (1 − q) log(1 − q)
    let mut t2 = Tape::new();
    let (w2, q) = pass(&mut t2, q_bias)?;
    let lq1 = t2.ln(q)?;
    let a = t2.mul(q, lq1)?;
    let om = one_minus(&mut t2, q);
    let lq2 = t2.ln(om)?;
    let b = t2.mul(om, lq2)?;
    let nh = t2.add(a, b)?;
    let nh = t2.sum(nh);
    let g2 = t2.backward(nh)?.wrt(w2).map_or(0.0, |g| g[0]);
    let q_val = t2.value(q).data()[0];

    Ok((g1 * (g1 - supp_sign * g2), p_val, q_val))
}
