//! Monte-Carlo view of the conditional domain entropy `H(d̂ | ẑ_d)`: the
//! domain head's second input is drawn from `N(0, I)` instead of being held
//! at zero.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cribnet::{CribModel, Mlp, Noise, Route, LATENT};
use crate::error::{Error, Result};
use crate::hsidata::Batch;
use crate::numcore::{ParamStore, Tape};

/// Draws per sample behind [`EntropyReport::reference`].
pub const REFERENCE_DRAWS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error of `mean` over the draws, samples held fixed.
    pub stderr: f64,
    pub draws: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mc_mean: f64,
    pub mc_stderr: f64,
    /// Second input held at zero.
    pub plugin_value: f64,
    pub reference: f64,
    pub reference_stderr: f64,
    pub draws: usize,
    pub samples: usize,
}

/// Dense copy of one domain head, evaluated without a tape.
struct Head {
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
    scratch: [Vec<f64>; 2],
}

impl Head {
    fn new(store: &ParamStore, mlp: &Mlp) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| {
                (
                    store.get(l.weight).data().to_vec(),
                    store.get(l.bias).data().to_vec(),
                    l.inputs,
                    l.outputs,
                )
            })
            .collect();
        Self {
            layers,
            scratch: [Vec::new(), Vec::new()],
        }
    }

    /// Softmax entropy of the head's output for `input`.
    fn entropy(&mut self, input: &[f64]) -> f64 {
        let [a, b] = &mut self.scratch;
        a.clear();
        a.extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (li, (w, bias, din, dout)) in self.layers.iter().enumerate() {
            b.clear();
            for o in 0..*dout {
                let row = &w[o * din..(o + 1) * din];
                let v = bias[o] + row.iter().zip(a.iter()).map(|(x, y)| x * y).sum::<f64>();
                b.push(if li < last { v.max(0.0) } else { v });
            }
            std::mem::swap(a, b);
        }
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = a.iter().map(|l| (l - max).exp()).sum();
        let lse = max + total.ln();
        a.iter().map(|&l| (l - lse).exp() * (lse - l)).sum()
    }
}

/// `ẑ_d` and the serving VAE of every sample, routed by true classes.
fn domain_latents(model: &CribModel, batch: &Batch) -> Result<Vec<(usize, [f64; LATENT])>> {
    if !model.mode().has_vae() {
        return Err(Error::Contract(format!("{} mode has no domain head", model.mode())));
    }
    if batch.is_empty() {
        return Err(Error::Contract("entropy check needs a non-empty batch".into()));
    }
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch.spectra, Route::Labels(&batch.classes), &mut Noise::Mean)?;
    let mut out = vec![(0, [0.0; LATENT]); batch.len()];
    for g in &fwd.groups {
        let zd = tape.value(g.enc.z_d);
        for (j, &r) in g.rows.iter().enumerate() {
            out[r].0 = g.vae;
            out[r].1.copy_from_slice(zd.row(j));
        }
    }
    Ok(out)
}

fn heads(model: &CribModel) -> Vec<Head> {
    model.vaes().iter().map(|v| Head::new(model.params(), &v.domain_head)).collect()
}

/// Running mean; a constant stream keeps its value exactly.
fn push_mean(mean: &mut f64, k: usize, x: f64) {
    *mean += (x - *mean) / k as f64;
}

/// Mean over samples of the entropy with the second input at zero.
pub fn entropy_plugin(model: &CribModel, batch: &Batch) -> Result<f64> {
    let latents = domain_latents(model, batch)?;
    let mut heads = heads(model);
    let mut mean = 0.0;
    let mut input = [0.0; 2 * LATENT];
    for (i, (vae, zd)) in latents.iter().enumerate() {
        input[..LATENT].copy_from_slice(zd);
        push_mean(&mut mean, i + 1, heads[*vae].entropy(&input));
    }
    Ok(mean)
}

/// `(1/N) Σ_i (1/K) Σ_k H(softmax ĥ_d(ẑ_{d,i}, z_k))`, `z_k ~ N(0, I)`.
pub fn entropy_mc<R: Rng + ?Sized>(model: &CribModel, batch: &Batch, draws: usize, rng: &mut R) -> Result<McEstimate> {
    if draws == 0 {
        return Err(Error::Contract("entropy estimate needs K >= 1".into()));
    }
    let latents = domain_latents(model, batch)?;
    let mut heads = heads(model);
    let mut mean = 0.0;
    let mut var_sum = 0.0;
    let mut input = [0.0; 2 * LATENT];
    for (i, (vae, zd)) in latents.iter().enumerate() {
        input[..LATENT].copy_from_slice(zd);
        let (mut m, mut m2) = (0.0, 0.0);
        for k in 1..=draws {
            for v in &mut input[LATENT..] {
                *v = rng.sample(StandardNormal);
            }
            let h = heads[*vae].entropy(&input);
            let before = m;
            push_mean(&mut m, k, h);
            m2 += (h - before) * (h - m);
        }
        if draws > 1 {
            var_sum += m2 / (draws - 1) as f64;
        }
        push_mean(&mut mean, i + 1, m);
    }
    let n = latents.len() as f64;
    Ok(McEstimate {
        mean,
        stderr: (var_sum / draws as f64).sqrt() / n,
        draws,
    })
}

/// `K`-draw estimate, plug-in value and a [`REFERENCE_DRAWS`] reference.
pub fn entropy_estimator_check<R: Rng + ?Sized>(
    model: &CribModel,
    batch: &Batch,
    draws: usize,
    rng: &mut R,
) -> Result<EntropyReport> {
    let mc = entropy_mc(model, batch, draws, rng)?;
    let reference = entropy_mc(model, batch, REFERENCE_DRAWS, rng)?;
    Ok(EntropyReport {
        mc_mean: mc.mean,
        mc_stderr: mc.stderr,
        plugin_value: entropy_plugin(model, batch)?,
        reference: reference.mean,
        reference_stderr: reference.stderr,
        draws,
        samples: batch.len(),
    })
}
