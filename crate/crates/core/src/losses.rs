//! Training objective: classification, reconstruction (with KL and the
//! conditional-entropy suppression term) and branch reversibility.
//!
//! Sums run over the batch except the suppression term, which is a batch
//! mean. Minimizing the total minimizes the KL and the suppression entropy;
//! `kl_sign` and `supp_sign` exist to flip either term for comparison runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cribnet::{BatchForward, ContextMode, CribModel, ModelDims, Noise, Route, LATENT};
use crate::error::{Error, Result};
use crate::numcore::{grad_check_params, Array, GradCheckReport, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kl_sign: f64,
    pub supp_sign: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            beta: 0.1,
            gamma: 1.0,
            kl_sign: 1.0,
            supp_sign: 1.0,
        }
    }
}

/// Values of the loss terms for one batch (or averaged over an epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    /// Includes the weighted KL and suppression terms.
    pub l_recon: f64,
    pub l_rev: f64,
    pub l_supp: f64,
    pub kl: f64,
    pub total: f64,
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub recon: Var,
    pub rev: Var,
    pub supp: Var,
    pub kl: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, w: &LossWeights) -> Result<LossBreakdown> {
        loss_total(
            tape.scalar(self.cls),
            tape.scalar(self.recon),
            tape.scalar(self.rev),
            tape.scalar(self.supp),
            tape.scalar(self.kl),
            w.lambda1,
            w.lambda2,
        )
    }
}

/// `½ Σ (μ² + exp(logvar) − logvar − 1)`: KL from `N(μ, diag exp(logvar))`
/// to `N(0, I)`, summed over every entry (rows are samples).
pub fn kl_gauss(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) {
        return Err(Error::Shape(format!(
            "kl_gauss: mu {:?} vs logvar {:?}",
            tape.shape(mu),
            tape.shape(logvar)
        )));
    }
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.shift(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Array::scalar(0.0))
}

fn sum_vars(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = zero(tape);
    for &p in parts {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// 0-based domain targets of `rows`, checked against the domain head.
fn domain_targets(model: &CribModel, domains: &[usize], rows: &[usize]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&r| {
            let d = domains[r];
            if d == 0 {
                return Err(Error::Contract(format!("sample {r} has no domain label")));
            }
            if d > model.dims().domains {
                return Err(Error::Data(format!(
                    "domain {d} exceeds the {} training domains",
                    model.dims().domains
                )));
            }
            Ok(d - 1)
        })
        .collect()
}

/// Reconstruction sub-terms, summed over groups.
#[derive(Clone, Copy, Debug)]
pub struct ReconTerms {
    pub sq_error: Var,
    pub domain_ce: Var,
    pub kl: Var,
    pub supp: Var,
    /// `sq_error + domain_ce + kl_sign·β·kl + supp_sign·supp`.
    pub total: Var,
}

/// `Σ ||g(z_d, z_m) − x||² + CE(ĥ_d(z_d, z_s), d) + β·KL + L_supp`.
pub fn loss_recon(tape: &mut Tape, model: &CribModel, fwd: &BatchForward, domains: &[usize], w: &LossWeights) -> Result<ReconTerms> {
    let n = tape.shape(fwd.x)[0];
    if domains.len() != n {
        return Err(Error::Contract(format!("{} domain labels for {n} samples", domains.len())));
    }
    let (mut sq, mut ce, mut kl) = (Vec::new(), Vec::new(), Vec::new());
    for g in &fwd.groups {
        let rec = model.reconstruct(tape, g.vae, g.enc.z_d, g.enc.z_m)?;
        let diff = tape.sub(rec, g.x)?;
        sq.push(tape.sum_squares(diff)?);
        let logits = model.domain_logits(tape, g.vae, g.enc.z_d, g.z_s)?;
        let targets = domain_targets(model, domains, &g.rows)?;
        ce.push(tape.softmax_cross_entropy(logits, &targets)?);
        kl.push(kl_gauss(tape, g.enc.mu, g.enc.logvar)?);
    }
    let sq_error = sum_vars(tape, &sq)?;
    let domain_ce = sum_vars(tape, &ce)?;
    let kl = sum_vars(tape, &kl)?;
    let supp = loss_supp(tape, model, fwd)?;
    let a = tape.add(sq_error, domain_ce)?;
    let k = tape.scale(kl, w.kl_sign * w.beta);
    let s = tape.scale(supp, w.supp_sign);
    let b = tape.add(a, k)?;
    let total = tape.add(b, s)?;
    Ok(ReconTerms {
        sq_error,
        domain_ce,
        kl,
        supp,
        total,
    })
}

/// `Σ ||f̂_y(f̂_y⁻¹(z_m)) − z_m||²`.
pub fn loss_rev(tape: &mut Tape, model: &CribModel, fwd: &BatchForward) -> Result<Var> {
    let mut parts = Vec::new();
    for g in &fwd.groups {
        let pair = &model.branches()[g.branch];
        let inv = pair.inverse.forward(tape, model.params(), g.enc.z_m)?;
        let back = pair.forward.forward(tape, model.params(), inv)?;
        let diff = tape.sub(back, g.enc.z_m)?;
        parts.push(tape.sum_squares(diff)?);
    }
    sum_vars(tape, &parts)
}

/// Batch mean of `H(softmax(ĥ_d(z_d, 0)))`.
pub fn loss_supp(tape: &mut Tape, model: &CribModel, fwd: &BatchForward) -> Result<Var> {
    let mut parts = Vec::new();
    let mut count = 0;
    for g in &fwd.groups {
        let rows = g.rows.len();
        let zeros = tape.constant(Array::zeros(vec![rows, LATENT]));
        let logits = model.domain_logits(tape, g.vae, g.enc.z_d, zeros)?;
        parts.push(tape.softmax_entropy(logits)?);
        count += rows;
    }
    let total = sum_vars(tape, &parts)?;
    Ok(tape.scale(total, 1.0 / count.max(1) as f64))
}

/// `Σ CE(F(revised x), y) + γ·CE(f_pse(x), y)`, with 1-based `classes`.
pub fn loss_cls(tape: &mut Tape, fwd: &BatchForward, classes: &[usize], gamma: f64) -> Result<Var> {
    let targets: Vec<usize> = classes.iter().map(|&c| c.wrapping_sub(1)).collect();
    let main = tape.softmax_cross_entropy(fwd.logits, &targets)?;
    match fwd.pseudo_logits {
        Some(p) if gamma != 0.0 => {
            let aux = tape.softmax_cross_entropy(p, &targets)?;
            let aux = tape.scale(aux, gamma);
            tape.add(main, aux)
        }
        _ => Ok(main),
    }
}

/// `total = l_cls + λ₁·l_recon + λ₂·l_rev`; any non-finite part is rejected
/// by name.
pub fn loss_total(l_cls: f64, l_recon: f64, l_rev: f64, l_supp: f64, kl: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_cls", l_cls),
        ("l_recon", l_recon),
        ("l_rev", l_rev),
        ("l_supp", l_supp),
        ("kl", kl),
    ] {
        if !v.is_finite() {
            return Err(Error::Contract(format!("loss part {name} is {v}")));
        }
    }
    Ok(LossBreakdown {
        l_cls,
        l_recon,
        l_rev,
        l_supp,
        kl,
        total: l_cls + lambda1 * l_recon + lambda2 * l_rev,
    })
}

/// Every term of the objective for a forward pass routed by true labels.
pub fn batch_losses(
    tape: &mut Tape,
    model: &CribModel,
    fwd: &BatchForward,
    classes: &[usize],
    domains: &[usize],
    w: &LossWeights,
) -> Result<LossVars> {
    let cls = loss_cls(tape, fwd, classes, w.gamma)?;
    let (recon, rev, supp, kl) = if fwd.groups.is_empty() {
        let z = zero(tape);
        (z, z, z, z)
    } else {
        let r = loss_recon(tape, model, fwd, domains, w)?;
        (r.total, loss_rev(tape, model, fwd)?, r.supp, r.kl)
    };
    let a = tape.scale(recon, w.lambda1);
    let b = tape.scale(rev, w.lambda2);
    let t = tape.add(cls, a)?;
    let total = tape.add(t, b)?;
    Ok(LossVars {
        cls,
        recon,
        rev,
        supp,
        kl,
        total,
    })
}

/// Central-difference checks of the total training loss with respect to
/// every parameter tensor, over `configs` random models and batches
/// (mode, sizes and data all drawn from `seed`). At most `per_tensor`
/// coordinates of each tensor are compared.
pub fn loss_grad_suite(configs: usize, seed: u64, tol: f64, per_tensor: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(configs);
    for cfg in 0..configs {
        let dims = ModelDims {
            bands: rng.random_range(4..8),
            classes: rng.random_range(2..4),
            domains: rng.random_range(2..4),
        };
        let mode = ContextMode::ALL[rng.random_range(0..ContextMode::ALL.len())];
        let model = CribModel::new(dims, mode, rng.random())?;
        let n = rng.random_range(2..6);
        let x = Array::new(
            vec![n, dims.bands],
            (0..n * dims.bands).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        // every class present so each branch sees data
        let y: Vec<usize> = (0..n).map(|i| 1 + i % dims.classes).collect();
        let d: Vec<usize> = (0..n).map(|_| rng.random_range(1..=dims.domains)).collect();
        let w = LossWeights {
            lambda1: rng.random_range(0.05..1.0),
            lambda2: rng.random_range(0.05..1.0),
            beta: rng.random_range(0.05..1.0),
            gamma: rng.random_range(0.0..1.0),
            ..LossWeights::default()
        };
        let noise_seed: u64 = rng.random();
        let report = grad_check_params(
            &model,
            CribModel::params_mut,
            |m, t| {
                let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
                let fwd = m.forward(t, &x, Route::Labels(&y), &mut Noise::Sample(&mut nrng))?;
                Ok(batch_losses(t, m, &fwd, &y, &d, &w)?.total)
            },
            tol,
            Some(per_tensor),
        )?;
        out.push((format!("{mode}#{cfg}"), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cribnet::{ContextMode, ModelDims, Noise, Route};
    use crate::numcore::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kl_value(mu: Vec<f64>, logvar: Vec<f64>) -> f64 {
        let mut t = Tape::new();
        let m = t.constant(Array::vector(mu));
        let l = t.constant(Array::vector(logvar));
        let k = kl_gauss(&mut t, m, l).unwrap();
        t.scalar(k)
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_value(vec![0.0, 0.0], vec![0.0, 0.0]), 0.0);
        assert!((kl_value(vec![1.0, 0.0], vec![0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!(kl_value(vec![0.3, -2.0], vec![1.5, -0.7]) > 0.0);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut t = Tape::new();
        let m = t.constant(Array::vector(vec![0.0; 2]));
        let l = t.constant(Array::vector(vec![0.0; 3]));
        assert!(matches!(kl_gauss(&mut t, m, l), Err(Error::Shape(_))));
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = loss_total(1.0, 2.0, 3.0, 0.5, 0.25, 0.1, 0.1).unwrap();
        assert!((b.total - 1.5).abs() < 1e-15);
        assert_eq!(loss_total(1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0).unwrap().total, 1.0);
        let one = loss_total(1.0, 2.0, 0.0, 0.0, 0.0, 0.1, 0.0).unwrap().total - 1.0;
        let two = loss_total(1.0, 2.0, 0.0, 0.0, 0.0, 0.2, 0.0).unwrap().total - 1.0;
        assert_eq!(two, 2.0 * one);
        match loss_total(1.0, f64::NAN, 0.0, 0.0, 0.0, 0.1, 0.1) {
            Err(Error::Contract(m)) => assert!(m.contains("l_recon")),
            other => panic!("{other:?}"),
        }
    }

    fn batch(n: usize, bands: usize, seed: u64) -> (Array, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * bands).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let classes = (0..n).map(|i| 1 + i % 2).collect();
        let domains = (0..n).map(|i| 1 + (i / 2) % 3).collect();
        (Array::new(vec![n, bands], data).unwrap(), classes, domains)
    }

    fn total_of(model: &CribModel, t: &mut Tape, x: &Array, y: &[usize], d: &[usize], w: &LossWeights) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut noise = Noise::Sample(&mut rng);
        let fwd = model.forward(t, x, Route::Labels(y), &mut noise)?;
        Ok(batch_losses(t, model, &fwd, y, d, w)?.total)
    }

    #[test]
    fn uniform_heads_give_ln2_per_sample() {
        let dims = ModelDims {
            bands: 6,
            classes: 2,
            domains: 3,
        };
        let mut model = CribModel::new(dims, ContextMode::Crib, 1).unwrap();
        // zero the last layers of both classifiers so their logits are flat
        for name in ["backbone.fc.1.weight", "pseudo.2.weight"] {
            let id = model.params().find(name).unwrap();
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let (x, y, _) = batch(5, 6, 0);
        let mut t = Tape::new();
        let fwd = model.forward(&mut t, &x, Route::Labels(&y), &mut Noise::Mean).unwrap();
        for gamma in [0.0, 0.5] {
            let l = loss_cls(&mut t, &fwd, &y, gamma).unwrap();
            let want = (1.0 + gamma) * 5.0 * 2f64.ln();
            assert!((t.scalar(l) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn supp_is_ln_d_for_uniform_head_and_ignores_z_s() {
        let dims = ModelDims {
            bands: 5,
            classes: 2,
            domains: 4,
        };
        let model = CribModel::new(dims, ContextMode::Crib, 2).unwrap();
        let (x, y, _) = batch(4, 5, 1);
        let mut t = Tape::new();
        let fwd = model.forward(&mut t, &x, Route::Labels(&y), &mut Noise::Mean).unwrap();
        // the domain head's last layer starts at zero
        let s = loss_supp(&mut t, &model, &fwd).unwrap();
        assert!((t.scalar(s) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_drops_kl() {
        let dims = ModelDims {
            bands: 5,
            classes: 2,
            domains: 3,
        };
        let model = CribModel::new(dims, ContextMode::Crib, 3).unwrap();
        let (x, y, d) = batch(6, 5, 2);
        let terms = |beta: f64| {
            let w = LossWeights {
                beta,
                ..Default::default()
            };
            let mut t = Tape::new();
            let fwd = model.forward(&mut t, &x, Route::Labels(&y), &mut Noise::Mean).unwrap();
            let r = loss_recon(&mut t, &model, &fwd, &d, &w).unwrap();
            (t.scalar(r.total), t.scalar(r.sq_error) + t.scalar(r.domain_ce) + t.scalar(r.supp), t.scalar(r.kl))
        };
        let (with0, parts, _) = terms(0.0);
        assert_eq!(with0, parts);
        let (with1, parts1, kl) = terms(1.0);
        assert!((with1 - parts1 - kl).abs() < 1e-12);
    }

    #[test]
    fn missing_domain_labels_are_rejected() {
        let dims = ModelDims {
            bands: 5,
            classes: 2,
            domains: 3,
        };
        let model = CribModel::new(dims, ContextMode::Crib, 3).unwrap();
        let (x, y, mut d) = batch(4, 5, 2);
        let mut t = Tape::new();
        let fwd = model.forward(&mut t, &x, Route::Labels(&y), &mut Noise::Mean).unwrap();
        let w = LossWeights::default();
        assert!(matches!(loss_recon(&mut t, &model, &fwd, &d[..3], &w), Err(Error::Contract(_))));
        d[1] = 0;
        assert!(matches!(loss_recon(&mut t, &model, &fwd, &d, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn rev_with_hand_set_branches() {
        // forward = identity, inverse = 2x: rev = Σ ||z_m||²
        let dims = ModelDims {
            bands: 4,
            classes: 2,
            domains: 2,
        };
        let mut model = CribModel::new(dims, ContextMode::Crib, 4).unwrap();
        let set = |m: &mut CribModel, name: &str, f: &dyn Fn(usize, usize) -> f64| {
            let id = m.params().find(name).unwrap();
            let a = m.params_mut().get_mut(id);
            let cols = a.shape()[1];
            for (k, v) in a.data_mut().iter_mut().enumerate() {
                *v = f(k / cols, k % cols);
            }
        };
        for b in 0..2 {
            // layer 0 lifts z into [z, -z] so the rectifier keeps everything
            let lift = |r: usize, c: usize| match (r, c) {
                (r, c) if r < 4 && r == c => 1.0,
                (r, c) if (4..8).contains(&r) && r - 4 == c => -1.0,
                _ => 0.0,
            };
            for (net, k) in [("fwd", 1.0), ("inv", 2.0)] {
                set(&mut model, &format!("branch{b}.{net}.0.weight"), &lift);
                set(&mut model, &format!("branch{b}.{net}.1.weight"), &|r, c| {
                    if c == r {
                        k
                    } else if c == r + 4 {
                        -k
                    } else {
                        0.0
                    }
                });
            }
        }
        let (x, y, _) = batch(3, 4, 5);
        let mut t = Tape::new();
        let fwd = model.forward(&mut t, &x, Route::Labels(&y), &mut Noise::Mean).unwrap();
        let rev = loss_rev(&mut t, &model, &fwd).unwrap();
        let norm: f64 = fwd.groups.iter().map(|g| t.value(g.enc.z_m).data().iter().map(|v| v * v).sum::<f64>()).sum();
        assert!((t.scalar(rev) - norm).abs() < 1e-10 * norm.max(1.0));
    }

    #[test]
    fn random_configs_pass_end_to_end() {
        for (name, r) in loss_grad_suite(3, 4, 1e-4, 4).unwrap() {
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn end_to_end_gradient_matches_differences() {
        let dims = ModelDims {
            bands: 5,
            classes: 2,
            domains: 3,
        };
        let model = CribModel::new(dims, ContextMode::Crib, 5).unwrap();
        let (x, y, d) = batch(3, 5, 6);
        let w = LossWeights::default();
        let r = grad_check_params(
            &model,
            CribModel::params_mut,
            |m, t| total_of(m, t, &x, &y, &d, &w),
            1e-4,
            Some(6),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.checked > 100);
    }
}
