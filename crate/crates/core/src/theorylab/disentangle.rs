//! Linear probes of the learned latents: how much of the domain and class
//! labels ordinary least squares recovers from `ẑ_d` and `ẑ_m`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cribnet::{CribModel, Noise, Route};
use crate::error::{Error, Result};
use crate::hsidata::{batches_in_order, DomainDataset};
use crate::numcore::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub r2_zd_domain: f64,
    pub r2_zm_domain: f64,
    pub r2_zm_class: f64,
    /// Whether any regression needed the pseudo-inverse.
    pub rank_deficient: bool,
    pub samples: usize,
}

/// R² of a least-squares fit with intercept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OlsFit {
    /// `1 − Σ SS_res / Σ SS_tot`, summed over target columns.
    pub r2: f64,
    pub rank_deficient: bool,
}

pub fn ols_r2(features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<OlsFit> {
    let n = features.len();
    if n == 0 || targets.len() != n {
        return Err(Error::shape(format!("{n} feature rows for {} target rows", targets.len())));
    }
    let p = features[0].len() + 1;
    let t = targets[0].len();
    if features.iter().any(|r| r.len() + 1 != p) || targets.iter().any(|r| r.len() != t) {
        return Err(Error::shape("ragged regression rows"));
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let y = DMatrix::from_fn(n, t, |i, j| targets[i][j]);
    let svd = x.clone().svd(true, true);
    let tol = f64::EPSILON * n.max(p) as f64 * svd.singular_values.max();
    let rank = svd.rank(tol);
    let beta = svd.solve(&y, tol).map_err(|e| Error::Data(format!("least squares failed: {e}")))?;
    let resid = &y - &x * beta;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for j in 0..t {
        let col = y.column(j);
        let mean = col.mean();
        ss_tot += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        ss_res += resid.column(j).iter().map(|v| v * v).sum::<f64>();
    }
    if ss_tot == 0.0 {
        return Err(Error::Data("targets are constant; R² is undefined".into()));
    }
    Ok(OlsFit {
        r2: 1.0 - ss_res / ss_tot,
        rank_deficient: rank < p,
    })
}

/// One-hot rows for 1-based labels in `1..=k`.
pub fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| (1..=k).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Latent means `(ẑ_d, ẑ_m)` of every sample, routed by its class.
pub fn encode_dataset(model: &CribModel, data: &DomainDataset, batch_size: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !model.mode().has_vae() {
        return Err(Error::Contract(format!("{} mode has no encoder", model.mode())));
    }
    let mut zd = Vec::with_capacity(data.len());
    let mut zm = Vec::with_capacity(data.len());
    for b in batches_in_order(data, batch_size)? {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &b.spectra, Route::Labels(&b.classes), &mut Noise::Mean)?;
        let mut d = vec![Vec::new(); b.len()];
        let mut m = vec![Vec::new(); b.len()];
        for g in &fwd.groups {
            let (vd, vm) = (tape.value(g.enc.z_d), tape.value(g.enc.z_m));
            for (j, &r) in g.rows.iter().enumerate() {
                d[r] = vd.row(j).to_vec();
                m[r] = vm.row(j).to_vec();
            }
        }
        zd.extend(d);
        zm.extend(m);
    }
    Ok((zd, zm))
}

pub fn disentangle_probe(model: &CribModel, data: &DomainDataset) -> Result<DisentangleReport> {
    let (zd, zm) = encode_dataset(model, data, 256)?;
    let domains: Vec<usize> = data.samples.iter().map(|s| s.domain).collect();
    let classes: Vec<usize> = data.samples.iter().map(|s| s.class).collect();
    let dom = one_hot(&domains, data.domains);
    let cls = one_hot(&classes, data.classes);
    let a = ols_r2(&zd, &dom)?;
    let b = ols_r2(&zm, &dom)?;
    let c = ols_r2(&zm, &cls)?;
    Ok(DisentangleReport {
        r2_zd_domain: a.r2,
        r2_zm_domain: b.r2,
        r2_zm_class: c.r2,
        rank_deficient: a.rank_deficient || b.rank_deficient || c.rank_deficient,
        samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cribnet::{ContextMode, ModelDims};
    use crate::hsidata::{synth_generate, DomainDataset, SynthConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_linear_targets_fit_perfectly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0] - r[1] + 3.0]).collect();
        let fit = ols_r2(&x, &y).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn duplicated_columns_use_the_pseudo_inverse() {
        let x: Vec<Vec<f64>> = (0..15).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<Vec<f64>> = (0..15).map(|i| vec![0.5 * i as f64 + 1.0]).collect();
        let fit = ols_r2(&x, &y).unwrap();
        assert!(fit.rank_deficient);
        assert!((fit.r2 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hand_computed_r2() {
        // y = [1, 2, 2, 3] on x = [0, 1, 2, 3]: slope 0.6, intercept 1.1,
        // residuals [-0.1, 0.3, -0.3, 0.1] → SS_res 0.2, SS_tot 2.
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let y = vec![vec![1.0], vec![2.0], vec![2.0], vec![3.0]];
        assert!((ols_r2(&x, &y).unwrap().r2 - 0.9).abs() < 1e-12);
        assert!(ols_r2(&x, &vec![vec![1.0]; 4]).is_err());
    }

    fn sources() -> DomainDataset {
        let cfg = SynthConfig {
            samples_per_cell: 60,
            ..SynthConfig::default()
        };
        DomainDataset::concat(&synth_generate(&cfg).unwrap().sources).unwrap()
    }

    #[test]
    fn true_domain_latent_recovers_the_domain() {
        let data = sources();
        let zd: Vec<Vec<f64>> = data.samples.iter().map(|s| s.latents.as_ref().unwrap().z_d.to_vec()).collect();
        let doms: Vec<usize> = data.samples.iter().map(|s| s.domain).collect();
        let fit = ols_r2(&zd, &one_hot(&doms, data.domains)).unwrap();
        assert!(fit.r2 > 0.95, "{}", fit.r2);
    }

    #[test]
    fn permuted_targets_leave_nothing_to_explain() {
        let data = sources();
        let dims = ModelDims {
            bands: data.bands,
            classes: data.classes,
            domains: 3,
        };
        let m = CribModel::new(dims, ContextMode::Crib, 0).unwrap();
        let (zd, zm) = encode_dataset(&m, &data, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut doms: Vec<usize> = data.samples.iter().map(|s| s.domain).collect();
        let mut cls: Vec<usize> = data.samples.iter().map(|s| s.class).collect();
        doms.shuffle(&mut rng);
        cls.shuffle(&mut rng);
        for (f, t) in [(&zd, one_hot(&doms, 4)), (&zm, one_hot(&doms, 4)), (&zm, one_hot(&cls, 2))] {
            let r2 = ols_r2(f, &t).unwrap().r2;
            assert!(r2 < 0.2, "{r2}");
        }
        let r = disentangle_probe(&m, &data).unwrap();
        assert_eq!(r.samples, data.len());
        for v in [r.r2_zd_domain, r.r2_zm_domain, r.r2_zm_class] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
