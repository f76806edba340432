//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// OA, AA and kappa by expanding the matrix into individual
/// `(truth, prediction)` pairs and counting.
pub fn brute_force_metrics(counts: &[Vec<u64>]) -> (f64, f64, f64) {
    let k = counts.len();
    let mut pairs = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    let n = pairs.len() as f64;
    let hits = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    let oa = hits / n;

    let mut recalls = Vec::new();
    for c in 0..k {
        let of_c: Vec<_> = pairs.iter().filter(|(t, _)| *t == c).collect();
        if !of_c.is_empty() {
            recalls.push(of_c.iter().filter(|(_, p)| *p == c).count() as f64 / of_c.len() as f64);
        }
    }
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;

    // Chance agreement: probability that an independent truth draw and
    // prediction draw coincide.
    let mut chance = 0.0;
    for c in 0..k {
        let t = pairs.iter().filter(|(t, _)| *t == c).count() as f64 / n;
        let p = pairs.iter().filter(|(_, p)| *p == c).count() as f64 / n;
        chance += t * p;
    }
    let kappa = if chance == 1.0 { 1.0 } else { (oa - chance) / (1.0 - chance) };
    (oa, aa, kappa)
}

/// Monte-Carlo `E_q[log q(z) − log p(z)]` for `q = N(mu, exp(logvar))`
/// and `p = N(0, 1)`, summed over coordinates.
pub fn mc_kl<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], draws: usize, rng: &mut R) -> f64 {
    let mut total = 0.0;
    for _ in 0..draws {
        for (&m, &lv) in mu.iter().zip(logvar) {
            let sd = (0.5 * lv).exp();
            let e: f64 = StandardNormal.sample(rng);
            let z = m + sd * e;
            let log_q = -0.5 * e * e - 0.5 * lv;
            let log_p = -0.5 * z * z;
            total += log_q - log_p;
        }
    }
    total / draws as f64
}
