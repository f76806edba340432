//! Synthetic scenes drawn from a two-stage causal generator.
//!
//! Per sample: a class `c` and a class-independent latent `z_s ~ N(0, I₄)`
//! give the mixed latent `z_m = A_c z_s + b_c` (`A_c` orthogonal); a domain
//! `d` gives `z_d = μ_d + jitter`. The spectrum is
//!
//! ```text
//! x = mean(c, d) + s · (L_m (z_m − b_c) + L_d (z_d − μ_d)) + noise
//! ```
//!
//! where `mean(c, d)` is the class profile plus the domain offset and `s`
//! is `latent_scale`. Because `A_c` is orthogonal, `z_m − b_c` has the same
//! law for every class, so two cells with the same mean are
//! indistinguishable in distribution. Collision pairs derive the first
//! cell's domain offset from the second so that their means are equal to
//! the last bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cube::{HsiCube, LabelMap};
use super::dataset::{DomainDataset, Sample, TrueLatents};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 4;

/// Gaussian bump on the normalized band axis `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn at(&self, u: f64) -> f64 {
        let t = (u - self.center) / self.width;
        self.amplitude * (-0.5 * t * t).exp()
    }
}

/// `(class, domain)`, both 1-based.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub first: Cell,
    pub second: Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    pub bands: usize,
    /// Bumps summed into each class profile (`classes` entries).
    pub class_bumps: Vec<Vec<Bump>>,
    /// Bumps summed into each domain offset (`domains` entries).
    pub domain_bumps: Vec<Vec<Bump>>,
    pub collisions: Vec<Collision>,
    pub noise_sigma: f64,
    /// Amplitude of the latent modulation around each cell mean.
    pub latent_scale: f64,
    /// Standard deviation of `z_d` around its domain center.
    pub domain_jitter: f64,
    /// Minimum max-abs band difference between non-colliding cell means.
    pub min_separation: f64,
    pub samples_per_cell: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk(2, 4, 48)
    }
}

impl SynthConfig {
    /// Desk-scale layout: every class gets a broad shared shape plus a
    /// narrow class bump; each source domain shifts along the class
    /// difference direction by a different amount and adds its own faint
    /// bump, just enough to keep the source cells apart.
    /// The default collision makes class 1 of the held-out domain look
    /// exactly like class 2 of domain 1.
    pub fn desk(classes: usize, domains: usize, bands: usize) -> Self {
        let class_bumps: Vec<Vec<Bump>> = (0..classes)
            .map(|c| {
                vec![
                    Bump {
                        center: 0.5,
                        width: 0.3,
                        amplitude: 1.0,
                    },
                    Bump {
                        center: (c as f64 + 0.5) / classes as f64,
                        width: 0.08,
                        amplitude: 0.6,
                    },
                ]
            })
            .collect();
        let sources = domains.saturating_sub(1).max(1);
        let domain_bumps = (0..domains)
            .map(|d| {
                if d + 1 == domains && domains > 1 {
                    return Vec::new();
                }
                // shift along (class 2 − class 1) spread over [-0.6, 0.6]
                let alpha = if sources > 1 {
                    -0.6 + 1.2 * d as f64 / (sources - 1) as f64
                } else {
                    0.0
                };
                let mut bumps = Vec::new();
                if classes >= 2 {
                    bumps.push(Bump {
                        amplitude: alpha * class_bumps[1][1].amplitude,
                        ..class_bumps[1][1]
                    });
                    bumps.push(Bump {
                        amplitude: -alpha * class_bumps[0][1].amplitude,
                        ..class_bumps[0][1]
                    });
                }
                bumps.push(Bump {
                    center: 0.1 + 0.8 * (d as f64 + 0.5) / domains as f64,
                    width: 0.05,
                    amplitude: 0.1,
                });
                bumps
            })
            .collect();
        let collisions = if classes >= 2 && domains >= 2 {
            vec![Collision {
                first: (1, domains),
                second: (2, 1),
            }]
        } else {
            Vec::new()
        };
        Self {
            classes,
            domains,
            bands,
            class_bumps,
            domain_bumps,
            collisions,
            noise_sigma: 0.01,
            latent_scale: 0.02,
            domain_jitter: 0.1,
            min_separation: 0.05,
            samples_per_cell: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(m));
        if self.classes == 0 || self.domains < 2 || self.bands < 2 {
            return bad(format!(
                "need C >= 1, D >= 2, B >= 2; got C={} D={} B={}",
                self.classes, self.domains, self.bands
            ));
        }
        if self.class_bumps.len() != self.classes || self.domain_bumps.len() != self.domains {
            return bad(format!(
                "{} class profiles and {} domain offsets for C={} D={}",
                self.class_bumps.len(),
                self.domain_bumps.len(),
                self.classes,
                self.domains
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.latent_scale >= 0.0) || !(self.domain_jitter >= 0.0) {
            return bad("noise, latent scale and jitter must be non-negative".into());
        }
        if self.samples_per_cell == 0 {
            return bad("samples_per_cell must be positive".into());
        }
        for col in &self.collisions {
            let (c1, d1) = col.first;
            let (c2, d2) = col.second;
            let in_range = |c: usize, d: usize| (1..=self.classes).contains(&c) && (1..=self.domains).contains(&d);
            if !in_range(c1, d1) || !in_range(c2, d2) {
                return bad(format!("collision {col:?} references a cell outside the grid"));
            }
            if c1 == c2 {
                return bad(format!("collision {col:?} pairs a class with itself"));
            }
        }
        Ok(())
    }
}

fn profile(bumps: &[Bump], bands: usize) -> Vec<f64> {
    (0..bands)
        .map(|b| {
            let u = b as f64 / (bands - 1) as f64;
            bumps.iter().map(|bump| bump.at(u)).sum()
        })
        .collect()
}

/// Smooth band loadings for the latent modulation; `phase` separates the
/// mixed-latent and domain-latent families.
fn loadings(bands: usize, phase: f64) -> Vec<[f64; LATENT_DIM]> {
    (0..bands)
        .map(|b| {
            let u = b as f64 / (bands - 1) as f64;
            let mut row = [0.0; LATENT_DIM];
            for (k, r) in row.iter_mut().enumerate() {
                *r = (std::f64::consts::PI * (k as f64 + 1.0) * u + phase).cos();
            }
            row
        })
        .collect()
}

fn householder(v: [f64; LATENT_DIM]) -> [[f64; LATENT_DIM]; LATENT_DIM] {
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let mut a = [[0.0; LATENT_DIM]; LATENT_DIM];
    for i in 0..LATENT_DIM {
        for j in 0..LATENT_DIM {
            let eye = if i == j { 1.0 } else { 0.0 };
            a[i][j] = eye - 2.0 * v[i] * v[j] / norm2;
        }
    }
    a
}

fn normal4<R: Rng + ?Sized>(rng: &mut R) -> [f64; LATENT_DIM] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// Fixed structure of a synthetic world: cell means, latent maps, loadings.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    cfg: SynthConfig,
    /// Indexed `[(c - 1) * D + (d - 1)]`.
    cell_means: Vec<Vec<f64>>,
    /// Atom id per cell; cells sharing an id have identical means.
    atoms: Vec<usize>,
    class_maps: Vec<[[f64; LATENT_DIM]; LATENT_DIM]>,
    class_shifts: Vec<[f64; LATENT_DIM]>,
    domain_centers: Vec<[f64; LATENT_DIM]>,
    mixed_loadings: Vec<[f64; LATENT_DIM]>,
    domain_loadings: Vec<[f64; LATENT_DIM]>,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (nc, nd, nb) = (cfg.classes, cfg.domains, cfg.bands);
        let class_profiles: Vec<Vec<f64>> = cfg.class_bumps.iter().map(|b| profile(b, nb)).collect();
        let mut offsets: Vec<Vec<f64>> = cfg.domain_bumps.iter().map(|b| profile(b, nb)).collect();

        // Derive the first cell's domain offset from the second cell.
        let mut derived = vec![false; nd];
        for col in &cfg.collisions {
            let ((c1, d1), (c2, d2)) = (col.first, col.second);
            if d1 == d2 {
                return Err(Error::Construction(format!(
                    "collision {col:?}: two classes of one domain cannot share a mean"
                )));
            }
            let want: Vec<f64> = (0..nb)
                .map(|b| class_profiles[c2 - 1][b] + offsets[d2 - 1][b] - class_profiles[c1 - 1][b])
                .collect();
            if derived[d1 - 1] {
                let clash = want.iter().zip(&offsets[d1 - 1]).any(|(a, b)| (a - b).abs() > 1e-9);
                if clash {
                    return Err(Error::Construction(format!(
                        "collision {col:?} conflicts with an earlier collision on domain {d1}"
                    )));
                }
            } else {
                offsets[d1 - 1] = want;
                derived[d1 - 1] = true;
            }
        }

        let idx = |c: usize, d: usize| (c - 1) * nd + (d - 1);
        let mut cell_means = vec![Vec::new(); nc * nd];
        for c in 1..=nc {
            for d in 1..=nd {
                cell_means[idx(c, d)] = (0..nb)
                    .map(|b| class_profiles[c - 1][b] + offsets[d - 1][b])
                    .collect();
            }
        }

        // Every pair must still hold after all derivations; then unify bits.
        let mut atoms: Vec<usize> = (0..nc * nd).collect();
        for col in &cfg.collisions {
            let (a, b) = (idx(col.first.0, col.first.1), idx(col.second.0, col.second.1));
            let gap = max_abs_diff(&cell_means[a], &cell_means[b]);
            if gap > 1e-9 {
                return Err(Error::Construction(format!(
                    "collision {col:?} cannot be satisfied (residual {gap:.3e})"
                )));
            }
            let (ra, rb) = (find(&mut atoms, a), find(&mut atoms, b));
            atoms[ra.max(rb)] = ra.min(rb);
        }
        for k in 0..atoms.len() {
            let root = find(&mut atoms, k);
            atoms[k] = root;
            if root != k {
                cell_means[k] = cell_means[root].clone();
            }
        }
        for a in 0..nc * nd {
            for b in a + 1..nc * nd {
                if atoms[a] == atoms[b] {
                    continue;
                }
                let gap = max_abs_diff(&cell_means[a], &cell_means[b]);
                if gap < cfg.min_separation {
                    let cell = |k: usize| (k / nd + 1, k % nd + 1);
                    return Err(Error::Construction(format!(
                        "cells {:?} and {:?} differ by only {gap:.3e} (< {})",
                        cell(a),
                        cell(b),
                        cfg.min_separation
                    )));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_57a7);
        let class_maps = (0..nc).map(|_| householder(normal4(&mut rng))).collect();
        let class_shifts = (0..nc).map(|_| normal4(&mut rng)).collect();
        let domain_centers = (0..nd).map(|_| normal4(&mut rng)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            cell_means,
            atoms,
            class_maps,
            class_shifts,
            domain_centers,
            mixed_loadings: loadings(nb, 0.0),
            domain_loadings: loadings(nb, 0.5 * std::f64::consts::PI),
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Noise-free mean spectrum of a cell.
    pub fn cell_mean(&self, class: usize, domain: usize) -> &[f64] {
        &self.cell_means[(class - 1) * self.cfg.domains + (domain - 1)]
    }

    fn atom(&self, class: usize, domain: usize) -> usize {
        self.atoms[(class - 1) * self.cfg.domains + (domain - 1)]
    }

    /// Spectrum for explicit latents (before observation noise).
    pub fn spectrum(&self, class: usize, domain: usize, z_s: [f64; 4], z_d_noise: [f64; 4]) -> (Vec<f64>, TrueLatents) {
        let a = &self.class_maps[class - 1];
        let shift = &self.class_shifts[class - 1];
        let center = &self.domain_centers[domain - 1];
        let rotated: [f64; 4] = std::array::from_fn(|i| (0..LATENT_DIM).map(|j| a[i][j] * z_s[j]).sum());
        let z_m: [f64; 4] = std::array::from_fn(|i| rotated[i] + shift[i]);
        let z_d: [f64; 4] = std::array::from_fn(|i| center[i] + z_d_noise[i]);
        let s = self.cfg.latent_scale;
        let spectrum = self
            .cell_mean(class, domain)
            .iter()
            .enumerate()
            .map(|(b, &m)| {
                let lm = &self.mixed_loadings[b];
                let ld = &self.domain_loadings[b];
                let modulation: f64 = (0..LATENT_DIM)
                    .map(|k| lm[k] * (z_m[k] - shift[k]) + ld[k] * (z_d[k] - center[k]))
                    .sum();
                m + s * modulation
            })
            .collect();
        (spectrum, TrueLatents { z_s, z_m, z_d })
    }

    /// One i.i.d. draw from a cell.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, domain: usize, rng: &mut R) -> Sample {
        let z_s = normal4(rng);
        let jitter = normal4(rng).map(|v| v * self.cfg.domain_jitter);
        let (mut spectrum, latents) = self.spectrum(class, domain, z_s, jitter);
        if self.cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
            spectrum.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        Sample {
            spectrum,
            class,
            domain,
            latents: Some(latents),
        }
    }

    /// `samples_per_cell` draws from every cell of `domain`, shuffled.
    pub fn domain_dataset<R: Rng + ?Sized>(&self, domain: usize, rng: &mut R) -> DomainDataset {
        let mut samples = Vec::with_capacity(self.cfg.classes * self.cfg.samples_per_cell);
        for class in 1..=self.cfg.classes {
            for _ in 0..self.cfg.samples_per_cell {
                samples.push(self.sample(class, domain, rng));
            }
        }
        samples.shuffle(rng);
        DomainDataset {
            bands: self.cfg.bands,
            classes: self.cfg.classes,
            domains: self.cfg.domains,
            samples,
        }
    }
}

fn find(parent: &mut [usize], mut k: usize) -> usize {
    while parent[k] != k {
        parent[k] = parent[parent[k]];
        k = parent[k];
    }
    k
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Source domains `1..D-1` and the held-out domain `D`.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    let world = SynthWorld::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sets: Vec<DomainDataset> = (1..=cfg.domains).map(|d| world.domain_dataset(d, &mut rng)).collect();
    let target = sets.pop().expect("at least two domains");
    Ok(SynthData { sources: sets, target })
}

/// Accuracy ceilings on the held-out domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAccuracy {
    pub oa_no_context: f64,
    pub oa_with_context: f64,
}

/// Exact Bayes accuracies on the held-out domain, enumerating cells.
///
/// Cells with identical noise-free means form an atom. Without domain
/// knowledge a spectrum is assigned the class carrying the most cells of its
/// atom across all domains, ties split evenly; with domain knowledge only
/// same-domain cells of the atom compete.
pub fn bayes_oracle(cfg: &SynthConfig) -> Result<OracleAccuracy> {
    let world = SynthWorld::new(cfg)?;
    let target = cfg.domains;
    let mut no_ctx = 0.0;
    let mut with_ctx = 0.0;
    for class in 1..=cfg.classes {
        let atom = world.atom(class, target);
        let mut votes_all = vec![0usize; cfg.classes + 1];
        let mut votes_dom = vec![0usize; cfg.classes + 1];
        for c in 1..=cfg.classes {
            for d in 1..=cfg.domains {
                if world.atom(c, d) == atom {
                    votes_all[c] += 1;
                    if d == target {
                        votes_dom[c] += 1;
                    }
                }
            }
        }
        no_ctx += share(&votes_all, class);
        with_ctx += share(&votes_dom, class);
    }
    Ok(OracleAccuracy {
        oa_no_context: no_ctx / cfg.classes as f64,
        oa_with_context: with_ctx / cfg.classes as f64,
    })
}

fn share(votes: &[usize], class: usize) -> f64 {
    let best = *votes.iter().max().expect("non-empty");
    if votes[class] < best {
        return 0.0;
    }
    1.0 / votes.iter().filter(|&&v| v == best).count() as f64
}

/// Lays domains out as the quadrants of a square scene (1 = NW, 2 = NE,
/// 3 = SW, 4 = SE), row-major within each quadrant; spare pixels are
/// unlabeled zeros. Requires exactly four domains.
pub fn to_scene(domains: &[&DomainDataset]) -> Result<(HsiCube, LabelMap)> {
    if domains.len() != 4 {
        return Err(Error::Contract(format!("scene layout needs 4 domains, got {}", domains.len())));
    }
    let bands = domains[0].bands;
    let most = domains.iter().map(|d| d.len()).max().unwrap_or(0).max(1);
    let side = (1..).find(|s| s * s >= most).expect("finite");
    let size = 2 * side;
    let mut data = vec![0.0; size * size * bands];
    let mut labels = vec![0u16; size * size];
    for (q, ds) in domains.iter().enumerate() {
        if ds.bands != bands {
            return Err(Error::shape("domains disagree on band count"));
        }
        let (h0, w0) = ((q / 2) * side, (q % 2) * side);
        for (k, s) in ds.samples.iter().enumerate() {
            let (h, w) = (h0 + k / side, w0 + k % side);
            let p = h * size + w;
            labels[p] = u16::try_from(s.class).map_err(|_| Error::Data("class exceeds u16".into()))?;
            data[p * bands..(p + 1) * bands].copy_from_slice(&s.spectrum);
        }
    }
    Ok((HsiCube::new(size, size, bands, data)?, LabelMap::new(size, size, labels)?))
}
