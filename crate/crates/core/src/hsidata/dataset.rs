use rand::seq::SliceRandom;
use rand::Rng;

use super::cube::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::numcore::Array;

/// Generative latents of a synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueLatents {
    pub z_s: [f64; 4],
    pub z_m: [f64; 4],
    pub z_d: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spectrum: Vec<f64>,
    /// Class in `1..=C`.
    pub class: usize,
    /// Domain in `1..=D`.
    pub domain: usize,
    pub latents: Option<TrueLatents>,
}

/// Flat labeled spectra from one or more domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub bands: usize,
    pub classes: usize,
    pub domains: usize,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(bands: usize, classes: usize, domains: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            bands,
            classes,
            domains,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.spectrum.len() != self.bands {
                return Err(Error::shape(format!(
                    "sample {i} has {} bands, dataset has {}",
                    s.spectrum.len(),
                    self.bands
                )));
            }
            if s.class == 0 || s.class > self.classes {
                return Err(Error::Data(format!(
                    "sample {i} class {} outside 1..={}",
                    s.class, self.classes
                )));
            }
            if s.domain == 0 || s.domain > self.domains {
                return Err(Error::Data(format!(
                    "sample {i} domain {} outside 1..={}",
                    s.domain, self.domains
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenates datasets that share band and class counts.
    pub fn concat(parts: &[DomainDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("no datasets to join".into()))?;
        let mut samples = Vec::new();
        let mut domains = 0;
        for p in parts {
            if p.bands != first.bands || p.classes != first.classes {
                return Err(Error::shape(format!(
                    "cannot join B={} C={} with B={} C={}",
                    first.bands, first.classes, p.bands, p.classes
                )));
            }
            domains = domains.max(p.domains);
            samples.extend(p.samples.iter().cloned());
        }
        Self::new(first.bands, first.classes, domains, samples)
    }

    /// The first `cap` samples of each class, in order.
    pub fn capped_per_class(&self, cap: usize) -> Self {
        let mut seen = vec![0usize; self.classes + 1];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                seen[s.class] += 1;
                seen[s.class] <= cap
            })
            .cloned()
            .collect();
        Self {
            samples,
            ..self.clone_empty()
        }
    }

    /// Samples drawn from one domain.
    pub fn only_domain(&self, domain: usize) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| s.domain == domain).cloned().collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Self {
        Self {
            bands: self.bands,
            classes: self.classes,
            domains: self.domains,
            samples: Vec::new(),
        }
    }

    /// Batch over the given sample indices, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.bands);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].spectrum);
        }
        Batch {
            spectra: Array::new(vec![indices.len(), self.bands], data).expect("validated spectra"),
            classes: indices.iter().map(|&i| self.samples[i].class).collect(),
            domains: indices.iter().map(|&i| self.samples[i].domain).collect(),
            indices: indices.to_vec(),
        }
    }
}

/// A group of samples processed together.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[K, B]`.
    pub spectra: Array,
    pub classes: Vec<usize>,
    pub domains: Vec<usize>,
    /// Positions in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Shuffles the dataset and cuts it into batches of `size`; the last batch
/// may be short.
pub fn make_batches<R: Rng + ?Sized>(dataset: &DomainDataset, size: usize, rng: &mut R) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    Ok(order.chunks(size).map(|c| dataset.batch(c)).collect())
}

/// Consecutive batches of `size` in dataset order.
pub fn batches_in_order(dataset: &DomainDataset, size: usize) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let order: Vec<usize> = (0..dataset.len()).collect();
    Ok(order.chunks(size).map(|c| dataset.batch(c)).collect())
}

/// Cuts a scene at `(⌊H/2⌋, ⌊W/2⌋)` into four domains: 1 = NW, 2 = NE,
/// 3 = SW, 4 = SE. Unlabeled pixels are dropped; the class count is the
/// largest label present.
pub fn quadrant_split(cube: &HsiCube, labels: &LabelMap) -> Result<[DomainDataset; 4]> {
    if cube.height != labels.height || cube.width != labels.width {
        return Err(Error::shape(format!(
            "cube is {}x{}, labels are {}x{}",
            cube.height, cube.width, labels.height, labels.width
        )));
    }
    let classes = labels.max_label() as usize;
    let (mid_h, mid_w) = (cube.height / 2, cube.width / 2);
    let mut parts: [Vec<Sample>; 4] = Default::default();
    for h in 0..cube.height {
        for w in 0..cube.width {
            let label = labels.get(h, w) as usize;
            if label == 0 {
                continue;
            }
            let domain = 1 + usize::from(w >= mid_w) + 2 * usize::from(h >= mid_h);
            parts[domain - 1].push(Sample {
                spectrum: cube.pixel(h, w).to_vec(),
                class: label,
                domain,
                latents: None,
            });
        }
    }
    let classes = classes.max(1);
    let [a, b, c, d] = parts;
    Ok([a, b, c, d].map(|samples| DomainDataset {
        bands: cube.bands,
        classes,
        domains: 4,
        samples,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(h: usize, w: usize, label: impl Fn(usize, usize) -> u16) -> (HsiCube, LabelMap) {
        let data = (0..h * w * 2).map(|i| i as f64).collect();
        let labels = (0..h * w).map(|i| label(i / w, i % w)).collect();
        (
            HsiCube::new(h, w, 2, data).unwrap(),
            LabelMap::new(h, w, labels).unwrap(),
        )
    }

    #[test]
    fn even_scene_splits_evenly() {
        let (c, l) = scene(10, 10, |_, _| 1);
        let parts = quadrant_split(&c, &l).unwrap();
        assert_eq!(parts.each_ref().map(|p| p.len()), [25; 4]);
    }

    #[test]
    fn odd_scene_uses_floor_midpoint() {
        let (c, l) = scene(9, 9, |_, _| 1);
        let parts = quadrant_split(&c, &l).unwrap();
        assert_eq!(parts.each_ref().map(|p| p.len()), [16, 20, 20, 25]);
        assert!(parts.iter().enumerate().all(|(i, p)| p.samples.iter().all(|s| s.domain == i + 1)));
    }

    #[test]
    fn unlabeled_pixels_are_dropped() {
        let (c, l) = scene(4, 4, |h, w| if h == 0 && w == 0 { 0 } else { 2 });
        let parts = quadrant_split(&c, &l).unwrap();
        assert_eq!(parts.each_ref().map(|p| p.len()), [3, 4, 4, 4]);
        assert_eq!(parts[0].classes, 2);
        assert!(parts[0].samples.iter().all(|s| s.spectrum != vec![0.0, 1.0]));
    }

    #[test]
    fn dimension_mismatch() {
        let (c, _) = scene(4, 4, |_, _| 1);
        let l = LabelMap::new(4, 5, vec![1; 20]).unwrap();
        assert!(matches!(quadrant_split(&c, &l), Err(Error::Shape(_))));
    }

    fn toy(n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|i| Sample {
                spectrum: vec![i as f64],
                class: 1 + i % 2,
                domain: 1,
                latents: None,
            })
            .collect();
        DomainDataset::new(1, 2, 1, samples).unwrap()
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = make_batches(&toy(10), 4, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_batches(&toy(0), 4, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn batch_rows_match_samples() {
        let ds = toy(5);
        let b = ds.batch(&[3, 1]);
        assert_eq!(b.spectra.data(), &[3.0, 1.0]);
        assert_eq!(b.classes, vec![2, 2]);
    }

    #[test]
    fn validation_rejects_bad_labels() {
        let s = Sample {
            spectrum: vec![0.0],
            class: 3,
            domain: 1,
            latents: None,
        };
        assert!(matches!(DomainDataset::new(1, 2, 1, vec![s]), Err(Error::Data(_))));
    }
}
