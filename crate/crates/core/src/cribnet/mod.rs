//! CRIB model: a variational encoder splitting each spectrum into a domain
//! latent `z_d` and a mixed latent `z_m`, per-class branch pairs mapping
//! `z_m` to the class-independent latent `z_s` and back, a decoder, a domain
//! head, a pseudo classifier that routes unlabeled samples, and a backbone
//! that classifies each spectrum stacked with the batch's class contexts.

mod file;
mod layers;

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use file::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{ConvStack, Init, Linear, Mlp, CONV_CHANNELS, KERNEL_WIDTH};

use crate::error::{Error, Result};
use crate::numcore::{Array, ParamId, ParamStore, Tape, Var};

/// Width of each of `z_d`, `z_m` and `z_s`.
pub const LATENT: usize = 4;

/// How the backbone's extra input channels are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextMode {
    /// Backbone on raw spectra only.
    #[serde(rename = "erm")]
    Erm,
    /// One shallow convolution averaged over the batch.
    #[serde(rename = "light1")]
    Light1,
    /// One VAE and one branch pair shared by every class.
    #[serde(rename = "vae1")]
    Vae1,
    /// An independent VAE and branch pair per class.
    #[serde(rename = "vaeC")]
    VaeC,
    /// Shared VAE, one branch pair per class.
    #[serde(rename = "crib")]
    Crib,
}

impl ContextMode {
    pub const ALL: [ContextMode; 5] = [Self::Erm, Self::Light1, Self::Vae1, Self::VaeC, Self::Crib];

    pub fn name(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Light1 => "light1",
            Self::Vae1 => "vae1",
            Self::VaeC => "vaeC",
            Self::Crib => "crib",
        }
    }

    fn code(self) -> u32 {
        match self {
            Self::Erm => 0,
            Self::Light1 => 1,
            Self::Vae1 => 2,
            Self::VaeC => 3,
            Self::Crib => 4,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    /// Whether samples are routed to class branches.
    pub fn routes_by_class(self) -> bool {
        matches!(self, Self::VaeC | Self::Crib)
    }

    pub fn has_vae(self) -> bool {
        matches!(self, Self::Vae1 | Self::VaeC | Self::Crib)
    }

    /// Number of context rows stacked under each spectrum.
    pub fn context_rows(self, classes: usize) -> usize {
        match self {
            Self::Erm => 0,
            Self::Light1 | Self::Vae1 => 1,
            Self::VaeC | Self::Crib => classes,
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown context mode {s:?} (erm|light1|vae1|vaeC|crib)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub bands: usize,
    pub classes: usize,
    /// Number of training domains seen by the domain head.
    pub domains: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        if self.bands < 2 || self.classes == 0 || self.domains == 0 {
            return Err(Error::Contract(format!(
                "model needs B >= 2, C >= 1, D >= 1; got B={} C={} D={}",
                self.bands, self.classes, self.domains
            )));
        }
        Ok(())
    }
}

/// Encoder, decoder and domain head of one variational autoencoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vae {
    pub encoder: ConvStack,
    pub mu: Linear,
    pub logvar: Linear,
    pub decoder: Mlp,
    pub domain_head: Mlp,
}

/// Forward net `z_m → z_s` and inverse net `z_s → z_m` of one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPair {
    pub forward: Mlp,
    pub inverse: Mlp,
}

/// Convolutional classifier over the revised `(1 + K)`-channel input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub convs: ConvStack,
    pub head: Mlp,
}

impl Backbone {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        bands: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let convs = ConvStack::new(store, "backbone.conv", in_channels, &[CONV_CHANNELS; 3], rng)?;
        let head = Mlp::new(store, "backbone.fc", &[CONV_CHANNELS * bands, 32, classes], Init::Lecun, rng)?;
        Ok(Self { convs, head })
    }

    /// `revised` is `[N, 1 + K, B]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, revised: Var) -> Result<Var> {
        let h = self.convs.forward(tape, store, revised)?;
        self.head.forward(tape, store, h)
    }
}

/// Where the reparameterization noise comes from.
pub enum Noise<'a> {
    /// `z = mu`.
    Mean,
    Sample(&'a mut dyn RngCore),
}

/// Which labels select the branch of each sample.
#[derive(Clone, Copy, Debug)]
pub enum Route<'a> {
    /// 1-based labels, one per row.
    Labels(&'a [usize]),
    /// Argmax of the pseudo classifier.
    Pseudo,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub z_d: Var,
    pub z_m: Var,
}

/// Batch contexts: `contexts` is `[K, B]` (absent in ERM mode).
#[derive(Clone, Debug)]
pub struct ContextSet {
    pub contexts: Option<Var>,
    /// Per context row: whether any sample fed it.
    pub present: Vec<bool>,
}

/// Samples of one batch that share a VAE and a branch.
#[derive(Clone, Debug)]
pub struct GroupForward {
    /// 1-based class for class-routed modes, `None` for the shared branch.
    pub class: Option<usize>,
    pub vae: usize,
    pub branch: usize,
    /// Batch rows, ascending.
    pub rows: Vec<usize>,
    pub x: Var,
    pub enc: Encoded,
    pub z_s: Var,
}

/// Everything a loss or a prediction needs from one batch.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `[N, B]`.
    pub x: Var,
    pub pseudo_logits: Option<Var>,
    /// 1-based label that routed each row.
    pub routing: Vec<usize>,
    pub groups: Vec<GroupForward>,
    pub contexts: ContextSet,
    /// `[N, C]` backbone logits.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CribModel {
    dims: ModelDims,
    mode: ContextMode,
    store: ParamStore,
    backbone: Backbone,
    pseudo: Option<Mlp>,
    light: Option<(ParamId, ParamId)>,
    vaes: Vec<Vae>,
    branches: Vec<BranchPair>,
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Stream of the backbone initializer; a plain backbone built from
/// `stream(seed, BACKBONE_STREAM)` matches an ERM model of that seed.
pub const BACKBONE_STREAM: u64 = 0;

pub fn backbone_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, BACKBONE_STREAM)
}

impl CribModel {
    pub fn new(dims: ModelDims, mode: ContextMode, seed: u64) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            bands: b,
            classes: c,
            domains: d,
        } = dims;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, 1 + mode.context_rows(c), b, c, &mut stream(seed, BACKBONE_STREAM))?;
        let pseudo = if mode.routes_by_class() {
            Some(Mlp::new(&mut store, "pseudo", &[b, 64, 32, c], Init::Lecun, &mut stream(seed, 1))?)
        } else {
            None
        };
        let light = if mode == ContextMode::Light1 {
            let mut rng = stream(seed, 2);
            let conv = ConvStack::new(&mut store, "light", 1, &[1], &mut rng)?;
            Some(conv.layers[0])
        } else {
            None
        };
        let (n_vae, n_branch) = match mode {
            ContextMode::Erm | ContextMode::Light1 => (0, 0),
            ContextMode::Vae1 => (1, 1),
            ContextMode::VaeC => (c, c),
            ContextMode::Crib => (1, c),
        };
        let mut vaes = Vec::with_capacity(n_vae);
        for k in 0..n_vae {
            let rng = &mut stream(seed, 10 + k as u64);
            let p = format!("vae{k}");
            let encoder = ConvStack::new(&mut store, &format!("{p}.enc"), 1, &[CONV_CHANNELS; 3], rng)?;
            let flat = CONV_CHANNELS * b;
            let mu = Linear::new(&mut store, &format!("{p}.mu"), flat, 2 * LATENT, Init::Lecun, rng)?;
            let logvar = Linear::new(&mut store, &format!("{p}.logvar"), flat, 2 * LATENT, Init::Zero, rng)?;
            let decoder = Mlp::new(&mut store, &format!("{p}.dec"), &[2 * LATENT, 64, b], Init::Lecun, rng)?;
            let domain_head = Mlp::new(&mut store, &format!("{p}.dom"), &[2 * LATENT, 32, d], Init::Zero, rng)?;
            vaes.push(Vae {
                encoder,
                mu,
                logvar,
                decoder,
                domain_head,
            });
        }
        let mut branches = Vec::with_capacity(n_branch);
        for k in 0..n_branch {
            let rng = &mut stream(seed, 1000 + k as u64);
            let forward = Mlp::new(&mut store, &format!("branch{k}.fwd"), &[LATENT, 16, LATENT], Init::Lecun, rng)?;
            let inverse = Mlp::new(&mut store, &format!("branch{k}.inv"), &[LATENT, 16, LATENT], Init::Lecun, rng)?;
            branches.push(BranchPair { forward, inverse });
        }
        Ok(Self {
            dims,
            mode,
            store,
            backbone,
            pseudo,
            light,
            vaes,
            branches,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn mode(&self) -> ContextMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn vaes(&self) -> &[Vae] {
        &self.vaes
    }

    pub fn branches(&self) -> &[BranchPair] {
        &self.branches
    }

    pub fn pseudo(&self) -> Option<&Mlp> {
        self.pseudo.as_ref()
    }

    fn check_bands(&self, tape: &Tape, x: Var) -> Result<usize> {
        match *tape.shape(x) {
            [n, b] if b == self.dims.bands => Ok(n),
            ref s => Err(Error::shape(format!(
                "expected [N, {}] spectra, got {s:?}",
                self.dims.bands
            ))),
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class == 0 || class > self.dims.classes {
            return Err(Error::Index(format!("class {class} outside 1..={}", self.dims.classes)));
        }
        Ok(())
    }

    fn vae(&self, index: usize) -> Result<&Vae> {
        self.vaes
            .get(index)
            .ok_or_else(|| Error::Contract(format!("{} mode has no VAE {index}", self.mode)))
    }

    /// VAE and branch indices serving a class.
    pub fn route(&self, class: usize) -> Result<(usize, usize)> {
        self.check_class(class)?;
        match self.mode {
            ContextMode::Crib => Ok((0, class - 1)),
            ContextMode::VaeC => Ok((class - 1, class - 1)),
            ContextMode::Vae1 => Ok((0, 0)),
            m => Err(Error::Contract(format!("{m} mode has no branches"))),
        }
    }

    /// Encodes `[N, B]` spectra with VAE `vae`: `z = [z_d, z_m]`.
    pub fn encode(&self, tape: &mut Tape, x: Var, vae: usize, noise: &mut Noise<'_>) -> Result<Encoded> {
        let n = self.check_bands(tape, x)?;
        let v = self.vae(vae)?;
        let signal = tape.reshape(x, vec![n, 1, self.dims.bands])?;
        let h = v.encoder.forward(tape, &self.store, signal)?;
        let mu = v.mu.forward(tape, &self.store, h)?;
        let logvar = v.logvar.forward(tape, &self.store, h)?;
        let z = match noise {
            Noise::Mean => mu,
            Noise::Sample(rng) => tape.reparameterize(mu, logvar, &mut **rng)?,
        };
        let z_d = tape.slice_cols(z, 0, LATENT)?;
        let z_m = tape.slice_cols(z, LATENT, 2 * LATENT)?;
        Ok(Encoded {
            mu,
            logvar,
            z,
            z_d,
            z_m,
        })
    }

    /// `ẑ_s = f̂_c(z_m)`.
    pub fn branch_forward(&self, tape: &mut Tape, class: usize, z_m: Var) -> Result<Var> {
        let (_, b) = self.route(class)?;
        self.branches[b].forward.forward(tape, &self.store, z_m)
    }

    /// `f̂_c⁻¹(v)`.
    pub fn branch_inverse(&self, tape: &mut Tape, class: usize, v: Var) -> Result<Var> {
        let (_, b) = self.route(class)?;
        self.branches[b].inverse.forward(tape, &self.store, v)
    }

    /// Decoder output for `z = [z_d, z_m]`.
    pub fn reconstruct(&self, tape: &mut Tape, vae: usize, z_d: Var, z_m: Var) -> Result<Var> {
        let z = tape.concat_cols(&[z_d, z_m])?;
        self.vae(vae)?.decoder.forward(tape, &self.store, z)
    }

    pub fn domain_logits(&self, tape: &mut Tape, vae: usize, z_d: Var, z_s: Var) -> Result<Var> {
        let z = tape.concat_cols(&[z_d, z_s])?;
        self.vae(vae)?.domain_head.forward(tape, &self.store, z)
    }

    pub fn pseudo_logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_bands(tape, x)?;
        let mlp = self
            .pseudo
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} mode has no pseudo classifier", self.mode)))?;
        mlp.forward(tape, &self.store, x)
    }

    /// Backbone logits for `[N, B]` spectra revised with `contexts`.
    pub fn revise_and_classify(&self, tape: &mut Tape, x: Var, contexts: &ContextSet) -> Result<Var> {
        self.check_bands(tape, x)?;
        let want = self.mode.context_rows(self.dims.classes);
        let got = contexts.contexts.map_or(0, |c| tape.shape(c)[0]);
        if got != want {
            return Err(Error::shape(format!(
                "{} mode takes {want} context rows, got {got}",
                self.mode
            )));
        }
        let revised = tape.revise(x, contexts.contexts)?;
        self.backbone.forward(tape, &self.store, revised)
    }

    /// Batch-mean output of the shallow context convolution.
    fn light_context(&self, tape: &mut Tape, x: Var) -> Result<ContextSet> {
        let (k, b) = self.light.expect("light1 mode");
        let n = self.check_bands(tape, x)?;
        let signal = tape.reshape(x, vec![n, 1, self.dims.bands])?;
        let kv = tape.param(&self.store, k);
        let bv = tape.param(&self.store, b);
        let c = tape.conv1d(signal, kv, bv)?;
        let h = tape.relu(c);
        let flat = tape.reshape(h, vec![n, self.dims.bands])?;
        let mean = tape.mean_rows(flat)?;
        let ctx = tape.reshape(mean, vec![1, self.dims.bands])?;
        Ok(ContextSet {
            contexts: Some(ctx),
            present: vec![true],
        })
    }

    /// Full forward pass over a batch.
    pub fn forward(&self, tape: &mut Tape, spectra: &Array, route: Route<'_>, noise: &mut Noise<'_>) -> Result<BatchForward> {
        let x = tape.constant(spectra.clone());
        let n = self.check_bands(tape, x)?;
        let pseudo_logits = match self.pseudo {
            Some(_) => Some(self.pseudo_logits(tape, x)?),
            None => None,
        };
        let routing = match route {
            Route::Labels(labels) => {
                if labels.len() != n {
                    return Err(Error::shape(format!("{} labels for {n} spectra", labels.len())));
                }
                for &l in labels {
                    self.check_class(l)?;
                }
                labels.to_vec()
            }
            Route::Pseudo => match pseudo_logits {
                Some(p) => argmax_rows(tape.value(p)).into_iter().map(|k| k + 1).collect(),
                None => vec![1; n],
            },
        };

        let mut groups = Vec::new();
        if self.mode.has_vae() {
            let plan: Vec<(Option<usize>, Vec<usize>)> = if self.mode.routes_by_class() {
                (1..=self.dims.classes)
                    .map(|c| (Some(c), (0..n).filter(|&i| routing[i] == c).collect::<Vec<_>>()))
                    .filter(|(_, rows)| !rows.is_empty())
                    .collect()
            } else {
                vec![(None, (0..n).collect())]
            };
            for (class, rows) in plan {
                let (vae, branch) = self.route(class.unwrap_or(1))?;
                let xg = if rows.len() == n { x } else { tape.gather_rows(x, &rows)? };
                let enc = self.encode(tape, xg, vae, noise)?;
                let z_s = self.branches[branch].forward.forward(tape, &self.store, enc.z_m)?;
                groups.push(GroupForward {
                    class,
                    vae,
                    branch,
                    rows,
                    x: xg,
                    enc,
                    z_s,
                });
            }
        }

        let contexts = match self.mode {
            ContextMode::Erm => ContextSet {
                contexts: None,
                present: Vec::new(),
            },
            ContextMode::Light1 => self.light_context(tape, x)?,
            ContextMode::Vae1 => {
                let g = &groups[0];
                class_context(tape, g.z_s, &vec![1; g.rows.len()], 1, self.dims.bands)?
            }
            ContextMode::VaeC | ContextMode::Crib => {
                let parts: Vec<Var> = groups.iter().map(|g| g.z_s).collect();
                let all = tape.stack_rows(&parts)?;
                let labels: Vec<usize> = groups
                    .iter()
                    .flat_map(|g| std::iter::repeat(g.class.expect("routed")).take(g.rows.len()))
                    .collect();
                class_context(tape, all, &labels, self.dims.classes, self.dims.bands)?
            }
        };
        let logits = self.revise_and_classify(tape, x, &contexts)?;
        Ok(BatchForward {
            x,
            pseudo_logits,
            routing,
            groups,
            contexts,
            logits,
        })
    }
}

/// Per-class contexts: the mean `z_s` of the rows routed to each class,
/// resampled to `bands`; classes with no rows get zeros.
pub fn class_context(tape: &mut Tape, z_s: Var, labels: &[usize], classes: usize, bands: usize) -> Result<ContextSet> {
    let n = match *tape.shape(z_s) {
        [n, _] => n,
        ref s => return Err(Error::shape(format!("z_s must be [N, k], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} routing labels for {n} latents", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
        return Err(Error::Index(format!("routing label {bad} outside 1..={classes}")));
    }
    let mut rows = Vec::with_capacity(classes);
    let mut present = Vec::with_capacity(classes);
    for c in 1..=classes {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            rows.push(tape.constant(Array::zeros(vec![bands])));
            present.push(false);
            continue;
        }
        let g = if idx.len() == n { z_s } else { tape.gather_rows(z_s, &idx)? };
        let mean = tape.mean_rows(g)?;
        rows.push(tape.interp_linear(mean, bands)?);
        present.push(true);
    }
    let contexts = tape.stack_rows(&rows)?;
    Ok(ContextSet {
        contexts: Some(contexts),
        present,
    })
}

/// Row-wise argmax of a `[N, K]` (or `[K]`) array; ties go to the lowest index.
pub fn argmax_rows(a: &Array) -> Vec<usize> {
    let k = *a.shape().last().expect("non-empty shape");
    a.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
