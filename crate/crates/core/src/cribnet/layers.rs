use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::{Array, ParamId, ParamStore, Tape, Var};

pub const KERNEL_WIDTH: usize = 3;
pub const CONV_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers followed by a rectifier.
    He,
    /// `N(0, 1 / fan_in)`, for output layers.
    Lecun,
    Zero,
}

fn init_array<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut R) -> Array {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Lecun => (1.0 / fan_in as f64).sqrt(),
        Init::Zero => 0.0,
    };
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| normal.sample(rng)).collect()
    };
    Array::new(shape, data).expect("shape and data agree")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_array(vec![outputs, inputs], inputs, init, rng))?;
        let bias = store.add(format!("{name}.bias"), Array::zeros(vec![outputs]))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }
}

/// Affine layers with rectifiers between them (none after the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last } else { Init::He };
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], init, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Same-padded width-3 convolutions, each followed by a rectifier, then
/// flattened to `[N, channels · B]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvStack {
    pub layers: Vec<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = cin * KERNEL_WIDTH;
            let k = store.add(
                format!("{name}.{i}.kernels"),
                init_array(vec![cout, cin, KERNEL_WIDTH], fan_in, Init::He, rng),
            )?;
            let b = store.add(format!("{name}.{i}.bias"), Array::zeros(vec![cout]))?;
            layers.push((k, b));
            cin = cout;
        }
        Ok(Self {
            layers,
            in_channels,
            out_channels: cin,
        })
    }

    /// `x` is `[N, C_in, B]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for &(k, b) in &self.layers {
            let kv = tape.param(store, k);
            let bv = tape.param(store, b);
            let c = tape.conv1d(h, kv, bv)?;
            h = tape.relu(c);
        }
        let (n, c, len) = match *tape.shape(h) {
            [n, c, l] => (n, c, l),
            _ => unreachable!("conv output is rank 3"),
        };
        tape.reshape(h, vec![n, c * len])
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(k, b)| [k, b])
    }
}
