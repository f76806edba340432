//! Central-difference checks of every differentiable primitive on random
//! shapes and values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::gradcheck::{grad_check, GradCheckReport};
use super::tape::{Tape, Var};
use crate::error::Result;

type Case = (&'static str, Vec<Array>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn rand_array<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized to shape")
}

/// `Σ out ⊙ weights` with fixed random weights, so every output
/// coordinate contributes a different amount.
fn weighted(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(rand_array(&mut rng, shape, -1.0, 1.0));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn cases<R: Rng>(rng: &mut R) -> Vec<Case> {
    let n = rng.random_range(1..4usize);
    let k = rng.random_range(2..5usize);
    let b = rng.random_range(3..7usize);
    let cin = rng.random_range(1..3usize);
    let cout = rng.random_range(1..3usize);
    let kw = [1usize, 3, 5][rng.random_range(0..3)];
    let m = rng.random_range(2..9usize);
    let c = rng.random_range(1..3usize);
    let ws: u64 = rng.random();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let rows: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..n)).collect();
    let eps: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let split = rng.random_range(1..k);
    let mut a = |shape: Vec<usize>| rand_array(rng, shape, -1.5, 1.5);
    let nk = || vec![n, k];
    vec![
        ("add", vec![a(nk()), a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.add(v[0], v[1])?;
            weighted(t, o, ws)
        })),
        ("sub", vec![a(nk()), a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.sub(v[0], v[1])?;
            weighted(t, o, ws)
        })),
        ("mul", vec![a(nk()), a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.mul(v[0], v[1])?;
            weighted(t, o, ws)
        })),
        ("scale_shift", vec![a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let s = t.scale(v[0], -1.7);
            let o = t.shift(s, 0.3);
            weighted(t, o, ws)
        })),
        ("exp", vec![a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.exp(v[0]);
            weighted(t, o, ws)
        })),
        ("ln", vec![rand_array(&mut ChaCha8Rng::seed_from_u64(ws), nk(), 0.2, 3.0)], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.ln(v[0])?;
            weighted(t, o, ws)
        })),
        ("relu", vec![a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.relu(v[0]);
            weighted(t, o, ws)
        })),
        ("sum_squares", vec![a(nk())], Box::new(|t: &mut Tape, v: &[Var]| t.sum_squares(v[0]))),
        ("reshape", vec![a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.reshape(v[0], vec![n * k])?;
            weighted(t, o, ws)
        })),
        ("slice_concat", vec![a(nk()), a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let l = t.slice_cols(v[0], 0, split)?;
            let r = t.slice_cols(v[1], split, k)?;
            let o = t.concat_cols(&[r, l, v[0]])?;
            weighted(t, o, ws)
        })),
        ("stack_rows", vec![a(vec![k]), a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.stack_rows(&[v[0], v[1], v[0]])?;
            weighted(t, o, ws)
        })),
        ("gather_rows", vec![a(nk())], {
            let rows = rows.clone();
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.gather_rows(v[0], &rows)?;
                weighted(t, o, ws)
            })
        }),
        ("mean_rows", vec![a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.mean_rows(v[0])?;
            weighted(t, o, ws)
        })),
        ("conv1d", vec![a(vec![n, cin, b]), a(vec![cout, cin, kw]), a(vec![cout])], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.conv1d(v[0], v[1], v[2])?;
            weighted(t, o, ws)
        })),
        ("affine", vec![a(nk()), a(vec![m, k]), a(vec![m])], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.affine(v[0], v[1], v[2])?;
            weighted(t, o, ws)
        })),
        ("softmax_cross_entropy", vec![a(nk())], {
            let targets = targets.clone();
            Box::new(move |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &targets))
        }),
        ("softmax_entropy", vec![a(nk())], Box::new(|t: &mut Tape, v: &[Var]| t.softmax_entropy(v[0]))),
        ("reparameterize", vec![a(nk()), a(nk())], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.reparameterize_with(v[0], v[1], eps.clone())?;
            weighted(t, o, ws)
        })),
        ("interp_linear", vec![a(vec![b])], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.interp_linear(v[0], m)?;
            weighted(t, o, ws)
        })),
        ("revise", vec![a(vec![n, b]), a(vec![c, b])], Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = t.revise(v[0], Some(v[1]))?;
            weighted(t, o, ws)
        })),
    ]
}

/// Every primitive on `configs` random configurations. Returns one report
/// per primitive and configuration, labeled `name#config`.
pub fn primitive_suite(configs: usize, seed: u64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for cfg in 0..configs {
        for (name, point, f) in cases(&mut rng) {
            out.push((format!("{name}#{cfg}"), grad_check(f, &point, tol)?));
        }
    }
    Ok(out)
}
