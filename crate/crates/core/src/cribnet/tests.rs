use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::grad_check_params;

fn dims(bands: usize, classes: usize, domains: usize) -> ModelDims {
    ModelDims {
        bands,
        classes,
        domains,
    }
}

fn spectra(n: usize, bands: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * bands).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
    Array::new(vec![n, bands], data).unwrap()
}

fn zero_param(model: &mut CribModel, name: &str) {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no {name}"));
    model.params_mut().get_mut(id).data_mut().fill(0.0);
}

#[test]
fn encode_shapes_for_48_bands() {
    let model = CribModel::new(dims(48, 2, 4), ContextMode::Crib, 0).unwrap();
    let mut t = Tape::new();
    let x = t.constant(spectra(3, 48, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = model.encode(&mut t, x, 0, &mut Noise::Sample(&mut rng)).unwrap();
    assert_eq!(t.shape(e.mu), &[3, 8]);
    assert_eq!(t.shape(e.logvar), &[3, 8]);
    assert_eq!(t.shape(e.z_d), &[3, 4]);
    assert_eq!(t.shape(e.z_m), &[3, 4]);
    assert_eq!(t.value(e.z_d).row(1), &t.value(e.z).row(1)[..4]);
}

#[test]
fn encode_rejects_band_mismatch() {
    let model = CribModel::new(dims(48, 2, 4), ContextMode::Crib, 0).unwrap();
    let mut t = Tape::new();
    let x = t.constant(spectra(2, 47, 1));
    assert!(matches!(model.encode(&mut t, x, 0, &mut Noise::Mean), Err(Error::Shape(_))));
}

#[test]
fn vanishing_variance_returns_the_mean() {
    let mut model = CribModel::new(dims(8, 2, 2), ContextMode::Crib, 0).unwrap();
    let id = model.params().find("vae0.logvar.bias").unwrap();
    model.params_mut().get_mut(id).data_mut().fill(-2000.0);
    let mut t = Tape::new();
    let x = t.constant(spectra(4, 8, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = model.encode(&mut t, x, 0, &mut Noise::Sample(&mut rng)).unwrap();
    assert_eq!(t.value(e.z), t.value(e.mu));
}

#[test]
fn encoding_is_deterministic_per_seed() {
    let model = CribModel::new(dims(8, 2, 2), ContextMode::Crib, 0).unwrap();
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(spectra(4, 8, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = model.encode(&mut t, x, 0, &mut Noise::Sample(&mut rng)).unwrap();
        t.value(e.z).clone()
    };
    assert_eq!(run(), run());
    assert_eq!(
        CribModel::new(dims(8, 2, 2), ContextMode::Crib, 0).unwrap(),
        CribModel::new(dims(8, 2, 2), ContextMode::Crib, 0).unwrap()
    );
}

#[test]
fn structure_per_mode() {
    let d = dims(10, 3, 4);
    let counts: Vec<(usize, usize, bool)> = ContextMode::ALL
        .iter()
        .map(|&m| {
            let model = CribModel::new(d, m, 0).unwrap();
            (model.vaes().len(), model.branches().len(), model.pseudo().is_some())
        })
        .collect();
    assert_eq!(counts, vec![(0, 0, false), (0, 0, false), (1, 1, false), (3, 3, true), (1, 3, true)]);
    for m in ContextMode::ALL {
        let model = CribModel::new(d, m, 0).unwrap();
        let k = model.params().get(model.backbone().convs.layers[0].0).shape()[1];
        assert_eq!(k, 1 + m.context_rows(3), "{m}");
        assert_eq!(m.name().parse::<ContextMode>().unwrap(), m);
    }
    assert!(matches!("ERM".parse::<ContextMode>(), Err(Error::Config(_))));
}

#[test]
fn branch_index_errors() {
    let model = CribModel::new(dims(6, 2, 2), ContextMode::Crib, 0).unwrap();
    let mut t = Tape::new();
    let z = t.constant(Array::zeros(vec![1, 4]));
    assert!(matches!(model.branch_forward(&mut t, 0, z), Err(Error::Index(_))));
    assert!(matches!(model.branch_inverse(&mut t, 3, z), Err(Error::Index(_))));
    assert!(model.branch_forward(&mut t, 2, z).is_ok());
}

#[test]
fn zero_final_layer_gives_zero_branch_output() {
    let mut model = CribModel::new(dims(6, 2, 2), ContextMode::Crib, 0).unwrap();
    zero_param(&mut model, "branch1.fwd.1.weight");
    let mut t = Tape::new();
    let z = t.constant(Array::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap());
    let out = model.branch_forward(&mut t, 2, z).unwrap();
    assert_eq!(t.value(out).data(), &[0.0; 4]);
}

#[test]
fn routing_touches_only_the_routed_branches() {
    let model = CribModel::new(dims(6, 3, 2), ContextMode::Crib, 0).unwrap();
    let x = spectra(2, 6, 3);
    let mut t = Tape::new();
    let fwd = model.forward(&mut t, &x, Route::Labels(&[1, 3]), &mut Noise::Mean).unwrap();
    let loss = t.softmax_cross_entropy(fwd.logits, &[0, 2]).unwrap();
    let grads = t.backward(loss).unwrap().param_grads(model.params());
    for (id, p) in model.params().iter() {
        let touched = grads[id.index()].as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0));
        if p.name.starts_with("branch1.") {
            assert!(!touched, "{} received gradient", p.name);
        }
        if p.name.starts_with("branch0.fwd") || p.name.starts_with("branch2.fwd") {
            assert!(grads[id.index()].is_some(), "{} missing gradient", p.name);
        }
    }
}

#[test]
fn decoder_with_bias_only_returns_the_bias() {
    let mut model = CribModel::new(dims(5, 2, 2), ContextMode::Crib, 0).unwrap();
    zero_param(&mut model, "vae0.dec.1.weight");
    let id = model.params().find("vae0.dec.1.bias").unwrap();
    let s = [0.1, 0.2, 0.3, 0.4, 0.5];
    model.params_mut().get_mut(id).data_mut().copy_from_slice(&s);
    let mut t = Tape::new();
    let zd = t.constant(Array::matrix(2, 4, vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 7.0, -1.0]).unwrap());
    let zm = t.constant(Array::matrix(2, 4, vec![0.2; 8]).unwrap());
    let out = model.reconstruct(&mut t, 0, zd, zm).unwrap();
    assert_eq!(t.shape(out), &[2, 5]);
    assert_eq!(t.value(out).row(0), &s);
    assert_eq!(t.value(out).row(1), &s);
}

#[test]
fn decoder_gradient_passes_check() {
    let model = CribModel::new(dims(5, 2, 2), ContextMode::Crib, 7).unwrap();
    let x = spectra(3, 5, 8);
    let r = grad_check_params(
        &model,
        CribModel::params_mut,
        |m, t| {
            let zd = t.constant(Array::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?);
            let zm = t.constant(Array::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.91).cos()).collect())?);
            let target = t.constant(x.clone());
            let g = m.reconstruct(t, 0, zd, zm)?;
            let d = t.sub(g, target)?;
            t.sum_squares(d)
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > 0);
}

#[test]
fn zero_domain_head_is_uniform() {
    let model = CribModel::new(dims(5, 2, 4), ContextMode::Crib, 0).unwrap();
    let mut t = Tape::new();
    let z = t.constant(Array::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let logits = model.domain_logits(&mut t, 0, z, z).unwrap();
    assert_eq!(t.shape(logits), &[1, 4]);
    let h = t.softmax_entropy(logits).unwrap();
    assert!((t.scalar(h) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn pseudo_classifier_has_three_layers_and_breaks_ties_low() {
    let mut model = CribModel::new(dims(5, 3, 2), ContextMode::Crib, 0).unwrap();
    assert_eq!(model.pseudo().unwrap().layers.len(), 3);
    zero_param(&mut model, "pseudo.2.weight");
    let mut t = Tape::new();
    let fwd = model.forward(&mut t, &spectra(4, 5, 1), Route::Pseudo, &mut Noise::Mean).unwrap();
    assert_eq!(fwd.routing, vec![1; 4]);
    assert_eq!(argmax_rows(&Array::matrix(2, 3, vec![0.0, 2.0, 2.0, 5.0, 1.0, 5.0]).unwrap()), vec![1, 0]);
}

#[test]
fn class_context_means_and_absences() {
    let mut t = Tape::new();
    let z = t.constant(Array::matrix(3, 4, vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 5.0, 5.0, 5.0, 5.0]).unwrap());
    let ctx = class_context(&mut t, z, &[1, 1, 2], 2, 4).unwrap();
    let c = t.value(ctx.contexts.unwrap()).clone();
    assert_eq!(c.row(0), &[2.0; 4]);
    assert_eq!(c.row(1), &[5.0; 4]);
    assert_eq!(ctx.present, vec![true, true]);

    let ctx = class_context(&mut t, z, &[1, 1, 1], 3, 48).unwrap();
    let c = t.value(ctx.contexts.unwrap()).clone();
    assert_eq!(c.shape(), &[3, 48]);
    assert_eq!(c.row(1), &[0.0; 48]);
    assert_eq!(ctx.present, vec![true, false, false]);
    assert!(matches!(class_context(&mut t, z, &[1, 4, 1], 3, 48), Err(Error::Index(_))));
}

#[test]
fn context_gradient_reaches_branches() {
    let mut t = Tape::new();
    let model = CribModel::new(dims(6, 2, 2), ContextMode::Crib, 1).unwrap();
    let fwd = model.forward(&mut t, &spectra(4, 6, 2), Route::Labels(&[1, 2, 2, 1]), &mut Noise::Mean).unwrap();
    let ctx = fwd.contexts.contexts.unwrap();
    let s = t.sum_squares(ctx).unwrap();
    let grads = t.backward(s).unwrap().param_grads(model.params());
    let id = model.params().find("branch0.fwd.0.weight").unwrap();
    assert!(grads[id.index()].as_ref().unwrap().iter().any(|&g| g != 0.0));
    let enc = model.params().find("vae0.enc.0.kernels").unwrap();
    assert!(grads[enc.index()].is_some());
}

#[test]
fn revised_input_has_c_plus_one_channels() {
    let model = CribModel::new(dims(4, 2, 2), ContextMode::Crib, 0).unwrap();
    let mut t = Tape::new();
    let x = t.constant(spectra(1, 4, 0));
    let z = t.constant(Array::matrix(1, 4, vec![0.5; 4]).unwrap());
    let ctx = class_context(&mut t, z, &[2], 2, 4).unwrap();
    let revised = t.revise(x, ctx.contexts).unwrap();
    assert_eq!(t.shape(revised), &[1, 3, 4]);
    let logits = model.revise_and_classify(&mut t, x, &ctx).unwrap();
    assert_eq!(t.shape(logits), &[1, 2]);
    let erm = CribModel::new(dims(4, 2, 2), ContextMode::Erm, 0).unwrap();
    assert!(matches!(erm.revise_and_classify(&mut t, x, &ctx), Err(Error::Shape(_))));
}

#[test]
fn erm_mode_matches_a_plain_backbone() {
    let d = dims(7, 3, 2);
    let model = CribModel::new(d, ContextMode::Erm, 11).unwrap();
    let mut store = ParamStore::new();
    let plain = Backbone::new(&mut store, 1, 7, 3, &mut backbone_rng(11)).unwrap();
    assert_eq!(&store, model.params());
    let x = spectra(5, 7, 4);
    let mut t = Tape::new();
    let fwd = model.forward(&mut t, &x, Route::Pseudo, &mut Noise::Mean).unwrap();
    let mut t2 = Tape::new();
    let xv = t2.constant(x.clone());
    let input = t2.reshape(xv, vec![5, 1, 7]).unwrap();
    let logits = plain.forward(&mut t2, &store, input).unwrap();
    assert_eq!(t.value(fwd.logits), t2.value(logits));
}

#[test]
fn every_mode_runs_on_small_shapes() {
    for m in ContextMode::ALL {
        for (b, c, d) in [(2, 1, 1), (3, 2, 3), (9, 4, 2)] {
            let model = CribModel::new(dims(b, c, d), m, 3).unwrap();
            let labels: Vec<usize> = (0..5).map(|i| 1 + i % c).collect();
            let mut t = Tape::new();
            let fwd = model.forward(&mut t, &spectra(5, b, 1), Route::Labels(&labels), &mut Noise::Mean).unwrap();
            assert_eq!(t.shape(fwd.logits), &[5, c]);
        }
    }
}

#[test]
fn model_file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    for m in ContextMode::ALL {
        let model = CribModel::new(dims(6, 2, 3), m, 9).unwrap();
        let path = dir.path().join(format!("{m}.c3dg"));
        write_model(&model, &path).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn model_file_errors() {
    let bytes = CribModel::new(dims(6, 2, 3), ContextMode::Crib, 9).unwrap().to_bytes();
    assert!(matches!(CribModel::from_bytes(b"HSIC\x01\0\0\0"), Err(Error::Format { offset: 0, .. })));
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(CribModel::from_bytes(&v), Err(Error::Format { offset: 4, .. })));
    match CribModel::from_bytes(&bytes[..bytes.len() - 3]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
        other => panic!("{other:?}"),
    }
    let mut v = bytes.clone();
    v.push(0);
    assert!(matches!(CribModel::from_bytes(&v), Err(Error::Format { .. })));
}
