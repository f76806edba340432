//! Test-time revision: pseudo-labels route each batch through the class
//! branches, the batch's own contexts are stacked under every spectrum, and
//! the backbone decides. Parameters are never updated.

use crate::cribnet::{argmax_rows, CribModel, Noise, Route};
use crate::error::{Error, Result};
use crate::hsidata::{batches_in_order, DomainDataset};
use crate::numcore::{Array, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// 1-based predicted classes.
    pub classes: Vec<usize>,
    /// 1-based pseudo-labels used for routing (all 1 without a pseudo classifier).
    pub pseudo: Vec<usize>,
    /// `[N, C]` backbone logits.
    pub logits: Array,
}

/// Predicts one batch of `[N, B]` spectra; latents are taken at their means.
pub fn predict_batch(model: &CribModel, spectra: &Array) -> Result<Prediction> {
    match *spectra.shape() {
        [_, b] if b == model.dims().bands => {}
        ref s => {
            return Err(Error::Shape(format!(
                "expected [N, {}] spectra, got {s:?}",
                model.dims().bands
            )))
        }
    }
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, spectra, Route::Pseudo, &mut Noise::Mean)?;
    let logits = tape.value(fwd.logits).clone();
    Ok(Prediction {
        classes: argmax_rows(&logits).into_iter().map(|k| k + 1).collect(),
        pseudo: fwd.routing,
        logits,
    })
}

/// Predicts a dataset in order, `batch_size` samples at a time.
pub fn predict_dataset(model: &CribModel, dataset: &DomainDataset, batch_size: usize) -> Result<Vec<usize>> {
    if dataset.bands != model.dims().bands {
        return Err(Error::Shape(format!(
            "dataset has {} bands, model expects {}",
            dataset.bands,
            model.dims().bands
        )));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for batch in batches_in_order(dataset, batch_size)? {
        out.extend(predict_batch(model, &batch.spectra)?.classes);
    }
    Ok(out)
}

/// Fraction of matching labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}
