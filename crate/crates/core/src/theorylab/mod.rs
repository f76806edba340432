//! Empirical checks of the method's theory: gradient agreement on the
//! domain head, the Monte-Carlo entropy estimator, the Fisher machinery of
//! the risk bound, and linear disentanglement probes.

mod disentangle;
mod entropy;
mod fisher;
mod theorem1;

pub use disentangle::{disentangle_probe, encode_dataset, ols_r2, one_hot, DisentangleReport, OlsFit};
pub use entropy::{entropy_estimator_check, entropy_mc, entropy_plugin, EntropyReport, McEstimate, REFERENCE_DRAWS};
pub use fisher::{
    bound_probe, bound_slack, dataset_risk, fisher_diag, fisher_from_scores, sample_ellipsoid, score_gradients,
    BoundProbeConfig, BoundProbeReport, FISHER_RIDGE,
};
pub use theorem1::{
    domain_head_params, theorem1_batch_check, theorem1_closed_form, theorem1_inner_product, theorem1_one_layer,
    true_domain_confidence, BatchCheck, DomainConfidence, InnerProductReport, TensorProduct,
};
