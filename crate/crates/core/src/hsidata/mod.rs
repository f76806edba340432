//! Hyperspectral cubes, label maps, domain datasets and the synthetic
//! generator.

mod cube;
mod dataset;
mod synth;

pub use cube::{
    read_cube, read_labels, write_cube, write_labels, HsiCube, LabelMap, CUBE_HEADER_LEN, CUBE_MAGIC,
    FORMAT_VERSION, LABEL_HEADER_LEN, LABEL_MAGIC,
};
pub use dataset::{batches_in_order, make_batches, quadrant_split, Batch, DomainDataset, Sample, TrueLatents};
pub use synth::{
    bayes_oracle, synth_generate, to_scene, Bump, Cell, Collision, OracleAccuracy, SynthConfig, SynthData, SynthWorld,
    LATENT_DIM,
};
