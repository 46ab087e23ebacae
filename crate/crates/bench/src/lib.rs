//! Fixed, seeded inputs for the benchmarks under benches/.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zj_core::zoo::{build_model, Activation, Init, Model, ModelSpec, VitSpec};
use zj_core::Tensor;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn mlp(widths: &[usize], seed: u64) -> Model {
    let spec = ModelSpec::mlp(widths, Activation::Relu).unwrap();
    let params = build_model(&spec, Init::Seeded(seed)).unwrap();
    Model::plain(spec, params)
}

pub fn vit(seed: u64) -> Model {
    let spec = ModelSpec::vit(VitSpec { in_dim: 8, dim: 32, blocks: 2, heads: 4, mlp_dim: 64, classes: 10, seq_len: 16 }).unwrap();
    let params = build_model(&spec, Init::Seeded(seed)).unwrap();
    Model::plain(spec, params)
}
