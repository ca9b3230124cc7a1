//! Shared inputs for the benchmarks in `benches/`.

use candle_core::{DType, Device, Tensor};
use maskface_core::nn::VarStore;
use maskface_core::toy::toy_corpus;
use maskface_core::{Generator, NetSpec, Sample};

/// Deterministic toy samples at `resolution`.
pub fn samples(count: usize, resolution: usize) -> Vec<Sample> {
    toy_corpus(0, count, resolution).into_iter().map(|f| f.sample).collect()
}

/// A freshly initialised toy generator.
pub fn toy_generator() -> Generator {
    let mut store = VarStore::new(0, DType::F32, &Device::Cpu);
    Generator::new(&mut store, &NetSpec::toy(6)).expect("toy generator builds")
}

/// Uniform noise in `[-1, 1]` of the given shape.
pub fn noise(shape: &[usize]) -> Tensor {
    Tensor::rand(-1f32, 1f32, shape, &Device::Cpu).expect("noise tensor")
}
