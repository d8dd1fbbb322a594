//! Network building blocks: pooling fusion, vector attention and the model
//! assembled from them.

mod gagm;
mod model;
mod sevector;

pub use gagm::{gagm, gagm_graph, GagmOutput};
pub use model::{
    build_model, images_to_tensor, FeatureTap, Forward, Inference, LayerDesc, Model, ModelConfig, ModelSpec,
    BN_MOMENTUM,
};
pub use sevector::{compressed_width, sevector, sevector_graph, SeVectorParams, DEFAULT_REDUCTION_RATIO};

use rand::Rng;

use crate::tensor::Tensor;

/// Uniform He initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}
