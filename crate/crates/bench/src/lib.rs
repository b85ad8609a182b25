//! Fixtures shared by the criterion benches.

use mtl_lab::{Feed, Graph, GraphBuilder, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// A single 3x3 convolution summed to a scalar, with its inputs.
pub struct ConvCase {
    pub graph: Graph,
    pub params: ParamStore<f32>,
    pub feed: Feed<f32>,
    pub loss: NodeId,
}

pub fn conv_case(batch: usize, c_in: usize, c_out: usize, size: usize, stride: usize) -> ConvCase {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[batch, c_in, size, size]).expect("input");
    let w = b.param("w", &[c_out, c_in, 3, 3]).expect("param");
    let bias = b.param("b", &[c_out]).expect("param");
    let y = b.conv2d(x, w, bias, stride, 1).expect("conv");
    let loss = b.sum(y);
    b.output("loss", loss);
    let mut params = ParamStore::new();
    params.insert("w", random_tensor(&[c_out, c_in, 3, 3], 1));
    params.insert("b", random_tensor(&[c_out], 2));
    let mut feed = Feed::new();
    feed.insert("x".to_string(), random_tensor(&[batch, c_in, size, size], 3));
    ConvCase {
        graph: b.finish(),
        params,
        feed,
        loss,
    }
}
