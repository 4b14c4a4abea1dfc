//! Scratch micro-profile of one training step (dev tool).

use std::time::Instant;

use rfeseg::graph::{sgd_step, Graph};
use rfeseg::model::{Model, ModelConfig};
use rfeseg::Tensor4;

fn main() {
    let model = Model::build(ModelConfig::default()).unwrap();
    let mut batch = Tensor4::zeros(32, 32, 3, 12);
    for (i, v) in batch.data_mut().iter_mut().enumerate() {
        *v = ((i * 37 % 101) as f32) / 101.0;
    }
    let mut labels = Tensor4::zeros(32, 32, 1, 12);
    for (i, v) in labels.data_mut().iter_mut().enumerate() {
        *v = if i % 53 == 0 { 1.0 } else { 0.0 };
    }

    let reps = 20;

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let _ = model.forward_on(&mut g, batch.clone()).unwrap();
    }
    let fwd = t0.elapsed() / reps;

    let t0 = Instant::now();
    let mut m2 = model.clone();
    for _ in 0..reps {
        let mut g = Graph::new();
        let nodes = m2.forward_on(&mut g, batch.clone()).unwrap();
        let probs = g.sigmoid(nodes.logits);
        let loss = g.dice(probs, &labels, 1e-7).unwrap();
        let grads = g.backward(loss).unwrap().params(&g);
        sgd_step(m2.params_mut(), &grads, 1e-4).unwrap();
    }
    let full = t0.elapsed() / reps;

    println!("forward only: {fwd:?}   full step: {full:?}   backward+update: {:?}", full - fwd);
}
