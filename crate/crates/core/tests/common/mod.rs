#![allow(dead_code)]

pub mod bleu;

use privseq::tensor::{Grads, NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences of a scalar function of several tensors.
pub fn finite_differences(params: &[Tensor], h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let mut g = vec![0.0; p.len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= h;
            *gj = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(Tensor::new(p.shape().to_vec(), g).unwrap());
    }
    out
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.sum_squares().sqrt().max(b.sum_squares().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Builds a tape with `params` as parameters, runs `build`, and checks the
/// backward gradient of the resulting scalar against finite differences.
pub fn gradient_check(params: &[Tensor], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    let eval = |ps: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads: Grads = tape.backward(loss).unwrap();
    let numeric = finite_differences(params, 1e-5, &eval);
    ids.iter()
        .zip(&numeric)
        .map(|(id, n)| relative_error(&grads[id], n))
        .fold(0.0, f64::max)
}
