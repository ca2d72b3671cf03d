//! Fixtures shared by the decoder benchmarks.

use neumat::mlp::{Activation, Mlp};
use neumat::reference::seeded_rng;
use rand::Rng;

/// Randomly initialized decoder with `depth` hidden layers of `width` units.
pub fn decoder(input: usize, width: usize, depth: usize, output: usize, seed: u64) -> Mlp {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(width).take(depth));
    dims.push(output);
    let mut rng = seeded_rng(seed);
    Mlp::new(&dims, Activation::LeakyRelu, Activation::Linear, &mut rng).expect("valid dims")
}

/// `n` rows of uniform inputs in [-1, 1).
pub fn inputs(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = seeded_rng(seed);
    (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_matches_naive_on_fixture() {
        let net = decoder(20, 64, 3, 3, 1);
        let q = net.quantize();
        let x = inputs(4096, 20, 2);
        let mut fused = vec![0f32; 4096 * 3];
        q.fused_forward_batch(&x, &mut fused).unwrap();
        let mut naive = Vec::with_capacity(fused.len());
        for row in x.chunks_exact(20) {
            naive.extend(net.forward(row).unwrap());
        }
        let m = neumat::render::compute_metrics(&fused, &naive).unwrap();
        assert!(m.smape < 0.01, "smape {}", m.smape);
    }
}
