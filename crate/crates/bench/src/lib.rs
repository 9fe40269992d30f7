//! Seeded fixtures shared by the benchmarks.

use banet_core::blocks::{build_network, BanetParams, NetworkConfig};
use banet_core::{Shape4, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: Shape4, seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn network(cfg: &NetworkConfig) -> BanetParams<f32> {
    build_network(cfg).expect("valid config")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        let s = Shape4::new(1, 3, 4, 4);
        assert_eq!(random(s, 1), random(s, 1));
        assert_ne!(random(s, 1), random(s, 2));
        assert_eq!(network(&NetworkConfig::tiny()), network(&NetworkConfig::tiny()));
    }
}
