//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssimloss::Image;

pub fn random_image(seed: u64, height: usize, width: usize, channels: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(height, width, channels, |_, _, _| rng.gen())
}
