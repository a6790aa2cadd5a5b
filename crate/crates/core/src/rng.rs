use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for an independent pipeline stage, labelled by `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::Rng;
    stream(seed, tag).random()
}
