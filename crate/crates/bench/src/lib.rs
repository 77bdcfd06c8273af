//! Seeded inputs shared by the benchmarks.

use moefusion::fusion::{Lattice, PosteriorSource, LOG_FLOOR};
use moefusion::math::log_softmax;
use moefusion::tokenizer::{BOS, PAD};
use moefusion::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// A lattice of `steps` rows over `vocab` tokens with random logits.
pub fn random_lattice(vocab: usize, steps: usize, seed: u64) -> PosteriorSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..steps)
        .map(|_| {
            let mut logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-4.0..4.0)).collect();
            logits[PAD as usize] = LOG_FLOOR;
            logits[BOS as usize] = LOG_FLOOR;
            log_softmax(&logits)
                .expect("finite logits")
                .into_iter()
                .map(|x| x.max(LOG_FLOOR))
                .collect()
        })
        .collect();
    PosteriorSource::Lattice(Lattice::from_rows(rows).expect("normalized rows"))
}

/// Word sequences of `len` words drawn from a small alphabet.
pub fn random_words(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..8)).collect()
}
