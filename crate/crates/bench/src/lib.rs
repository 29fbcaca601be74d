//! Shared fixtures for the benchmarks.

use embp_core::model::{sample_channel, snr_to_sigma2, transmit};
use embp_core::{Constellation, TransmissionBlock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A BPSK block of `n` symbols through a random memory-`l` channel.
pub fn block(n: usize, l: usize, snr_db: f64, seed: u64) -> TransmissionBlock {
    let c = Constellation::bpsk();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = sample_channel(l, &mut rng);
    h.sigma2 = snr_to_sigma2(snr_db, &h.h, &c, n).expect("valid snr");
    let symbols = c.random_symbols(n, &mut rng);
    transmit(&h, symbols, &c, &mut rng).expect("valid block")
}
