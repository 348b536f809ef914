//! Counter-based random streams: item `i` of a batch draws from its own ChaCha8
//! stream, so results do not depend on how the batch is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
