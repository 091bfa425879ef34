//! Named random substreams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_AUGMENT: u64 = 4;

/// Independent generator for `(seed, stream)`; streams never overlap.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
