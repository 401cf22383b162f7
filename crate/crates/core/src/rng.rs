//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream derived from the run seed
//! and a fixed purpose tag, so adding a consumer (an adapter, say) never
//! shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    StudentInit = 1,
    TeacherInit = 2,
    AdapterInit = 3,
    Batches = 4,
    Scenes = 5,
    Gradcheck = 6,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Generator for item `index` of a sequence; independent of every other index.
pub fn indexed(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (purpose as u64).rotate_left(32));
    rng.set_stream(index);
    rng
}
