//! Root-seed splitting. Every random stream in a run is derived from one root
//! seed, a subsystem tag and (where relevant) a step counter, so a run can be
//! replayed or resumed from any step without saving generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampler = 2,
    Dropout = 3,
    Env = 4,
    Graph = 5,
    Synth = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: Stream) -> u64 {
    splitmix(root ^ splitmix(stream as u64))
}

/// Generator for `stream`, positioned at sub-stream `index`.
pub fn rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(root, stream));
    rng.set_stream(index);
    rng
}
