//! Counter-based seed splitting.
//!
//! Every random stream is identified by `(seed, stage, index)`. The index is
//! usually a prompt index or a step counter, so work can be split across
//! threads in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stage a random stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Init,
    Pretrain,
    PretrainCheck,
    Candidates,
    PairDraw,
    FinetuneNoise,
    Eval,
    Validation,
    Sample,
    Test,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Init => 1,
            Stage::Pretrain => 2,
            Stage::PretrainCheck => 3,
            Stage::Candidates => 4,
            Stage::PairDraw => 5,
            Stage::FinetuneNoise => 6,
            Stage::Eval => 7,
            Stage::Validation => 8,
            Stage::Sample => 9,
            Stage::Test => 10,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stage, index)`.
pub fn stream(seed: u64, stage: Stage, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed) ^ splitmix64(stage.tag().wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
