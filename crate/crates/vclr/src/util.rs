//! Seeding, derived RNG streams, and small shared helpers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named RNG streams so that independent stages (weight init, data order,
/// view choice, noise, ...) never share state. Adding a stream never shifts
/// the draws of an existing one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WeightInit,
    DataOrder,
    ViewChoice,
    SceneLayout,
    ProposalNoise,
    Perturbation,
    Distortion,
    Stylize,
    CropPaste,
    Other(u64),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::WeightInit => 1,
            Stream::DataOrder => 2,
            Stream::ViewChoice => 3,
            Stream::SceneLayout => 4,
            Stream::ProposalNoise => 5,
            Stream::Perturbation => 6,
            Stream::Distortion => 7,
            Stream::Stylize => 8,
            Stream::CropPaste => 9,
            Stream::Other(t) => 0x1000 + t,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha8 generator for `(seed, stream, index)`. The index lets callers
/// carve per-record or per-trial substreams out of one logical stream.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ stream.tag().rotate_left(17) ^ index.rotate_left(43);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Mean of a slice; 0 for an empty one.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Indices that sort `keys` descending, ties broken by the lower index.
pub fn argsort_desc(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));
    idx
}
