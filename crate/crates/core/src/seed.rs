//! Derivation of independent RNG streams from one master seed.
//!
//! A stream seed is the SplitMix64 finalizer folded over the words
//! `(master, skip, T.to_bits(), replicate, role)`. Adding or removing grid
//! cells never perturbs the streams of other cells.

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamRole {
    TrainPath,
    TestPath,
    Init,
    Shuffle,
    Irreducible,
}

impl StreamRole {
    pub(crate) fn tag(self) -> u64 {
        match self {
            StreamRole::TrainPath => 0x7472_6169_6e00_0001,
            StreamRole::TestPath => 0x7465_7374_0000_0002,
            StreamRole::Init => 0x696e_6974_0000_0003,
            StreamRole::Shuffle => 0x7368_7566_0000_0004,
            StreamRole::Irreducible => 0x6972_7265_0000_0005,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `words` into `seed` one at a time.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(seed), |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Seed of the stream for one replicate of one grid cell.
pub fn derive_seed(master: u64, skip: usize, horizon: f64, replicate: usize, role: StreamRole) -> u64 {
    mix(
        master,
        &[skip as u64, horizon.to_bits(), replicate as u64, role.tag()],
    )
}
