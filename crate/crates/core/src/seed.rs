//! Seed expansion: one master seed fans out into independent per-domain,
//! per-round, per-purpose ChaCha streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    ModelInit = 1,
    MemoryInit = 2,
    Shuffle = 3,
    Noise = 4,
    ServerFill = 5,
    UploadPermutation = 6,
    Synthetic = 7,
    Gradcheck = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes the master seed with the stream coordinates into a 64-bit seed.
pub fn derive_seed(master: u64, purpose: Purpose, domain: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ domain.wrapping_mul(0xA24B_AED4_963E_E407));
    splitmix64(h ^ round.wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

pub fn stream(master: u64, purpose: Purpose, domain: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, domain, round))
}
