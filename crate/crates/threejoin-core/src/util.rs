//! Seed derivation and checksum helpers shared across modules.

/// SplitMix64 finalizer. Used to spread correlated seed inputs.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent stream seed from a base seed and a namespace tag.
/// All randomness in the crate flows from one user seed through this.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(tag.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// FNV-1a over a byte slice. Used for seed tags and parameter checksums
/// where we only ever compare for equality, never for collision
/// resistance.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Checksum of a sequence of f64 tensors, order-sensitive and bit-exact.
pub fn params_checksum<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for v in t {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}
