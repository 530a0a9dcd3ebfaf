use std::hash::Hasher;

use twox_hash::XxHash64;

/// 64-bit xxHash (seed 0) of `bytes`.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = XxHash64::with_seed(0);
    h.write(bytes);
    h.finish()
}

pub fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", checksum(bytes))
}
