use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// First eight bytes of `sha256("{master}:{stage}")`, little-endian.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{master}:{stage}").as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}
