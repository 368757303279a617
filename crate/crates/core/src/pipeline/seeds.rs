//! Stable seed derivation by hashing.

use sha2::{Digest, Sha256};

/// Seed for one labelled stream: the first 8 bytes of
/// `SHA-256("grainfield.seed.v1" | master | parts...)`, little-endian.
///
/// Parts are length-prefixed so distinct tuples never collide by concatenation.
pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"grainfield.seed.v1");
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed of a datagen entry.
pub fn entry_seed(master: u64, kernel_id: &str, denoiser_id: &str, replicate: usize) -> u64 {
    derive_seed(
        master,
        &[
            b"entry",
            kernel_id.as_bytes(),
            denoiser_id.as_bytes(),
            &(replicate as u64).to_le_bytes(),
        ],
    )
}

/// Seed of item `index` in a named stream.
pub fn stream_seed(master: u64, label: &str, index: u64) -> u64 {
    derive_seed(master, &[label.as_bytes(), &index.to_le_bytes()])
}
