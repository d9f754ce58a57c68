//! Deterministic seeding, hashing, and file helpers shared by the pipeline.
//!
//! All randomness in the crate flows from one root seed. Stage- and
//! sample-level generators are derived by hashing the root seed with a
//! string label, so runs are reproducible byte for byte and independent of
//! evaluation order.

use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// FNV-1a over the label bytes; stable across platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer, used to decorrelate derived seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label.as_bytes()))
}

/// The crate's named generator: ChaCha8 seeded from a derived seed.
pub fn seeded_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Fisher-Yates shuffle of `0..n` driven by a derived generator.
pub fn shuffled_indices(n: usize, root: u64, label: &str) -> Vec<usize> {
    use rand::Rng;
    let mut rng = seeded_rng(root, label);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// First `k` elements of a seeded uniform sample of `0..n` without
/// replacement (partial Fisher-Yates).
pub fn sample_indices(n: usize, k: usize, root: u64, label: &str) -> Vec<usize> {
    use rand::Rng;
    assert!(k <= n);
    let mut rng = seeded_rng(root, label);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Write `bytes` to `path` atomically: a temporary sibling is renamed into
/// place only after the write succeeds, so failed stages never leave a
/// partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a whole file, mapping a missing file to `Error::MissingInput`.
pub fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
