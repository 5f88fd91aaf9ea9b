//! Keyed per-block transforms used by the corrupt and cipher failure modes.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used to derive flip positions from (seed, lba, chunk).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bit index (0..512) flipped inside 64-byte chunk `chunk` of block `lba`.
pub fn flip_position(seed: u64, lba: u64, chunk: u64) -> u32 {
    let h = mix64(seed ^ mix64(lba.wrapping_mul(0x1000_0000_01B3) ^ mix64(chunk)));
    (h % 512) as u32
}

/// Flips one bit per 64-byte chunk of `block` at seed-derived positions.
pub fn corrupt_block(seed: u64, lba: u64, block: &mut [u8]) {
    for (chunk_idx, chunk) in block.chunks_mut(64).enumerate() {
        let bit = flip_position(seed, lba, chunk_idx as u64) as usize % (chunk.len() * 8);
        chunk[bit / 8] ^= 1 << (bit % 8);
    }
}

/// 256-bit key for the cipher mode.
#[derive(Clone, PartialEq, Eq)]
pub struct CipherKey(pub [u8; 32]);

impl std::fmt::Debug for CipherKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CipherKey(..)")
    }
}

impl CipherKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1F3_E000_0000_0000);
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        CipherKey(k)
    }
}

fn keystream(key: &CipherKey, lba: u64, len: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::from_seed(key.0);
    rng.set_stream(lba);
    let mut xor = vec![0u8; len];
    let mut add = vec![0u8; len];
    rng.fill_bytes(&mut xor);
    rng.fill_bytes(&mut add);
    // An all-zero additive stream would make the transform an involution.
    for a in add.iter_mut() {
        *a |= 1;
    }
    (xor, add)
}

/// y = (x ^ k1) + k2 (mod 256) with a per-block stream tweak.
///
/// The additive term is odd everywhere, so applying the transform twice never
/// returns the input.
pub fn encipher_block(key: &CipherKey, lba: u64, block: &mut [u8]) {
    let (xor, add) = keystream(key, lba, block.len());
    for ((b, x), a) in block.iter_mut().zip(&xor).zip(&add) {
        *b = (*b ^ x).wrapping_add(*a);
    }
}

pub fn decipher_block(key: &CipherKey, lba: u64, block: &mut [u8]) {
    let (xor, add) = keystream(key, lba, block.len());
    for ((b, x), a) in block.iter_mut().zip(&xor).zip(&add) {
        *b = b.wrapping_sub(*a) ^ x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corrupt_flips_exactly_one_bit_per_chunk() {
        let orig = vec![0xA5u8; 512];
        let mut b = orig.clone();
        corrupt_block(7, 3, &mut b);
        for (c, (x, y)) in b.chunks(64).zip(orig.chunks(64)).enumerate() {
            let flipped: u32 = x.iter().zip(y).map(|(p, q)| (p ^ q).count_ones()).sum();
            assert_eq!(flipped, 1, "chunk {c}");
        }
    }

    #[test]
    fn cipher_is_not_an_involution() {
        let key = CipherKey::from_seed(1);
        let orig: Vec<u8> = (0..512).map(|i| i as u8).collect();
        let mut b = orig.clone();
        encipher_block(&key, 0, &mut b);
        assert_ne!(b, orig);
        encipher_block(&key, 0, &mut b);
        assert_ne!(b, orig);
    }

    proptest! {
        #[test]
        fn cipher_roundtrip(seed: u64, lba: u64, data in proptest::collection::vec(any::<u8>(), 16..1024)) {
            let key = CipherKey::from_seed(seed);
            let mut b = data.clone();
            encipher_block(&key, lba, &mut b);
            prop_assert_ne!(&b, &data);
            decipher_block(&key, lba, &mut b);
            prop_assert_eq!(b, data);
        }
    }
}
