//! Seed plumbing: one root seed, named sub-streams.
//!
//! Every stage draws from its own stream so that, say, adding a training
//! iteration cannot shift the data generator. Streams are ChaCha8, which is
//! portable and cheap to fork.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive the seed of a named sub-stream from the root seed.
///
/// FNV-1a over the name, mixed with the root seed through splitmix64.
/// Distinct names give unrelated streams.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

/// ChaCha8 stream for `name` under `root`.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream position as a checkpointable tensor: the u128 word position
/// split into eight 16-bit limbs, least significant first. 16-bit limbs
/// are exactly representable in f32, so the round-trip is lossless.
pub fn stream_pos_tensor(rng: &ChaCha8Rng) -> crate::tensor::Tensor {
    let pos = rng.get_word_pos();
    let limbs: Vec<f32> = (0..8).map(|i| ((pos >> (16 * i)) & 0xFFFF) as f32).collect();
    crate::tensor::Tensor::from_vec(vec![8], limbs).expect("8 limbs")
}

/// Restore a stream position saved by [`stream_pos_tensor`]. The rng must
/// already be seeded with the same stream's seed.
pub fn restore_stream_pos(
    rng: &mut ChaCha8Rng,
    t: &crate::tensor::Tensor,
) -> crate::error::Result<()> {
    if t.shape() != [8] {
        return Err(crate::error::Error::Format(format!(
            "rng position tensor must have shape [8], got {:?}",
            t.shape()
        )));
    }
    let mut pos: u128 = 0;
    for (i, &limb) in t.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&limb) || limb.fract() != 0.0 {
            return Err(crate::error::Error::Format(format!(
                "rng position limb {i} is {limb}, not a 16-bit integer"
            )));
        }
        pos |= (limb as u128) << (16 * i);
    }
    rng.set_word_pos(pos);
    Ok(())
}
