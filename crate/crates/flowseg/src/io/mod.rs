//! On-disk artifacts: binary volumes and checkpoints, JSON manifests,
//! CSV tables, and PGM slice exports.
//!
//! The binary formats are little-endian everywhere and round-trip
//! bit-exactly; writes are single-pass so identical inputs produce
//! identical bytes.

mod checkpoint;
mod csvio;
mod manifest;
mod pgm;
mod volume;

pub use checkpoint::{read_checkpoint, restore_adam_state, write_checkpoint, Checkpoint};
pub use csvio::{fmt_f32, fmt_f64, write_csv};
pub use manifest::{read_manifest, write_manifest, Manifest, VolumeEntry, MANIFEST_VERSION};
pub use pgm::write_pgm;
pub use volume::{decode_volume, encode_volume, read_volume, write_volume};
