//! "FSG1" checkpoint container for named tensors.
//!
//! Layout: magic "FSG1", entry count as u64 LE, then per-tensor records
//! (name length u64, UTF-8 name, rank u64, dims as u64 each, f32 LE
//! payload), then a CRC-32 (IEEE, the zlib polynomial) over every byte
//! after the magic. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSG1";

/// Ordered name -> tensor map; insertion order is the file order.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate checkpoint key '{name}'")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn insert_all(&mut self, pairs: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in pairs {
            self.insert(name, t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing key '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Keys starting with `prefix`, in file order.
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            body.extend_from_slice(&(name.len() as u64).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32(&body);
        let mut out = Vec::with_capacity(4 + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let trunc = |what: &str| Error::Format(format!("checkpoint truncated in {what}"));
        if bytes.len() < 4 + 8 + 4 {
            return Err(trunc("header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, expected \"FSG1\"",
                &bytes[..4]
            )));
        }
        let body = &bytes[4..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let actual = crc32(body);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut at = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if at + n > body.len() {
                return Err(trunc(what));
            }
            let s = &body[at..at + n];
            at += n;
            Ok(s)
        };
        let count = u64::from_le_bytes(take(8, "count")?.try_into().unwrap());
        let mut ckpt = Checkpoint::new();
        for i in 0..count {
            let name_len = u64::from_le_bytes(take(8, "name length")?.try_into().unwrap());
            let name_len = usize::try_from(name_len)
                .map_err(|_| Error::Format(format!("entry {i}: name length overflows")))?;
            let name = std::str::from_utf8(take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_owned();
            let rank = u64::from_le_bytes(take(8, "rank")?.try_into().unwrap());
            if rank > 8 {
                return Err(Error::Format(format!("entry '{name}': rank {rank} is implausible")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = u64::from_le_bytes(take(8, "dims")?.try_into().unwrap());
                let d = usize::try_from(d)
                    .map_err(|_| Error::Format(format!("entry '{name}': dim overflows")))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("entry '{name}': shape overflows")))?;
                shape.push(d);
            }
            let payload = take(4 * numel, "payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(shape, data)
                .map_err(|e| Error::Format(format!("entry '{name}': {e}")))?;
            ckpt.insert(name, t)?;
        }
        if at != body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last entry",
                body.len() - at
            )));
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(Error::from)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| {
        Error::MissingArtifact(format!("checkpoint {}: {e}", path.display()))
    })?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Restore a parameter set's Adam moments and step counter from the
/// `{prefix}opt.*` keys written by `ParamSet::state_tensors`.
pub fn restore_adam_state(
    set: &mut crate::tensor::ParamSet,
    c: &Checkpoint,
    prefix: &str,
) -> Result<()> {
    let names: Vec<String> = set.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let m = c.expect(&format!("{prefix}opt.{name}.m"))?;
        let v = c.expect(&format!("{prefix}opt.{name}.v"))?;
        set.set_state(&name, m, v)?;
    }
    // Step counts stay far below 2^24, so the f32 scalar is exact.
    let step = c.expect(&format!("{prefix}opt.step"))?.data()[0];
    set.set_step(step as u64);
    Ok(())
}

/// CRC-32/ISO-HDLC (the zlib `crc32`): reflected 0xEDB88320, init and
/// final xor 0xFFFFFFFF.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::from_vec(vec![2, 2], vec![1.0, -0.0, 0.5, -2.0]).unwrap())
            .unwrap();
        c.insert("b", Tensor::from_vec(vec![1], vec![0.25]).unwrap()).unwrap();
        c
    }

    #[test]
    fn crc32_matches_known_vectors() {
        // Standard check value for "123456789" and the zlib value for "abc".
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b"abc"), 0x3524_41C2);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back.len(), 2);
        let w = back.expect("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert!(w.bits_eq(c.get("w").unwrap()));
        assert_eq!(w.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(back.expect("b").unwrap().bits_eq(c.get("b").unwrap()));
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let c = Checkpoint::new();
        let bytes = c.encode();
        assert_eq!(bytes.len(), 4 + 8 + 4);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corruption_is_detected_by_checksum() {
        let mut bytes = sample().encode();
        // Flip one payload bit; the length stays valid so only the CRC sees it.
        let at = bytes.len() - 8;
        bytes[at] ^= 1;
        let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::scalar(1.0)).unwrap();
        let err = c.insert("w", Tensor::scalar(2.0)).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_key_is_reported() {
        let err = sample().expect("nope").unwrap_err().to_string();
        assert!(err.contains("missing key 'nope'"), "{err}");
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = sample().encode();
        bytes[0] = b'Z';
        let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn prefix_listing_preserves_order() {
        let mut c = Checkpoint::new();
        c.insert("flow.w1", Tensor::scalar(1.0)).unwrap();
        c.insert("ae.enc.w", Tensor::scalar(2.0)).unwrap();
        c.insert("flow.w0", Tensor::scalar(3.0)).unwrap();
        assert_eq!(c.keys_with_prefix("flow."), vec!["flow.w1", "flow.w0"]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fsg1");
        write_checkpoint(&path, &sample()).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert!(back.get("w").unwrap().bits_eq(sample().get("w").unwrap()));
        let missing = read_checkpoint(&dir.path().join("gone.fsg1")).unwrap_err();
        assert_eq!(missing.exit_code(), 3);
    }
}
