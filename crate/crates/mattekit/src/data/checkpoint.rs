//! Named-tensor checkpoint container.
//!
//! Little-endian layout: magic "M2AK", u32 version, u32 tensor count, then
//! per tensor a length-prefixed UTF-8 name, u32 rank, u32 dims and a
//! float32 payload; the file ends with a CRC-32 (polynomial 0xEDB88320,
//! reflected) over all preceding bytes. Values are stored as f32, so a
//! load -> save -> load cycle is a bitwise fixpoint.

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"M2AK";
pub const VERSION: u32 = 1;

pub struct LoadedCheckpoint {
    pub tensors: Vec<(String, Tensor)>,
    /// False when the trailing CRC does not match the payload.
    pub crc_ok: bool,
}

/// Serialize named tensors; names must be unique.
pub fn checkpoint_save(named: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in named.iter().enumerate() {
        if named[..i].iter().any(|(other, _)| other == name) {
            return Err(Error::Logic(format!("duplicate tensor name {name:?}")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len(),
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a checkpoint. Structural damage is a format error; a CRC mismatch
/// alone still yields the tensors with `crc_ok = false`.
pub fn checkpoint_load(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(Error::format(bytes.len(), "checkpoint shorter than header"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(0, "unknown checkpoint magic"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc_ok = crc32fast::hash(body) == stored_crc;

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(name_pos, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format(r.pos, format!("bad tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32("dim")? as usize;
            if d == 0 {
                return Err(Error::format(r.pos, "zero dimension"));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(r.pos, "dimension overflow"))?;
            dims.push(d);
        }
        let payload = r.take(numel * 4, "tensor payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::new(&dims, data)?));
    }
    Ok(LoadedCheckpoint { tensors, crc_ok })
}

pub fn save_params(ps: &ParamSet) -> Result<Vec<u8>> {
    let named: Vec<(&str, &Tensor)> = ps.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    checkpoint_save(&named)
}

pub fn load_params(bytes: &[u8]) -> Result<(ParamSet, bool)> {
    let loaded = checkpoint_load(bytes)?;
    let ps = ParamSet::from_named(loaded.tensors)?;
    Ok((ps, loaded.crc_ok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    /// Independent bitwise CRC-32 (reflected 0xEDB88320) reference.
    fn crc32_reference(bytes: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in bytes {
            crc ^= b as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    (crc >> 1) ^ 0xEDB8_8320
                } else {
                    crc >> 1
                };
            }
        }
        !crc
    }

    #[test]
    fn empty_set_is_header_plus_crc() {
        let bytes = checkpoint_save(&[]).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4);
        assert_eq!(&bytes[..4], b"M2AK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        let loaded = checkpoint_load(&bytes).unwrap();
        assert!(loaded.crc_ok);
        assert!(loaded.tensors.is_empty());
    }

    #[test]
    fn roundtrip_is_bitwise_for_f32_values() {
        let t = Tensor::new(&[2, 2], vec![0.5, -1.25, 3.0, 0.0078125]).unwrap();
        let bytes = checkpoint_save(&[("w", &t)]).unwrap();
        let loaded = checkpoint_load(&bytes).unwrap();
        assert!(loaded.crc_ok);
        assert_eq!(loaded.tensors.len(), 1);
        assert_eq!(loaded.tensors[0].0, "w");
        assert!(loaded.tensors[0].1.bit_eq(&t));

        // save -> load -> save is a byte fixpoint even for non-f32 values
        let mut rng = SeededRng::new(3);
        let raw = rng.normal_tensor(&[3, 5], 1.0);
        let first = checkpoint_save(&[("x", &raw)]).unwrap();
        let once = checkpoint_load(&first).unwrap();
        let second = checkpoint_save(&[("x", &once.tensors[0].1)]).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn crc_matches_independent_reference() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = checkpoint_save(&[("v", &t)]).unwrap();
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(stored, crc32_reference(body));
    }

    #[test]
    fn corrupted_payload_byte_flags_crc() {
        let t = Tensor::new(&[2, 2], vec![0.5, 0.25, 0.125, 1.0]).unwrap();
        let mut bytes = checkpoint_save(&[("w", &t)]).unwrap();
        // flip one bit inside the float payload (last 16+4 bytes are floats+crc)
        let idx = bytes.len() - 4 - 7;
        bytes[idx] ^= 0x10;
        let loaded = checkpoint_load(&bytes).unwrap();
        assert!(!loaded.crc_ok, "corruption must be reported");
        assert_eq!(loaded.tensors.len(), 1); // structure still parses
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            checkpoint_load(b"NOPE"),
            Err(Error::Format { .. })
        ));
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = checkpoint_save(&[("w", &t)]).unwrap();
        // truncate inside the payload
        assert!(matches!(
            checkpoint_load(&bytes[..bytes.len() - 6]),
            Err(Error::Format { .. })
        ));
        // bad version
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(checkpoint_load(&wrong), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_names_rejected_on_save() {
        let t = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(matches!(
            checkpoint_save(&[("w", &t), ("w", &t)]),
            Err(Error::Logic(_))
        ));
    }
}
