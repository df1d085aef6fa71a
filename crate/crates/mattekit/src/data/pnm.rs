//! Byte-exact binary NetPBM codec: P5 grayscale for masks and alphas,
//! P6 color for images, maxval 255 only.
//!
//! Grammar: magic, whitespace, width, height, maxval separated by
//! whitespace, one single whitespace byte, then row-major raw samples.
//! Values map to [0,1] by /255 on read and round(v*255) clamped on write.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_spaces(&mut self) -> Result<()> {
        let start = self.pos;
        while self.pos < self.bytes.len() && is_space(self.bytes[self.pos]) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(self.pos, "expected whitespace"));
        }
        Ok(())
    }

    fn read_number(&mut self) -> Result<usize> {
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| Error::format(start, "numeric overflow in header"))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(self.pos, "expected decimal digits"));
        }
        Ok(value)
    }
}

/// Decode P5 into an HxW tensor or P6 into a 3xHxW tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "missing magic"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(Error::format(0, "unsupported magic (want P5 or P6)")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    cur.skip_spaces()?;
    let width = cur.read_number()?;
    cur.skip_spaces()?;
    let height = cur.read_number()?;
    cur.skip_spaces()?;
    let maxval_pos = cur.pos;
    let maxval = cur.read_number()?;
    if maxval != 255 {
        return Err(Error::format(maxval_pos, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero dimensions"));
    }
    if cur.pos >= bytes.len() || !is_space(bytes[cur.pos]) {
        return Err(Error::format(cur.pos, "expected single whitespace before payload"));
    }
    cur.pos += 1;

    let need = width * height * channels;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {have}"),
        ));
    }
    let payload = &bytes[cur.pos..cur.pos + need];
    if channels == 1 {
        let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[height, width], data)
    } else {
        // interleaved RGB rows to channel-major planes
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data[(c * height + y) * width + x] =
                        payload[(y * width + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Tensor::new(&[3, height, width], data)
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encode an HxW tensor as P5 or a 3xHxW tensor as P6.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    match t.dims() {
        [h, w] => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(t.data().iter().map(|&v| quantize(v)));
            Ok(out)
        }
        [3, h, w] => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            for y in 0..*h {
                for x in 0..*w {
                    for c in 0..3 {
                        out.push(quantize(t.data()[(c * h + y) * w + x]));
                    }
                }
            }
            Ok(out)
        }
        d => Err(Error::shape(format!(
            "pnm encode expects HxW or 3xHxW, got {d:?}"
        ))),
    }
}

pub fn pnm_read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub fn pnm_write(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn zero_grid_roundtrip() {
        let t = Tensor::zeros(&[4, 4]);
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.dims(), &[4, 4]);
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn literal_p5_all_ones() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend([0xFFu8; 16]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.dims(), &[4, 4]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn roundtrip_error_bounded_by_quantization() {
        let mut rng = SeededRng::new(1);
        let t = Tensor::new(&[6, 5], (0..30).map(|_| rng.next_f64()).collect()).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{a} vs {b}");
        }

        let img = Tensor::new(&[3, 4, 4], (0..48).map(|_| rng.next_f64()).collect()).unwrap();
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.dims(), &[3, 4, 4]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        // bad magic
        match decode(b"P4\n1 1\n255\n\x00") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        // unsupported maxval
        match decode(b"P5\n2 2\n127\n\x00\x00\x00\x00") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("expected format error, got {other:?}"),
        }
        // truncated payload
        match decode(b"P5\n4 4\n255\n\x01\x02") {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 14);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        // missing separator digits
        assert!(matches!(decode(b"P5 xx"), Err(Error::Format { .. })));
    }

    #[test]
    fn single_whitespace_rule_after_maxval() {
        // the payload starts immediately after exactly one whitespace byte:
        // a 0x20 payload byte must be preserved, not eaten as whitespace
        let bytes = b"P5\n1 1\n255\n\x20".to_vec();
        let t = decode(&bytes).unwrap();
        assert!((t.data()[0] - 32.0 / 255.0).abs() < 1e-12);
    }
}
