//! Portable float map (PFM) codec. Images are held top row first in memory;
//! the file stores rows bottom-to-top as the format prescribes. Files are
//! always written little-endian (scale `-1.0`).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PFM header: {0}")]
    Header(String),
    #[error("PFM payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("unsupported channel count {0} (PFM holds 1 or 3)")]
    Channels(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[[f64; 3]]) -> Self {
        assert_eq!(rgb.len(), width * height);
        Self {
            width,
            height,
            channels: 3,
            data: rgb.iter().flat_map(|p| p.map(|c| c as f32)).collect(),
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn encode(&self) -> Result<Vec<u8>, PfmError> {
        let tag = match self.channels {
            3 => "PF",
            1 => "Pf",
            c => return Err(PfmError::Channels(c)),
        };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PfmError> {
        let mut pos = 0usize;
        let mut token = || -> Result<String, PfmError> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PfmError::Header("unexpected end of header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(PfmError::Header(format!("bad magic {other:?}"))),
        };
        let parse_dim = |s: String| {
            s.parse::<usize>()
                .map_err(|_| PfmError::Header(format!("bad dimension {s:?}")))
        };
        let width = parse_dim(token()?)?;
        let height = parse_dim(token()?)?;
        let scale_tok = token()?;
        let scale: f32 = scale_tok
            .parse()
            .map_err(|_| PfmError::Header(format!("bad scale {scale_tok:?}")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(PfmError::Header(format!("bad scale {scale}")));
        }
        // exactly one whitespace byte separates the header from the payload
        pos += 1;
        let little = scale < 0.0;
        let n = width * height * channels;
        let payload = bytes.get(pos..).unwrap_or(&[]);
        if payload.len() < n * 4 {
            return Err(PfmError::Truncated {
                expected: n * 4,
                got: payload.len(),
            });
        }
        let mut data = vec![0f32; n];
        let row = width * channels;
        for (k, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            let file_row = k / row;
            let y = height - 1 - file_row;
            data[y * row + k % row] = v;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PfmError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PfmError> {
        let bytes = self.encode()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = PfmImage::new(2, 1, 1);
        let bytes = img.encode().unwrap();
        assert!(bytes.starts_with(b"Pf\n2 1\n-1.0\n"));
        assert_eq!(bytes.len(), 12 + 8);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let img = PfmImage {
            width: 1,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0],
        };
        let bytes = img.encode().unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let bytes = PfmImage::new(4, 4, 3).encode().unwrap();
        assert!(matches!(
            PfmImage::decode(&bytes[..bytes.len() - 1]),
            Err(PfmError::Truncated { .. })
        ));
    }

    #[test]
    fn big_endian_files_are_read() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&3.5f32.to_be_bytes());
        assert_eq!(PfmImage::decode(&bytes).unwrap().data, vec![3.5]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_byte_identical(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u32>()) {
            let c = if rgb { 3 } else { 1 };
            let data = (0..w * h * c)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let img = PfmImage { width: w, height: h, channels: c, data };
            let a = img.encode().unwrap();
            let back = PfmImage::decode(&a).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(back.encode().unwrap(), a);
        }
    }
}
