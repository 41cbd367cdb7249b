//! Portable float map (PFM) I/O.
//!
//! Header: `Pf` (one channel) or `PF` (three channels), then `width height`,
//! then a scale whose sign gives the byte order (negative = little-endian).
//! Rows are stored bottom to top.

use std::path::Path;

use crate::cost_volume::DepthMap;
use crate::error::{Error, Result};

/// Row-major float map, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!("PFM holds 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(FloatMap {
            width,
            height,
            channels,
            data,
        })
    }

    /// Invalid pixels are written as 0.
    pub fn from_depth(map: &DepthMap) -> Self {
        let data = map
            .depth
            .iter()
            .zip(&map.valid)
            .map(|(&d, &v)| if v { d as f32 } else { 0.0 })
            .collect();
        FloatMap {
            width: map.width,
            height: map.height,
            channels: 1,
            data,
        }
    }

    /// Pixels that are zero, negative or non-finite become invalid.
    pub fn to_depth(&self) -> Result<DepthMap> {
        if self.channels != 1 {
            return Err(Error::Argument("depth maps have one channel".into()));
        }
        let valid: Vec<bool> = self.data.iter().map(|&v| v.is_finite() && v > 0.0).collect();
        let depth = self
            .data
            .iter()
            .zip(&valid)
            .map(|(&v, &ok)| if ok { v as f64 } else { 0.0 })
            .collect();
        DepthMap::new(self.width, self.height, depth, valid)
    }

    pub fn encode(&self, little_endian: bool) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let scale = if little_endian { "-1.0" } else { "1.0" };
        let mut out = format!("{tag}\n{} {}\n{scale}\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for &v in &self.data[y * row..(y + 1) * row] {
                if little_endian {
                    out.extend_from_slice(&v.to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let tag = next_token(bytes, &mut pos)?;
        let channels = match tag.1 {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::format(tag.0, format!("bad PFM tag '{other}'"))),
        };
        let width = parse_dim(next_token(bytes, &mut pos)?)?;
        let height = parse_dim(next_token(bytes, &mut pos)?)?;
        let (at, s) = next_token(bytes, &mut pos)?;
        let scale: f64 = s
            .parse()
            .map_err(|_| Error::format(at, format!("bad scale '{s}'")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::format(at, "scale must be non-zero"));
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format(pos, "missing newline after scale"));
        }
        pos += 1;
        let row = width * channels;
        let need = row * height * 4;
        if bytes.len() - pos < need {
            return Err(Error::format(
                bytes.len(),
                format!("truncated payload: {} of {need} bytes", bytes.len() - pos),
            ));
        }
        if bytes.len() - pos > need {
            return Err(Error::format(pos + need, "trailing bytes after payload"));
        }
        let little = scale < 0.0;
        let mut data = vec![0f32; row * height];
        for (k, chunk) in bytes[pos..].chunks_exact(4).enumerate() {
            let b: [u8; 4] = chunk.try_into().unwrap();
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (file_row, col) = (k / row, k % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        FloatMap::new(width, height, channels, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode(true)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn save_pfm(map: &FloatMap, path: impl AsRef<Path>) -> Result<()> {
    map.save(path)
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<FloatMap> {
    FloatMap::load(path)
}

pub fn save_depth_pfm(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    FloatMap::from_depth(map).save(path)
}

pub fn load_depth_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    FloatMap::load(path)?.to_depth()
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<(usize, &'a str)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(start, "truncated header"));
    }
    let s = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(start, "header is not ASCII"))?;
    Ok((start, s))
}

fn parse_dim((at, s): (usize, &str)) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::format(at, format!("bad dimension '{s}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_roundtrip() {
        let m = FloatMap::new(1, 1, 1, vec![2.5]).unwrap();
        let bytes = m.encode(true);
        assert_eq!(&bytes[..12], b"Pf\n1 1\n-1.0\n");
        assert_eq!(&bytes[12..], &2.5f32.to_le_bytes());
        assert_eq!(FloatMap::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn rows_are_stored_bottom_to_top() {
        let m = FloatMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut expect = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(m.encode(true), expect);
        assert_eq!(FloatMap::decode(&expect).unwrap(), m);
    }

    #[test]
    fn big_endian_files_decode() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&7.0f32.to_be_bytes());
        bytes.extend_from_slice(&(-0.5f32).to_be_bytes());
        let m = FloatMap::decode(&bytes).unwrap();
        assert_eq!(m.data, vec![-0.5, 7.0]);
        assert_eq!(FloatMap::decode(&m.encode(false)).unwrap(), m);
    }

    #[test]
    fn malformed_files_report_offsets() {
        assert!(matches!(FloatMap::decode(b"P6\n1 1\n-1\n"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(FloatMap::decode(b"Pf\n1 x\n-1\n"), Err(Error::Format { offset: 5, .. })));
        let mut short = b"Pf\n2 1\n-1.0\n".to_vec();
        short.extend_from_slice(&[0, 0, 0, 0, 0]);
        assert!(matches!(FloatMap::decode(&short), Err(Error::Format { offset: 17, .. })));
        assert!(matches!(FloatMap::decode(b"Pf\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn depth_maps_keep_validity() {
        let d = DepthMap::new(3, 1, vec![1.5, 0.0, 80.0], vec![true, false, true]).unwrap();
        let back = FloatMap::decode(&FloatMap::from_depth(&d).encode(true)).unwrap().to_depth().unwrap();
        assert_eq!(back, d);
    }
}
