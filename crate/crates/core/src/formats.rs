//! On-disk formats: `TSR1` tensors, 8-bit PGM previews and the named-tensor
//! checkpoint container. Everything is little-endian.

use std::fs;
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;

pub const TSR_MAGIC: &[u8; 4] = b"TSR1";
pub const CKPT_MAGIC: &[u8; 4] = b"SSCK";
pub const CKPT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("{} is truncated", self.what)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// `TSR1` encoding: magic, `u32` rank, `u32` dims, `f32` payload.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(TSR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor file");
    if r.take(4)? != TSR_MAGIC {
        return Err(Error::format("not a TSR1 tensor file"));
    }
    let rank = r.u32()? as usize;
    if rank > 4 {
        return Err(Error::format(format!("tensor rank {rank} exceeds 4")));
    }
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Rounds every value to the nearest `f32`, i.e. what a `TSR1` roundtrip keeps.
pub fn round_to_f32(img: &Image) -> Image {
    img.map(|v| v as f32 as f64)
}

/// Binary 8-bit PGM with `round(255 * clamp(x, 0, 1))`.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    // Header: magic, width, height, maxval separated by whitespace, then one whitespace byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format("not a binary PGM (P5) file"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
    }
    let data = bytes
        .get(pos + 1..)
        .filter(|d| d.len() == w * h)
        .ok_or_else(|| Error::format("PGM payload length does not match header"))?;
    Image::new(h, w, data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pgm(&fs::read(path)?)
}

/// Named `f64` tensors plus a JSON metadata string; lossless.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(format!("checkpoint has no tensor {name:?}")))
    }

    /// Tensors whose names start with `prefix`, in stored order, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint metadata is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(Error::format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        r.finish()?;
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_exact_at_f32() {
        let t = Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0e-3, 7.0, 0.1, 1.0 / 3.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_tensor(&back), encode_tensor(&t));
        assert_eq!(encode_tensor(&t).len(), 4 + 4 + 8 + 24);
    }

    #[test]
    fn tensor_decoder_rejects_bad_input() {
        let t = Tensor::zeros(&[2, 2]);
        let mut b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_tensor(&b).is_err());
        let mut extra = encode_tensor(&t);
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
    }

    #[test]
    fn pgm_roundtrip_quantises() {
        let img = Image::new(2, 3, vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.2]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.get(0, 1), 128.0 / 255.0);
        assert_eq!(back.get(1, 0), 0.0);
        assert_eq!(back.get(1, 1), 1.0);
        assert_eq!(encode_pgm(&back), bytes);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut c = Checkpoint {
            metadata: r#"{"step":3}"#.into(),
            ..Default::default()
        };
        c.push("a.b", Tensor::new(&[3], vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap());
        c.push("s", Tensor::scalar(std::f64::consts::PI));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("a.b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
