//! Flat binary checkpoint container.
//!
//! Layout: the 8-byte magic `BOXBOOT1`, then for every parameter tensor a
//! little-endian `u32` name length, the UTF-8 name, three little-endian `u32`
//! shape entries and the values as little-endian IEEE `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ConvLayer, Network, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

pub const MAGIC: &[u8; 8] = b"BOXBOOT1";

pub fn to_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in net.names().iter().zip(net.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Network<T>> {
    let bad = |reason: String| Error::format(origin, reason);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing BOXBOOT1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let truncated = || bad(format!("truncated tensor record at byte {start}"));
        let name_len = r.u32().ok_or_else(truncated)? as usize;
        let name = r.take(name_len).ok_or_else(truncated)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let mut shape = [0usize; 3];
        for d in &mut shape {
            *d = r.u32().ok_or_else(truncated)? as usize;
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
        let raw = count
            .checked_mul(8)
            .and_then(|n| r.take(n))
            .ok_or_else(|| bad(format!("tensor {name} declares {count} values past end of file")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((name, TensorBuf::from_vec(shape, data)?));
    }

    let expected = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias"];
    if tensors.len() != expected.len()
        || tensors.iter().zip(expected).any(|((n, _), e)| n != e)
    {
        let names: Vec<_> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        return Err(bad(format!("unexpected tensor list {names:?}")));
    }
    let mut it = tensors.into_iter().map(|(_, t)| t);
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        layers.push(ConvLayer { weight, bias });
    }
    Network::from_layers(layers).map_err(|e| bad(e.to_string()))
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = Network::<f64>::new(3, 2, 17).unwrap();
        let bytes = to_bytes(&net);
        assert_eq!(&bytes[..8], b"BOXBOOT1");
        let back: Network<f64> = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.classes(), 2);
    }

    #[test]
    fn header_layout() {
        let net = Network::<f64>::zeros(3, 1);
        let bytes = to_bytes(&net);
        assert_eq!(&bytes[8..12], &12u32.to_le_bytes());
        assert_eq!(&bytes[12..24], b"conv1.weight");
        assert_eq!(&bytes[24..36], &[16, 0, 0, 0, 3, 0, 0, 0, 9, 0, 0, 0]);
        let values = 16 * 3 * 9 + 16 + 16 * 16 * 9 + 16 + 2 * 16 * 9 + 2;
        let names = 12 + 10 + 12 + 10 + 12 + 10;
        assert_eq!(bytes.len(), 8 + 6 * 16 + names + 8 * values);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let net = Network::<f64>::new(3, 1, 1).unwrap();
        let mut bytes = to_bytes(&net);
        bytes[0] = b'X';
        assert!(from_bytes::<f64>(&bytes, Path::new("x")).unwrap_err().is_io());
        let bytes = to_bytes(&net);
        let cut = &bytes[..bytes.len() - 3];
        let err = from_bytes::<f64>(cut, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("past end"), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes::<f64>(&long, Path::new("x")).is_err());
    }
}
