//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"RAMPCKPT"  u32 version = 1  u32 layer_count
//! per layer:   u16 name_len  name (UTF-8)  u32 rows  u32 cols
//!              rows·cols f64 weights (row-major)  cols f64 biases
//! ```
//!
//! Activations are not stored: hidden layers load as relu and the final layer
//! as identity.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, Dense, Mlp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RAMPCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes<S: Scalar>(model: &Mlp<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for l in model.layers() {
        let name = l.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("layer name too long: {}", l.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
        out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn from_bytes<S: Scalar>(buf: &[u8]) -> Result<Mlp<S>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| Error::Checkpoint(format!("layer {i} name is not UTF-8")))?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Checkpoint(format!("layer {name:?} has an empty dimension")));
        }
        let w = r.f64s(rows * cols, "weights")?;
        let b = r.f64s(cols, "biases")?;
        layers.push(Dense {
            name,
            weight: Tensor::matrix(rows, cols, w.into_iter().map(S::of).collect())?,
            bias: Tensor::vector(b.into_iter().map(S::of).collect()),
            activation: if i + 1 == count {
                Activation::Identity
            } else {
                Activation::Relu
            },
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last layer",
            buf.len() - r.pos
        )));
    }
    Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save<S: Scalar>(model: &Mlp<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Mlp<S>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Mlp::<f64>::init(&[4, 7, 5, 3], 9).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..8], b"RAMPCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        let back: Mlp<f64> = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = Mlp::<f64>::init(&[2, 1], 0).unwrap();
        let b = to_bytes(&m).unwrap();
        // magic + version + count + (u16 + "fc1" + rows + cols) + 2 weights + 1 bias
        assert_eq!(b.len(), 8 + 4 + 4 + 2 + 3 + 4 + 4 + 3 * 8);
        assert_eq!(&b[16..18], &3u16.to_le_bytes());
        assert_eq!(&b[18..21], b"fc1");
    }

    #[test]
    fn rejects_corruption() {
        let m = Mlp::<f64>::init(&[2, 3, 2], 0).unwrap();
        let mut b = to_bytes(&m).unwrap();
        assert!(from_bytes::<f64>(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&b), Err(Error::Checkpoint(_))));
    }
}
