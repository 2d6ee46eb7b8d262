//! Binary checkpoint format. All integers are little-endian `u32`, all
//! floats little-endian IEEE-754 `f64`.
//!
//! ```text
//! magic      4 bytes  "SBNC"
//! version    u32      currently 1
//! n_layers   u32
//! per layer:
//!   in_dim      u32
//!   out_dim     u32
//!   activation  u8   0 = ReLU, 1 = identity
//!   has_mask    u8   0 or 1
//!   weight      out_dim * in_dim f64, row-major (row = output node)
//!   bias        out_dim f64
//!   mask        out_dim * in_dim u8 (0 or 1), only when has_mask = 1
//! ```

use std::io::{Read, Write};

use super::{Activation, DenseNet, Layer, LayerSpec, Matrix};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SBNC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &DenseNet, mut out: W) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(net.num_layers() as u32).to_le_bytes())?;
    for layer in net.layers() {
        let s = layer.spec;
        out.write_all(&(s.in_dim as u32).to_le_bytes())?;
        out.write_all(&(s.out_dim as u32).to_le_bytes())?;
        let act = match s.activation {
            Activation::Relu => 0u8,
            Activation::Identity => 1u8,
        };
        out.write_all(&[act, layer.mask.is_some() as u8])?;
        for w in layer.weight.as_slice() {
            out.write_all(&w.to_le_bytes())?;
        }
        for b in &layer.bias {
            out.write_all(&b.to_le_bytes())?;
        }
        if let Some(mask) = &layer.mask {
            let bytes: Vec<u8> = mask.as_slice().iter().map(|&m| (m != 0.0) as u8).collect();
            out.write_all(&bytes)?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::parse(
                self.offset,
                format!("truncated checkpoint, wanted {n} more bytes"),
            )
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<DenseNet> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let magic = cur.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad checkpoint magic {magic:02x?}"),
        ));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let n_layers = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = cur.offset;
        let in_dim = cur.u32()? as usize;
        let out_dim = cur.u32()? as usize;
        let flags = cur.bytes(2)?;
        let activation = match flags[0] {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => {
                return Err(Error::parse(
                    at + 8,
                    format!("unknown activation tag {other}"),
                ))
            }
        };
        let weight = Matrix::from_vec(out_dim, in_dim, cur.f64s(out_dim * in_dim)?)?;
        let bias = cur.f64s(out_dim)?;
        let mask = match flags[1] {
            0 => None,
            1 => {
                let at = cur.offset;
                let raw = cur.bytes(out_dim * in_dim)?;
                if raw.iter().any(|&b| b > 1) {
                    return Err(Error::parse(at, "mask bytes must be 0 or 1"));
                }
                Some(Matrix::from_vec(
                    out_dim,
                    in_dim,
                    raw.into_iter().map(f64::from).collect(),
                )?)
            }
            other => return Err(Error::parse(at + 9, format!("bad mask flag {other}"))),
        };
        layers.push(Layer {
            spec: LayerSpec {
                in_dim,
                out_dim,
                activation,
            },
            weight,
            bias,
            mask,
        });
    }
    let mut extra = [0u8; 1];
    if cur.inner.read(&mut extra)? != 0 {
        return Err(Error::parse(
            cur.offset,
            "trailing bytes after the last layer",
        ));
    }
    DenseNet::from_layers(layers)
}
