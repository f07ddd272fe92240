//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PNPD"            magic
//! u32               format version
//! u32 u32           architecture code, input-mode code
//! u32               layer count
//! per layer         u32 name length, UTF-8 name, u8 kind
//!                   conv only: u32 stride, u32 pad, u8 relu,
//!                              u32 c_out, u32 c_in, u32 k, u32 k
//! f64...            every conv weight then bias, in layer order
//! u32               CRC-32 of everything above
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Arch, InputMode, Layer, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNPD";
pub const VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_DOWN: u8 = 1;
const KIND_UP: u8 = 2;
const KIND_CONCAT_INPUT: u8 = 3;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, model.arch.code());
    put_u32(&mut out, model.input_mode.code());
    put_u32(&mut out, model.layers.len() as u32);
    for nl in &model.layers {
        put_u32(&mut out, nl.name.len() as u32);
        out.extend_from_slice(nl.name.as_bytes());
        match &nl.layer {
            Layer::Conv {
                weight,
                stride,
                pad,
                relu,
                ..
            } => {
                out.push(KIND_CONV);
                put_u32(&mut out, *stride as u32);
                put_u32(&mut out, *pad as u32);
                out.push(u8::from(*relu));
                for &d in weight.shape() {
                    put_u32(&mut out, d as u32);
                }
            }
            Layer::Downsample => out.push(KIND_DOWN),
            Layer::Upsample => out.push(KIND_UP),
            Layer::ConcatInput => out.push(KIND_CONCAT_INPUT),
        }
    }
    for p in model.parameters() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let arch_code = r.u32()?;
    let arch = Arch::from_code(arch_code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown architecture code {arch_code}")))?;
    let mode_code = r.u32()?;
    let input_mode = InputMode::from_code(mode_code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown input mode code {mode_code}")))?;
    let n_layers = r.u32()? as usize;
    let mut layers: Vec<(String, Layer)> = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("layer name is not UTF-8".into()))?
            .to_string();
        let layer = match r.u8()? {
            KIND_CONV => {
                let stride = r.u32()? as usize;
                let pad = r.u32()? as usize;
                let relu = r.u8()? != 0;
                let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
                Layer::Conv {
                    weight: Tensor::zeros(&dims),
                    bias: Tensor::zeros(&[dims[0]]),
                    stride,
                    pad,
                    relu,
                }
            }
            KIND_DOWN => Layer::Downsample,
            KIND_UP => Layer::Upsample,
            KIND_CONCAT_INPUT => Layer::ConcatInput,
            k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
        };
        layers.push((name, layer));
    }
    let mut model = Model::new(
        arch,
        input_mode,
        layers.iter().map(|(n, l)| (n.as_str(), l.clone())).collect(),
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    for p in model.parameters_mut() {
        for v in p.data_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            body.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}
