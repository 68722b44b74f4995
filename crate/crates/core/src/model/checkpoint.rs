//! Flat binary checkpoints.
//!
//! Layout (all integers little-endian u32, floats little-endian f64):
//!
//! ```text
//! magic "DPFTCKPT" | version | layers hidden heads ffn vocab seq_len classes peft_width
//! | param count | per param: name_len name_bytes ndims dims... data...
//! ```
//!
//! Parameters appear in the stack's declared order.

use std::io::{Read, Write};

use super::{ModelConfig, TransformerStack};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DPFTCKPT";
const VERSION: u32 = 1;

impl TransformerStack {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let c = &self.config;
        for v in [
            c.layers,
            c.hidden,
            c.heads,
            c.ffn,
            c.vocab,
            c.seq_len,
            c.classes,
            c.peft_width,
        ] {
            put_u32(&mut w, v as u32)?;
        }
        put_u32(&mut w, self.params.len() as u32)?;
        for p in &self.params {
            put_u32(&mut w, p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            put_u32(&mut w, p.tensor.shape().len() as u32)?;
            for &d in p.tensor.shape() {
                put_u32(&mut w, d as u32)?;
            }
            for x in p.tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::input("not a checkpoint (bad magic)"));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::input(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = get_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            layers: dims[0],
            hidden: dims[1],
            heads: dims[2],
            ffn: dims[3],
            vocab: dims[4],
            seq_len: dims[5],
            classes: dims[6],
            peft_width: dims[7],
        };
        let mut stack = TransformerStack::new(config, 0)?;
        let count = get_u32(&mut r)? as usize;
        if count != stack.params.len() {
            return Err(Error::input(format!(
                "checkpoint has {count} tensors, architecture needs {}",
                stack.params.len()
            )));
        }
        for p in &mut stack.params {
            let len = get_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            if name != p.name.as_bytes() {
                return Err(Error::input(format!(
                    "expected tensor `{}`, found `{}`",
                    p.name,
                    String::from_utf8_lossy(&name)
                )));
            }
            let ndims = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(get_u32(&mut r)? as usize);
            }
            if shape != p.tensor.shape() {
                return Err(Error::input(format!(
                    "tensor `{}` has shape {shape:?}, expected {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for x in p.tensor.data_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
        Ok(stack)
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
