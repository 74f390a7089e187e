//! Checkpoint files: magic "CRKP", version, tensor count, then per tensor
//! a length-prefixed UTF-8 name, rank, u32 dims and float32 LE data.
//! Optimizer state travels under the "optim/" name prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

use super::params::Tensor;

const MAGIC: &[u8; 4] = b"CRKP";
const VERSION: u8 = 1;

pub fn save_checkpoint<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let path = path.as_ref();
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        assert!(tensor.shape.len() <= u8::MAX as usize, "tensor rank too large");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape.len() as u8);
        for &dim in &tensor.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fsutil::atomic_write(path, &out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 9 || &bytes[0..4] != MAGIC {
        return Err(fail("missing CRKP magic"));
    }
    if bytes[4] != VERSION {
        return Err(fail(&format!("unsupported version {}", bytes[4])));
    }
    let count = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let mut pos = 9;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", path.display())));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = {
            let b = take(2)?;
            u16::from_le_bytes([b[0], b[1]]) as usize
        };
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| fail("tensor name is not UTF-8"))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = take(4)?;
            shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(shape, data));
    }
    Ok(tensors)
}
