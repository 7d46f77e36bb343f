//! Parameter checkpoints: `E2STN-CKPT1` header, a key=value config block,
//! then named tensors as (name, shape, 64-bit little-endian floats).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"E2STN-CKPT1\n";

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = model.config.to_kv();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    }
    crate::data_model::write_atomic(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a checkpoint into a model of scalar type `T`. The stored config is
/// used to rebuild the parameter layout, then every tensor is filled by
/// name; name or shape mismatches are format errors.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(MAGIC) {
        return Err(Error::format(path, "missing E2STN-CKPT1 header"));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: MAGIC.len(),
        path,
    };
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
    let config = ModelConfig::from_kv(cfg_text)?;
    let mut model = Model::<T>::new(config, 0)?;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::format(
            path,
            format!(
                "{} tensors in file, model expects {}",
                count,
                model.store.len()
            ),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let x = r.f64()?;
            if !x.is_finite() {
                return Err(Error::format(path, format!("non-finite value in '{name}'")));
            }
            data.push(T::from_f64(x));
        }
        let id = model
            .store
            .id_by_name(&name)
            .ok_or_else(|| Error::format(path, format!("unknown tensor '{name}'")))?;
        if seen[id.0] {
            return Err(Error::format(path, format!("duplicate tensor '{name}'")));
        }
        seen[id.0] = true;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    shape,
                    model.store.get(id).shape()
                ),
            ));
        }
        *model.store.get_mut(id) = Tensor::from_vec(&shape, data);
    }
    Ok(model)
}

/// Forwarding writer used when checkpoints are embedded in other streams.
#[allow(dead_code)]
fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
