//! Versioned checkpoint container.
//!
//! Layout (little-endian): magic `RISECKPT`, `u32` format version, `u32`
//! length + JSON model config, `u32` tensor count, then per tensor a `u32`
//! name length + name, `u32` rank, `u64` dims and the f32 values.

use std::fs;
use std::path::Path;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::SegModel;

pub const MAGIC: &[u8; 8] = b"RISECKPT";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

impl SegModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(self.config()).map_err(|e| ModelError::Format(e.to_string()))?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let params = self.params();
        out.extend_from_slice(&(params.vars().len() as u32).to_le_bytes());
        for (name, var) in params.names().iter().zip(params.vars()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = var.dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<SegModel> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(ModelError::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| ModelError::Format(format!("config: {e}")))?;
        let model = SegModel::new(config, 0)?;
        let count = r.u32()? as usize;
        let mut values = Vec::with_capacity(count);
        for expected in model.params().names().iter().take(count) {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(ModelError::Format(format!("expected tensor {expected}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
                .collect::<Vec<_>>();
            values.push(Tensor::from_vec(data, dims, model.device())?);
        }
        if r.pos != buf.len() {
            return Err(ModelError::Format("trailing bytes after the last tensor".into()));
        }
        model.set_parameters(values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SegModel> {
        let buf = fs::read(path).map_err(|e| ModelError::io(path, e))?;
        SegModel::from_bytes(&buf)
    }
}
