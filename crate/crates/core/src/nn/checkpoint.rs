//! Model checkpoints: initial and trained weights of every layer.
//!
//! Layout (little-endian): magic `DUALCKPT`, version `u32`, model kind `u8`
//! (0 = MLP, 1 = LSTM LM), seed `u64`, then an architecture descriptor and
//! the weight blocks. MLP: layer count `u32`, the `n + 1` layer widths as
//! `u32`, then per layer `W₀` followed by `W`. LSTM: vocab, embed and hidden
//! sizes as `u32`, then `W₀`/`W` pairs for the grouped layer, the embedding
//! and the output projection, in that order. Blocks are row-major `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

use super::lstm::LstmLmModel;
use super::mlp::MlpModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DUALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";

// Loaded once per command, so the size difference between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum ModelCheckpoint {
    Mlp(MlpModel),
    Lstm { model: LstmLmModel, seed: u64 },
}

impl ModelCheckpoint {
    pub fn seed(&self) -> u64 {
        match self {
            ModelCheckpoint::Mlp(m) => m.seed(),
            ModelCheckpoint::Lstm { seed, .. } => *seed,
        }
    }

    /// `(W₀, W)` for every recorded linear layer, indexed by layer id.
    pub fn recorded_layers(&self) -> Vec<(&DenseMatrix, &DenseMatrix)> {
        match self {
            ModelCheckpoint::Mlp(m) => m.init_layers().iter().zip(m.layers()).collect(),
            ModelCheckpoint::Lstm { model, .. } => vec![(&model.grouped_linear_init, &model.grouped_linear)],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let put_block = |out: &mut Vec<u8>, m: &DenseMatrix| {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match self {
            ModelCheckpoint::Mlp(m) => {
                out.push(0);
                out.extend_from_slice(&m.seed().to_le_bytes());
                let dims = m.dims();
                put_u32(&mut out, dims.len() - 1);
                for d in dims {
                    put_u32(&mut out, d);
                }
                for (w0, w) in m.init_layers().iter().zip(m.layers()) {
                    put_block(&mut out, w0);
                    put_block(&mut out, w);
                }
            }
            ModelCheckpoint::Lstm { model, seed } => {
                out.push(1);
                out.extend_from_slice(&seed.to_le_bytes());
                put_u32(&mut out, model.vocab);
                put_u32(&mut out, model.embed_dim);
                put_u32(&mut out, model.hidden_dim);
                for m in [
                    &model.grouped_linear_init,
                    &model.grouped_linear,
                    &model.embedding_init,
                    &model.embedding,
                    &model.output_proj_init,
                    &model.output_proj,
                ] {
                    put_block(&mut out, m);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(8, format!("unsupported checkpoint version {version}")));
        }
        let kind = r.take(1)?[0];
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let ckpt = match kind {
            0 => {
                let n = r.u32()? as usize;
                if n == 0 || n > 64 {
                    return Err(r.error(21, format!("implausible layer count {n}")));
                }
                let dims = (0..=n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let mut init = Vec::with_capacity(n);
                let mut trained = Vec::with_capacity(n);
                for i in 0..n {
                    init.push(r.block(dims[i + 1], dims[i])?);
                    trained.push(r.block(dims[i + 1], dims[i])?);
                }
                ModelCheckpoint::Mlp(MlpModel::from_parts(init, trained, seed)?)
            }
            1 => {
                let vocab = r.u32()? as usize;
                let embed = r.u32()? as usize;
                let hidden = r.u32()? as usize;
                let g0 = r.block(4 * hidden, embed + hidden)?;
                let g = r.block(4 * hidden, embed + hidden)?;
                let e0 = r.block(embed, vocab)?;
                let e = r.block(embed, vocab)?;
                let u0 = r.block(vocab, hidden)?;
                let u = r.block(vocab, hidden)?;
                let mut model = LstmLmModel::from_weights(e0, g0, u0)?;
                model.grouped_linear = g;
                model.embedding = e;
                model.output_proj = u;
                ModelCheckpoint::Lstm { model, seed }
            }
            other => return Err(r.error(12, format!("unknown model kind {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn error(&self, offset: u64, msg: impl Into<String>) -> Error {
        Error::Storage {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos as u64, "checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn block(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let start = self.pos as u64;
        let raw = self.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseMatrix::from_vec(rows, cols, data).map_err(|_| self.error(start, "non-finite weight in checkpoint"))
    }
}
