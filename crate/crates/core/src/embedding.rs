//! Time encoder, frozen vocabulary table and its projection onto semantic
//! prototypes, plus the portable matrix file format.

use std::fs;
use std::path::Path;

use crate::data::SegmentedBatch;
use crate::error::{Error, Result};
use crate::layers::{Builder, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// `H = F₂(GELU(F₁(segments)))`, applied to every segment independently.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    pub first: Linear,
    pub second: Linear,
}

impl TimeEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, segment_len: usize, hidden: usize, width: usize) -> Result<Self> {
        Ok(Self {
            first: b.linear("encoder.fc1", segment_len, hidden, true)?,
            second: b.linear("encoder.fc2", hidden, width, true)?,
        })
    }

    /// `[B, N, P] -> [B, N, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, segments: Var) -> Result<Var> {
        let h = self.first.forward(g, store, segments)?;
        let h = g.gelu(h)?;
        self.second.forward(g, store, h)
    }

    /// Convenience wrapper over a [`SegmentedBatch`].
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &SegmentedBatch<T>) -> Result<Var> {
        let x = g.constant(batch.tensor().clone())?;
        self.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        p
    }
}

/// Where the vocabulary table came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VocabularySource {
    SeededRandom { seed: u64 },
    Imported { path: String },
}

/// A frozen `[V × D_w]` word-embedding matrix.
#[derive(Clone, Debug)]
pub struct VocabularyTable {
    pub weight: ParamId,
    pub vocab: usize,
    pub width: usize,
    pub source: VocabularySource,
}

impl VocabularyTable {
    /// Registers `table` as a frozen parameter.
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, table: Tensor<T>, source: VocabularySource) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Format("vocabulary table must be rank 2".into()));
        }
        let (vocab, width) = (table.shape()[0], table.shape()[1]);
        let weight = store.register("vocabulary.weight", table, false)?;
        Ok(Self {
            weight,
            vocab,
            width,
            source,
        })
    }

    /// A standard-normal table drawn from `seed`.
    pub fn seeded<T: Scalar>(store: &mut ParamStore<T>, vocab: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = crate::numerics::RngState::new(seed).derive("vocabulary");
        let data = (0..vocab * width).map(|_| rng.normal::<T>()).collect();
        Self::register(
            store,
            Tensor::new([vocab, width], data)?,
            VocabularySource::SeededRandom { seed },
        )
    }
}

/// Affine map over the vocabulary axis `V → Kp`, with an optional width
/// adapter `D_w → D` for imported tables of foreign width.
#[derive(Clone, Debug)]
pub struct SemanticProjection {
    /// Weight `[V, Kp]`, bias `[Kp]`.
    pub vocab_map: Linear,
    pub width_adapter: Option<Linear>,
    pub prototypes: usize,
}

impl SemanticProjection {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        table: &VocabularyTable,
        prototypes: usize,
        width: usize,
        bias: bool,
    ) -> Result<Self> {
        if prototypes > table.vocab {
            return Err(Error::invalid(
                "project_vocabulary",
                format!("{prototypes} prototypes exceed vocabulary size {}", table.vocab),
            ));
        }
        let vocab_map = b.linear("semantic.vocab_map", table.vocab, prototypes, bias)?;
        let width_adapter = if table.width != width {
            Some(b.linear("semantic.width_adapter", table.width, width, true)?)
        } else {
            None
        };
        Ok(Self {
            vocab_map,
            width_adapter,
            prototypes,
        })
    }

    /// Computes `l₂: [Kp × D]` from the frozen table.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, table: &VocabularyTable) -> Result<Var> {
        let w = g.param(store, table.weight)?;
        let wt = g.transpose_last(w)?; // [D_w, V]
        let mixed = self.vocab_map.forward(g, store, wt)?; // [D_w, Kp]
        let l2 = g.transpose_last(mixed)?; // [Kp, D_w]
        match &self.width_adapter {
            Some(adapter) => adapter.forward(g, store, l2),
            None => Ok(l2),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.vocab_map.params();
        if let Some(a) = &self.width_adapter {
            p.extend(a.params());
        }
        p
    }
}

const MAGIC: &[u8; 4] = b"SELM";
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Payload precision of a matrix file. Version 1 stores `f32`; version 2
/// stores `f64` and is used for checkpoints that must reload bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixPrecision {
    Single,
    Double,
}

/// Encodes a rank-2 tensor in the portable matrix format.
pub fn encode_matrix<T: Scalar>(m: &Tensor<T>, precision: MatrixPrecision) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(Error::Format(format!(
            "matrix must be rank 2, got shape {:?}",
            m.shape()
        )));
    }
    let width = match precision {
        MatrixPrecision::Single => 4,
        MatrixPrecision::Double => 8,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * width);
    out.extend_from_slice(MAGIC);
    let version: u32 = match precision {
        MatrixPrecision::Single => 1,
        MatrixPrecision::Double => 2,
    };
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(m.shape()[0] as u64).to_le_bytes());
    out.extend_from_slice(&(m.shape()[1] as u64).to_le_bytes());
    for v in m.data() {
        match precision {
            MatrixPrecision::Single => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            MatrixPrecision::Double => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    Ok(out)
}

/// Decodes one matrix from the front of `bytes`, returning it and the number of bytes consumed.
pub fn decode_matrix<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let width = match version {
        1 => 4,
        2 => 8,
        v => return Err(Error::Format(format!("unsupported version {v}"))),
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .filter(|n| n.checked_mul(width).is_some())
        .ok_or_else(|| Error::Format(format!("dimension overflow: {rows} x {cols}")))?;
    let payload = count * width;
    if bytes.len() - HEADER_LEN < payload {
        return Err(Error::Format(format!(
            "truncated payload: need {payload} bytes, have {}",
            bytes.len() - HEADER_LEN
        )));
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + payload];
    let data: Vec<T> = if width == 4 {
        body.chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite matrix entry".into()));
    }
    Ok((Tensor::new([rows as usize, cols as usize], data)?, HEADER_LEN + payload))
}

/// Writes a single-precision matrix file.
pub fn write_matrix<T: Scalar>(path: impl AsRef<Path>, m: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(m, MatrixPrecision::Single)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (m, used) = decode_matrix(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after matrix payload",
            bytes.len() - used
        )));
    }
    Ok(m)
}

/// Loads a word-embedding matrix file as a frozen vocabulary table.
/// With `fallback` set, a missing file yields a seeded-random table of the
/// given `(V, D_w)` instead of an error.
pub fn load_embedding_table<T: Scalar>(
    store: &mut ParamStore<T>,
    path: impl AsRef<Path>,
    fallback: Option<(usize, usize, u64)>,
) -> Result<VocabularyTable> {
    let path = path.as_ref();
    if !path.exists() {
        if let Some((vocab, width, seed)) = fallback {
            return VocabularyTable::seeded(store, vocab, width, seed);
        }
    }
    let m = read_matrix(path)?;
    VocabularyTable::register(
        store,
        m,
        VocabularySource::Imported {
            path: path.display().to_string(),
        },
    )
}
