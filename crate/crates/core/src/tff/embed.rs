//! Text embedding providers and the `TEMB` container.
//!
//! ```text
//! "TEMB" | u32 count | u32 dim | count × dim f32, row-major
//! ```
//! All integers and floats little-endian; rows follow descriptor order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::datakit::derive_seed;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TEMB";

/// Where an embedding matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Stub,
    File,
}

/// `N` unit-norm rows of width `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Tensor<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingMatrix {
    pub fn count(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// Maps descriptor strings to embedding rows.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, descriptors: &[String]) -> Result<EmbeddingMatrix>;
}

/// Pass-through for boxed providers.
impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, descriptors: &[String]) -> Result<EmbeddingMatrix> {
        (**self).embed(descriptors)
    }
}

fn normalise(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    } else {
        row[0] = 1.0;
    }
}

/// Hashes byte trigrams (with boundary padding) into a fixed random
/// projection, then normalises. Same string, same seed: same row.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        ensure!(dim >= 1, "embedding width must be positive");
        Ok(Self { dim, seed })
    }

    fn row(&self, text: &str) -> Vec<f64> {
        let mut padded = vec![0u8, 0u8];
        padded.extend_from_slice(text.as_bytes());
        padded.push(0);
        let mut row = vec![0.0; self.dim];
        for tri in padded.windows(3) {
            let key = u64::from(tri[0]) | u64::from(tri[1]) << 8 | u64::from(tri[2]) << 16;
            let base = derive_seed(self.seed, key);
            for (j, slot) in row.iter_mut().enumerate() {
                let h = derive_seed(base, j as u64);
                // top 53 bits to a uniform in [-1, 1)
                *slot += (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
            }
        }
        normalise(&mut row);
        row
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, descriptors: &[String]) -> Result<EmbeddingMatrix> {
        ensure!(!descriptors.is_empty(), "cannot embed an empty descriptor list");
        let data = descriptors.iter().flat_map(|d| self.row(d)).collect();
        Ok(EmbeddingMatrix {
            rows: Tensor::new(&[descriptors.len(), self.dim], data)?,
            source: EmbeddingSource::Stub,
        })
    }
}

/// Raw `TEMB` contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TembFile {
    pub count: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl TembFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn decode_temb(bytes: &[u8]) -> Result<TembFile> {
    if bytes.len() < 12 {
        return Err(Error::format(format!("TEMB header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(format!("bad TEMB magic {:?}", &bytes[..4])));
    }
    let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let dim = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if count == 0 || dim == 0 {
        return Err(Error::format(format!("TEMB shape {count}x{dim} has a zero extent")));
    }
    let need = count * dim * 4;
    let body = &bytes[12..];
    if body.len() != need {
        return Err(Error::format(format!(
            "TEMB body is {} bytes, expected {need} for {count}x{dim}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(TembFile { count, dim, values })
}

pub fn read_temb(path: &Path) -> Result<TembFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_temb(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_temb(path: &Path, temb: &TembFile) -> Result<()> {
    ensure!(
        temb.values.len() == temb.count * temb.dim,
        "TEMB {}x{} needs {} values, got {}",
        temb.count,
        temb.dim,
        temb.count * temb.dim,
        temb.values.len()
    );
    fs::write(path, temb.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Rows read from a `TEMB` file.
///
/// Without an index, `embed` must receive exactly `count` descriptors and
/// returns the rows in file order. With an index (the descriptor list the
/// file was exported from), each descriptor is looked up by its text.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    temb: TembFile,
    index: Option<HashMap<String, usize>>,
}

impl FileEmbedder {
    pub fn new(temb: TembFile, expected_dim: Option<usize>) -> Result<Self> {
        if let Some(d) = expected_dim {
            if d != temb.dim {
                return Err(Error::format(format!(
                    "TEMB dim mismatch: expected {d}, found {}",
                    temb.dim
                )));
            }
        }
        Ok(Self { temb, index: None })
    }

    pub fn open(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        Self::new(read_temb(path)?, expected_dim)
    }

    /// Attach the descriptor list, one entry per row.
    pub fn with_index(mut self, descriptors: Vec<String>) -> Result<Self> {
        if descriptors.len() != self.temb.count {
            return Err(Error::format(format!(
                "TEMB count mismatch: expected {} rows for the descriptor list, found {}",
                descriptors.len(),
                self.temb.count
            )));
        }
        let mut map = HashMap::with_capacity(descriptors.len());
        for (i, d) in descriptors.into_iter().enumerate() {
            map.entry(d).or_insert(i);
        }
        self.index = Some(map);
        Ok(self)
    }

    pub fn temb(&self) -> &TembFile {
        &self.temb
    }
}

impl EmbeddingProvider for FileEmbedder {
    fn dim(&self) -> usize {
        self.temb.dim
    }

    fn embed(&self, descriptors: &[String]) -> Result<EmbeddingMatrix> {
        ensure!(!descriptors.is_empty(), "cannot embed an empty descriptor list");
        let rows: Vec<usize> = match &self.index {
            None => {
                if descriptors.len() != self.temb.count {
                    return Err(Error::format(format!(
                        "TEMB count mismatch: expected {}, found {}",
                        descriptors.len(),
                        self.temb.count
                    )));
                }
                (0..descriptors.len()).collect()
            }
            Some(map) => descriptors
                .iter()
                .map(|d| {
                    map.get(d)
                        .copied()
                        .ok_or_else(|| Error::format(format!("descriptor {d:?} has no row in the TEMB file")))
                })
                .collect::<Result<_>>()?,
        };
        let data = rows
            .iter()
            .flat_map(|&r| self.temb.row(r).iter().map(|&v| f64::from(v)))
            .collect();
        Ok(EmbeddingMatrix {
            rows: Tensor::new(&[rows.len(), self.temb.dim], data)?,
            source: EmbeddingSource::File,
        })
    }
}
