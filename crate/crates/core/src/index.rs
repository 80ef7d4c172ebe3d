//! Exact inner-product search over a flat f32 store.
//!
//! Ranking is by f32 score descending, ties by ascending doc id, so results
//! are a total order independent of insertion order.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingRecord, Modality};

const MAGIC: &[u8; 4] = b"UMRE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    modalities: Vec<Modality>,
    data: Vec<f32>,
    pool_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f32,
    pub rank: usize,
    pub modality: Modality,
}

impl VectorIndex {
    /// An empty index takes its dimension from the first record, or 0.
    pub fn build(records: &[EmbeddingRecord], pool_tag: &str) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        let mut seen = HashSet::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in records {
            if r.vector.len() != dim {
                return Err(Error::DimMismatch {
                    context: format!("embedding {}", r.id),
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            data.extend_from_slice(&r.vector);
        }
        Ok(VectorIndex {
            dim,
            ids: records.iter().map(|r| r.id.clone()).collect(),
            modalities: records.iter().map(|r| r.modality).collect(),
            data,
            pool_tag: pool_tag.to_string(),
        })
    }

    /// Union of several pools; ids must stay unique across them.
    pub fn merge(indexes: &[VectorIndex], pool_tag: &str) -> Result<Self> {
        let records: Vec<EmbeddingRecord> = indexes.iter().flat_map(|ix| ix.records()).collect();
        Self::build(&records, pool_tag)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pool_tag(&self) -> &str {
        &self.pool_tag
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.len()).map(move |i| EmbeddingRecord {
            id: self.ids[i].clone(),
            modality: self.modalities[i],
            vector: self.vector(i).to_vec(),
        })
    }

    fn score(&self, i: usize, query: &[f32]) -> f32 {
        self.vector(i)
            .iter()
            .zip(query)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum::<f64>() as f32
    }

    fn order(&self, a: &(usize, f32), b: &(usize, f32)) -> Ordering {
        b.1.total_cmp(&a.1)
            .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
    }

    /// Exact top-`k`, at most `len()` hits.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if query.len() != self.dim && !self.is_empty() {
            return Err(Error::DimMismatch {
                context: "query vector".into(),
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(usize, f32)> =
            (0..self.len()).map(|i| (i, self.score(i, query))).collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| self.order(a, b));
            scored.truncate(k);
        }
        scored.sort_unstable_by(|a, b| self.order(a, b));
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (i, score))| SearchHit {
                doc_id: self.ids[i].clone(),
                score,
                rank: r + 1,
                modality: self.modalities[i],
            })
            .collect())
    }

    pub fn search_batch(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<SearchHit>>> {
        queries.par_iter().map(|q| self.search(q, k)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_store(&mut w, self.dim, self.records())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, pool_tag: &str) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let records = read_store(std::io::BufReader::new(f))?;
        Self::build(&records, pool_tag)
    }
}

/// Write the binary embedding store.
pub fn write_store<W: Write>(
    mut w: W,
    dim: usize,
    records: impl IntoIterator<Item = EmbeddingRecord>,
) -> Result<()> {
    let records: Vec<EmbeddingRecord> = records.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in &records {
        if r.vector.len() != dim {
            return Err(Error::DimMismatch {
                context: format!("embedding {}", r.id),
                expected: dim,
                got: r.vector.len(),
            });
        }
        let id = r.id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::parse("embedding store", format!("id too long: {}", r.id)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[r.modality.to_byte()])?;
        for x in &r.vector {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_store<R: Read>(mut r: R) -> Result<Vec<EmbeddingRecord>> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)?;
        Ok(b)
    }
    if &take::<4>(&mut r)? != MAGIC {
        return Err(Error::parse("embedding store", "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::parse(
            "embedding store",
            format!("unsupported version {version}"),
        ));
    }
    let dim = u32::from_le_bytes(take(&mut r)?) as usize;
    let count = u64::from_le_bytes(take(&mut r)?);
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::parse("embedding store id", e))?;
        let modality = Modality::from_byte(take::<1>(&mut r)?[0])
            .ok_or_else(|| Error::parse("embedding store", "bad modality byte"))?;
        let mut buf = vec![0u8; dim * 4];
        r.read_exact(&mut buf)?;
        let vector = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        out.push(EmbeddingRecord::new(id, modality, vector)?);
    }
    Ok(out)
}
