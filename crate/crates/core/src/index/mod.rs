//! Inner-product vector indices: exact flat scan and HNSW.
//!
//! Vectors are stored as `f32`. A score is the `f64` sum, in coordinate
//! order, of the `f64` products of the `f32` query and stored coordinates, so
//! the flat scan is reproducible by any independent implementation. Results
//! are ordered by descending score, then ascending record id, then modality
//! tag.

mod hnsw;
mod scaling;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::Modality;

pub use hnsw::HnswParams;
use hnsw::HnswGraph;
pub use scaling::{measure_query_scaling, ScalingReport, ScalingRow};

pub const INDEX_MAGIC: &[u8; 4] = b"XIDX";
pub const INDEX_VERSION: u32 = 1;
const FORMAT_FLAT: u8 = 0;
const FORMAT_HNSW: u8 = 1;
const METRIC_INNER_PRODUCT: u8 = 0;
const SCOPE_SINGLE: u8 = 0;
const SCOPE_JOINT: u8 = 1;
const NO_MODALITY: u8 = 0xff;
/// Bytes before the first entry.
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 4 + 8 + 1 + 1 + 8;

/// Which modalities an index may hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Single(Modality),
    Joint,
}

/// One stored vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: u64,
    pub modality: Modality,
    pub vector: Vec<f32>,
}

impl Entry {
    pub fn from_f64(id: u64, modality: Modality, vector: &[f64]) -> Self {
        Self {
            id,
            modality,
            vector: vector.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexKind {
    Flat,
    Hnsw(HnswParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub modality: Modality,
    pub score: f64,
}

/// Ordered hits; `truncated` is set when fewer than the requested `k` exist.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    pub truncated: bool,
}

/// Inner product of two `f32` vectors accumulated in `f64`.
pub fn inner_product(q: &[f32], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Result order: higher score first, then lower id, then lower modality tag.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.id.cmp(&b.id))
        .then(a.modality.tag().cmp(&b.modality.tag()))
}

/// Heap item ordered so the *worst* hit is the maximum.
struct Worst(Hit);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        hit_order(&self.0, &other.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexHandle {
    dim: usize,
    scope: Scope,
    fingerprint: u64,
    ids: Vec<u64>,
    modalities: Vec<Modality>,
    /// Row-major `count × dim`.
    vectors: Vec<f32>,
    graph: Option<HnswGraph>,
}

impl IndexHandle {
    pub fn build(entries: Vec<Entry>, scope: Scope, kind: IndexKind, fingerprint: u64) -> Result<Self> {
        let dim = entries
            .first()
            .ok_or_else(|| Error::contract("cannot index zero vectors"))?
            .vector
            .len();
        if dim == 0 {
            return Err(Error::contract("cannot index zero-length vectors"));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut modalities = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for e in entries {
            if e.vector.len() != dim {
                return Err(Error::contract(format!(
                    "record {} has dimension {}, index has {dim}",
                    e.id,
                    e.vector.len()
                )));
            }
            if let Scope::Single(m) = scope {
                if e.modality != m {
                    return Err(Error::contract(format!(
                        "record {} is {}, index holds only {}",
                        e.id,
                        e.modality.name(),
                        m.name()
                    )));
                }
            }
            if e.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::degenerate(format!("record {} has non-finite values", e.id)));
            }
            ids.push(e.id);
            modalities.push(e.modality);
            vectors.extend_from_slice(&e.vector);
        }
        let graph = match kind {
            IndexKind::Flat => None,
            IndexKind::Hnsw(p) => Some(HnswGraph::build(&vectors, dim, p)?),
        };
        Ok(Self {
            dim,
            scope,
            fingerprint,
            ids,
            modalities,
            vectors,
            graph,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn kind(&self) -> IndexKind {
        match &self.graph {
            None => IndexKind::Flat,
            Some(g) => IndexKind::Hnsw(g.params()),
        }
    }

    pub fn entry(&self, i: usize) -> Entry {
        Entry {
            id: self.ids[i],
            modality: self.modalities[i],
            vector: self.vector(i).to_vec(),
        }
    }

    fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn hit(&self, i: usize, q: &[f32]) -> Hit {
        Hit {
            id: self.ids[i],
            modality: self.modalities[i],
            score: inner_product(q, self.vector(i)),
        }
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::Dimension {
                op: "knn",
                left: vec![q.len()],
                right: vec![self.dim],
            });
        }
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        Ok(())
    }

    /// Top-`k` by inner product. HNSW indices search approximately; the
    /// returned hits always carry exact scores.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<QueryResult> {
        match &self.graph {
            None => self.knn_exact(query, k),
            Some(g) => {
                self.check_query(query, k)?;
                let mut hits: Vec<Hit> = g
                    .search(query, k)
                    .into_iter()
                    .map(|i| self.hit(i, query))
                    .collect();
                hits.sort_by(hit_order);
                Ok(QueryResult {
                    hits,
                    truncated: k > self.len(),
                })
            }
        }
    }

    /// Exact top-`k` by scanning every vector, whatever the index kind.
    pub fn knn_exact(&self, query: &[f32], k: usize) -> Result<QueryResult> {
        self.check_query(query, k)?;
        let keep = k.min(self.len());
        let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(keep + 1);
        for i in 0..self.len() {
            let h = self.hit(i, query);
            if heap.len() < keep {
                heap.push(Worst(h));
            } else if hit_order(&h, &heap.peek().expect("keep >= 1").0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(h));
            }
        }
        Ok(QueryResult {
            hits: heap.into_sorted_vec().into_iter().map(|w| w.0).collect(),
            truncated: k > self.len(),
        })
    }

    pub fn knn_f64(&self, query: &[f64], k: usize) -> Result<QueryResult> {
        let q: Vec<f32> = query.iter().map(|&x| x as f32).collect();
        self.knn(&q, k)
    }

    /// Byte range of the entry table inside [`IndexHandle::to_bytes`].
    pub fn payload_range(&self) -> Range<usize> {
        HEADER_LEN..HEADER_LEN + self.len() * (8 + 1 + 4 * self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u8(if self.graph.is_some() { FORMAT_HNSW } else { FORMAT_FLAT });
        w.u8(METRIC_INNER_PRODUCT);
        w.len_u32(self.dim);
        w.u64(self.len() as u64);
        match self.scope {
            Scope::Single(m) => {
                w.u8(SCOPE_SINGLE);
                w.u8(m.tag());
            }
            Scope::Joint => {
                w.u8(SCOPE_JOINT);
                w.u8(NO_MODALITY);
            }
        }
        w.u64(self.fingerprint);
        for i in 0..self.len() {
            w.u64(self.ids[i]);
            w.u8(self.modalities[i].tag());
            for &x in self.vector(i) {
                w.f32(x);
            }
        }
        if let Some(g) = &self.graph {
            g.write(&mut w);
        }
        w.finish()
    }

    /// Parses an index file. The fingerprint is read but not checked here.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let format = r.u8("format tag")?;
        if format != FORMAT_FLAT && format != FORMAT_HNSW {
            return Err(Error::format(at, format!("unknown format tag {format}")));
        }
        let at = r.offset();
        let metric = r.u8("metric tag")?;
        if metric != METRIC_INNER_PRODUCT {
            return Err(Error::format(at, format!("unknown metric tag {metric}")));
        }
        let at = r.offset();
        let dim = r.u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::format(at, "dimension 0"));
        }
        let at = r.offset();
        let count = r.u64("count")?;
        let entry_len = 8 + 1 + 4 * dim as u64;
        if count == 0 || count.saturating_mul(entry_len) > r.remaining() as u64 {
            return Err(Error::format(
                at,
                format!("count {count} does not fit the {} remaining bytes", r.remaining()),
            ));
        }
        let count = count as usize;
        let at = r.offset();
        let scope_tag = r.u8("scope tag")?;
        let mod_tag = r.u8("scope modality")?;
        let scope = match (scope_tag, Modality::from_tag(mod_tag)) {
            (SCOPE_SINGLE, Some(m)) => Scope::Single(m),
            (SCOPE_JOINT, None) if mod_tag == NO_MODALITY => Scope::Joint,
            _ => {
                return Err(Error::format(
                    at,
                    format!("bad scope tag {scope_tag}/{mod_tag}"),
                ))
            }
        };
        let fingerprint = r.u64("fingerprint")?;
        let mut ids = Vec::with_capacity(count);
        let mut modalities = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for _ in 0..count {
            ids.push(r.u64("record id")?);
            let at = r.offset();
            let tag = r.u8("modality tag")?;
            let m = Modality::from_tag(tag)
                .ok_or_else(|| Error::format(at, format!("bad modality tag {tag}")))?;
            if matches!(scope, Scope::Single(s) if s != m) {
                return Err(Error::format(at, "entry modality differs from index scope"));
            }
            modalities.push(m);
            for _ in 0..dim {
                vectors.push(r.f32("vector")?);
            }
        }
        let graph = if format == FORMAT_HNSW {
            Some(HnswGraph::read(&mut r, &vectors, dim, count)?)
        } else {
            None
        };
        r.expect_end()?;
        Ok(Self {
            dim,
            scope,
            fingerprint,
            ids,
            modalities,
            vectors,
            graph,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `n` vectors drawn uniformly from the unit sphere in `d` dimensions.
pub fn random_unit_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| (x / norm) as f32).collect();
            }
        })
        .collect()
}

/// Fraction of the exact top-`k` ids found by an approximate result list.
pub fn recall_against(exact: &QueryResult, approx: &QueryResult) -> f64 {
    if exact.hits.is_empty() {
        return 1.0;
    }
    let found = exact
        .hits
        .iter()
        .filter(|h| approx.hits.iter().any(|a| a.id == h.id && a.modality == h.modality))
        .count();
    found as f64 / exact.hits.len() as f64
}
