//! Hierarchical navigable small-world graph for inner-product search.
//!
//! Inner product is reduced to Euclidean search by appending
//! `sqrt(R^2 - |x|^2)` to every stored vector (`R` = largest stored norm) and
//! `0` to the query. On the augmented vectors all stored points have norm
//! `R`, so Euclidean order equals augmented inner-product order, and the
//! graph is built and searched by maximizing augmented inner products.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAX_LEVEL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Seed of the level-assignment generator.
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::contract(format!(
                "HNSW needs m >= 2 and positive ef values, got {self:?}"
            )));
        }
        if self.m > u32::MAX as usize / 2 {
            return Err(Error::contract("HNSW m too large"));
        }
        Ok(())
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// Candidate ordered by similarity, then by lower node index.
#[derive(Clone, Copy, Debug)]
struct Near {
    sim: f32,
    node: u32,
}

impl PartialEq for Near {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Near {}
impl PartialOrd for Near {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Near {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then(other.node.cmp(&self.node))
    }
}

/// Per-thread visited marks, reset in O(1) by bumping the generation.
#[derive(Default)]
struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// Marks `i`; true if it was not yet visited.
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.generation {
            false
        } else {
            *m = self.generation;
            true
        }
    }
}

thread_local! {
    static VISITED: RefCell<Visited> = RefCell::new(Visited::default());
}

fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HnswGraph {
    params: HnswParams,
    dim: usize,
    /// Augmented vectors, stride `dim + 1`.
    aug: Vec<f32>,
    levels: Vec<u8>,
    /// `links[node][layer]`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
}

fn augment(vectors: &[f32], dim: usize) -> Vec<f32> {
    let n = vectors.len() / dim;
    let norms: Vec<f64> = vectors
        .chunks_exact(dim)
        .map(|v| v.iter().map(|&x| x as f64 * x as f64).sum())
        .collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let mut aug = Vec::with_capacity(n * (dim + 1));
    for (v, nsq) in vectors.chunks_exact(dim).zip(&norms) {
        aug.extend_from_slice(v);
        aug.push((max - nsq).max(0.0).sqrt() as f32);
    }
    aug
}

impl HnswGraph {
    pub fn params(&self) -> HnswParams {
        self.params
    }

    fn len(&self) -> usize {
        self.levels.len()
    }

    fn point(&self, i: u32) -> &[f32] {
        let s = self.dim + 1;
        &self.aug[i as usize * s..(i as usize + 1) * s]
    }

    fn sim_nodes(&self, a: u32, b: u32) -> f32 {
        dot32(self.point(a), self.point(b))
    }

    pub fn build(vectors: &[f32], dim: usize, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let n = vectors.len() / dim;
        if n > u32::MAX as usize {
            return Err(Error::contract("too many vectors for a 32-bit graph"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let levels: Vec<u8> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL) as u8
            })
            .collect();
        let mut g = Self {
            params,
            dim,
            aug: augment(vectors, dim),
            links: levels
                .iter()
                .map(|&l| vec![Vec::new(); l as usize + 1])
                .collect(),
            levels,
            entry: 0,
            max_level: 0,
        };
        VISITED.with(|v| {
            let mut visited = v.borrow_mut();
            for i in 0..n as u32 {
                g.insert(i, &mut visited);
            }
        });
        Ok(g)
    }

    fn insert(&mut self, q: u32, visited: &mut Visited) {
        let level = self.levels[q as usize] as usize;
        if q == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let point = self.point(q).to_vec();
        let sim = |g: &Self, i: u32| dot32(&point, g.point(i));
        let mut eps = vec![Near {
            sim: sim(self, self.entry),
            node: self.entry,
        }];
        for layer in (level + 1..=self.max_level).rev() {
            eps = self.search_layer(|i| sim(self, i), &eps, 1, layer, visited);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(|i| sim(self, i), &eps, self.params.ef_construction, layer, visited);
            let chosen = self.select(&found, self.params.m);
            self.links[q as usize][layer] = chosen.iter().map(|c| c.node).collect();
            let cap = self.params.max_links(layer);
            for c in &chosen {
                let n = c.node;
                self.links[n as usize][layer].push(q);
                if self.links[n as usize][layer].len() > cap {
                    let mut cands: Vec<Near> = self.links[n as usize][layer]
                        .iter()
                        .map(|&o| Near {
                            sim: self.sim_nodes(n, o),
                            node: o,
                        })
                        .collect();
                    cands.sort_by(|a, b| b.cmp(a));
                    self.links[n as usize][layer] =
                        self.select(&cands, cap).iter().map(|c| c.node).collect();
                }
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = q;
        }
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every candidate already kept. `cands` must be sorted best first.
    fn select(&self, cands: &[Near], m: usize) -> Vec<Near> {
        let mut kept: Vec<Near> = Vec::with_capacity(m);
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            if kept.iter().all(|k| self.sim_nodes(c.node, k.node) < c.sim) {
                kept.push(c);
            }
        }
        kept
    }

    /// Best-first search on one layer; returns up to `ef` nodes, best first.
    fn search_layer<F>(
        &self,
        sim: F,
        entry: &[Near],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Near>
    where
        F: Fn(u32) -> f32,
    {
        visited.reset(self.len());
        let mut cands: BinaryHeap<Near> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Near>> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.node) {
                cands.push(e);
                best.push(Reverse(e));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(c) = cands.pop() {
            let worst = best.peek().expect("entry set is non-empty").0;
            if best.len() >= ef && c < worst {
                break;
            }
            for &nb in &self.links[c.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Near { sim: sim(nb), node: nb };
                let worst = best.peek().expect("non-empty").0;
                if best.len() < ef || cand > worst {
                    cands.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Near> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Node indices of the approximate top-`k`, best first.
    pub fn search(&self, query: &[f32], k: usize) -> Vec<usize> {
        let sim = |i: u32| dot32(query, &self.point(i)[..self.dim]);
        VISITED.with(|v| {
            let mut visited = v.borrow_mut();
            let mut eps = vec![Near {
                sim: sim(self.entry),
                node: self.entry,
            }];
            for layer in (1..=self.max_level).rev() {
                eps = self.search_layer(sim, &eps, 1, layer, &mut visited);
            }
            let ef = self.params.ef_search.max(k);
            let mut found = self.search_layer(sim, &eps, ef, 0, &mut visited);
            found.truncate(k);
            found.into_iter().map(|n| n.node as usize).collect()
        })
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.len_u32(self.params.m);
        w.len_u32(self.params.ef_construction);
        w.len_u32(self.params.ef_search);
        w.u64(self.params.seed);
        w.u32(self.entry);
        w.len_u32(self.max_level);
        for &l in &self.levels {
            w.u8(l);
        }
        for layer in 0..=self.max_level {
            for (node, links) in self.links.iter().enumerate() {
                if self.levels[node] as usize >= layer {
                    w.len_u32(links[layer].len());
                    for &n in &links[layer] {
                        w.u32(n);
                    }
                }
            }
        }
    }

    pub fn read(r: &mut ByteReader<'_>, vectors: &[f32], dim: usize, count: usize) -> Result<Self> {
        let at = r.offset();
        let params = HnswParams {
            m: r.u32("hnsw m")? as usize,
            ef_construction: r.u32("ef_construction")? as usize,
            ef_search: r.u32("ef_search")? as usize,
            seed: r.u64("hnsw seed")?,
        };
        params
            .validate()
            .map_err(|e| Error::format(at, e.to_string()))?;
        let at = r.offset();
        let entry = r.u32("entry point")?;
        let max_level = r.u32("max level")? as usize;
        if entry as usize >= count || max_level > MAX_LEVEL {
            return Err(Error::format(at, format!("entry {entry} / max level {max_level} out of range")));
        }
        let levels_at = r.offset();
        let levels = r.take(count, "node levels")?.to_vec();
        if levels.iter().any(|&l| l as usize > max_level) || levels[entry as usize] as usize != max_level {
            return Err(Error::format(levels_at, "node levels inconsistent with the entry point"));
        }
        let mut links: Vec<Vec<Vec<u32>>> = levels
            .iter()
            .map(|&l| vec![Vec::new(); l as usize + 1])
            .collect();
        for layer in 0..=max_level {
            let cap = params.max_links(layer);
            for node in 0..count {
                if (levels[node] as usize) < layer {
                    continue;
                }
                let at = r.offset();
                let degree = r.u32("degree")? as usize;
                if degree > cap {
                    return Err(Error::format(at, format!("degree {degree} exceeds {cap}")));
                }
                let mut list = Vec::with_capacity(degree);
                for _ in 0..degree {
                    let at = r.offset();
                    let n = r.u32("neighbor")?;
                    if n as usize >= count || (levels[n as usize] as usize) < layer {
                        return Err(Error::format(at, format!("neighbor {n} invalid on layer {layer}")));
                    }
                    list.push(n);
                }
                links[node][layer] = list;
            }
        }
        Ok(Self {
            params,
            dim,
            aug: augment(vectors, dim),
            levels,
            links,
            entry,
            max_level,
        })
    }
}
