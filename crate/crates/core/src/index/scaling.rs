//! Query-latency measurements for flat and HNSW search.

use std::time::Instant;

use serde::Serialize;

use super::{random_unit_vectors, Entry, HnswParams, IndexHandle, IndexKind, Scope};
use crate::error::{Error, Result};
use crate::features::Modality;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub flat_mean_us: f64,
    pub hnsw_mean_us: f64,
    pub hnsw_over_flat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub dim: usize,
    pub k: usize,
    pub queries: usize,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    /// Latency growth from the first to the last size: `(flat, hnsw)`.
    pub fn growth_factors(&self) -> Option<(f64, f64)> {
        let (a, b) = (self.rows.first()?, self.rows.last()?);
        Some((b.flat_mean_us / a.flat_mean_us, b.hnsw_mean_us / a.hnsw_mean_us))
    }
}

const PASSES: usize = 5;

fn pass_us(index: &IndexHandle, queries: &[Vec<f32>], k: usize, exact: bool) -> Result<f64> {
    let start = Instant::now();
    for q in queries {
        let r = if exact { index.knn_exact(q, k)? } else { index.knn(q, k)? };
        std::hint::black_box(r);
    }
    Ok(start.elapsed().as_secs_f64() * 1e6 / queries.len() as f64)
}

/// Builds random unit-vector indices of every size and times `n_queries`
/// top-`k` queries against each, exactly and through HNSW. Passes are
/// interleaved across sizes and methods and each mean is the fastest pass,
/// so drift in machine speed hits every measurement alike.
pub fn measure_query_scaling(
    sizes: &[usize],
    dim: usize,
    k: usize,
    n_queries: usize,
    params: HnswParams,
    seed: u64,
) -> Result<ScalingReport> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.first() == Some(&0) {
        return Err(Error::contract("sizes must be positive and strictly ascending"));
    }
    if n_queries == 0 {
        return Err(Error::contract("need at least one query"));
    }
    let queries = random_unit_vectors(n_queries, dim, seed ^ 0xfeed);
    let mut indices = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let entries: Vec<Entry> = random_unit_vectors(n, dim, seed.wrapping_add(n as u64))
            .into_iter()
            .enumerate()
            .map(|(i, vector)| Entry {
                id: i as u64,
                modality: Modality::Image,
                vector,
            })
            .collect();
        indices.push(IndexHandle::build(entries, Scope::Single(Modality::Image), IndexKind::Hnsw(params), 0)?);
    }
    // one untimed pass warms caches and the visited-list allocation
    for index in &indices {
        for q in queries.iter().take(8) {
            index.knn(q, k)?;
        }
    }
    let mut best = vec![[f64::INFINITY; 2]; sizes.len()];
    for _ in 0..PASSES {
        for (index, b) in indices.iter().zip(&mut best) {
            b[0] = b[0].min(pass_us(index, &queries, k, true)?);
            b[1] = b[1].min(pass_us(index, &queries, k, false)?);
        }
    }
    let rows = sizes
        .iter()
        .zip(&best)
        .map(|(&n, &[flat_mean_us, hnsw_mean_us])| {
            log::info!("n={n}: flat {flat_mean_us:.1} us, hnsw {hnsw_mean_us:.1} us");
            ScalingRow {
                n,
                flat_mean_us,
                hnsw_mean_us,
                hnsw_over_flat: hnsw_mean_us / flat_mean_us,
            }
        })
        .collect();
    Ok(ScalingReport {
        dim,
        k,
        queries: n_queries,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_vector_sizes() {
        let r = measure_query_scaling(&[1, 2], 4, 1, 3, HnswParams::default(), 0).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.flat_mean_us >= 0.0));
    }

    #[test]
    fn unsorted_sizes_rejected() {
        assert!(measure_query_scaling(&[10, 5], 4, 1, 3, HnswParams::default(), 0).is_err());
    }
}
