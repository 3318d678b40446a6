//! Invariants checked over randomly generated inputs.

use proptest::prelude::*;

use xmodal_core::autodiff::Tensor;
use xmodal_core::evalkit::{recall_at, RankList};
use xmodal_core::features::{FeatureFile, FeatureManifest, FeatureSequence, Modality};
use xmodal_core::index::{hit_order, inner_product, Entry, Hit, HnswParams, IndexHandle, IndexKind, Scope};
use xmodal_core::training::{all_negatives_hinge, hard_negative_hinge, SimilarityMatrix};

/// Random similarities; a random boost on the diagonal makes well-separated
/// batches as common as violating ones.
fn similarity(b: usize) -> impl Strategy<Value = SimilarityMatrix> {
    (prop::collection::vec(-1.0f64..1.0, b * b), 0.0f64..3.0).prop_map(move |(mut v, boost)| {
        for i in 0..b {
            v[i * b + i] += boost;
        }
        SimilarityMatrix::new(Tensor::matrix(b, b, v)).unwrap()
    })
}

fn any_similarity() -> impl Strategy<Value = SimilarityMatrix> {
    (2usize..8).prop_flat_map(similarity)
}

/// Zero-loss condition stated directly: every positive beats every
/// negative in its row and column by at least the margin.
fn separated(s: &SimilarityMatrix, margin: f64) -> bool {
    let b = s.size();
    (0..b).all(|i| {
        let pos = s.0.get(i, i);
        (0..b)
            .filter(|&j| j != i)
            .all(|j| margin + s.0.get(i, j) - pos <= 0.0 && margin + s.0.get(j, i) - pos <= 0.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hinge_is_non_negative(s in any_similarity(), margin in 0.0f64..1.0) {
        let r = hard_negative_hinge(&s, margin).unwrap();
        prop_assert!(r.total >= 0.0);
        prop_assert!(r.image_terms.iter().chain(&r.caption_terms).all(|&t| t >= 0.0));
    }

    #[test]
    fn hinge_is_zero_exactly_when_separated(s in any_similarity(), margin in 0.0f64..0.5) {
        let r = hard_negative_hinge(&s, margin).unwrap();
        prop_assert_eq!(r.total == 0.0, separated(&s, margin));
    }

    #[test]
    fn hinge_grows_with_margin(s in any_similarity(), a in 0.0f64..1.0, extra in 0.0f64..1.0) {
        let lo = hard_negative_hinge(&s, a).unwrap().total;
        let hi = hard_negative_hinge(&s, a + extra).unwrap().total;
        prop_assert!(lo <= hi, "{} > {}", lo, hi);
    }

    #[test]
    fn hinge_scales_with_similarities_and_margin(s in any_similarity(), margin in 0.0f64..1.0, c in 0.1f64..10.0) {
        let base = hard_negative_hinge(&s, margin).unwrap().total;
        let scaled = SimilarityMatrix::new(Tensor::matrix(
            s.size(),
            s.size(),
            s.0.data().iter().map(|x| c * x).collect(),
        ))
        .unwrap();
        let got = hard_negative_hinge(&scaled, c * margin).unwrap().total;
        prop_assert!((got - c * base).abs() <= 1e-9 * (1.0 + c * base), "{} vs {}", got, c * base);
    }

    #[test]
    fn all_negatives_bound_the_hardest(s in any_similarity(), margin in 0.0f64..1.0) {
        let hard = hard_negative_hinge(&s, margin).unwrap().total;
        let (all, _) = all_negatives_hinge(&s, margin).unwrap();
        prop_assert!(all >= hard - 1e-12);
    }
}

/// Small integer coordinates make score ties common.
fn entries(modalities: &'static [Modality]) -> impl Strategy<Value = (usize, Vec<Entry>)> {
    (1usize..6, 1usize..40).prop_flat_map(move |(dim, n)| {
        let one = (
            0u64..20,
            prop::sample::select(modalities),
            prop::collection::vec(-2i8..=2, dim),
        )
            .prop_map(|(id, modality, v)| Entry {
                id,
                modality,
                vector: v.into_iter().map(f32::from).collect(),
            });
        (Just(dim), prop::collection::vec(one, n))
    })
}

fn oracle(entries: &[Entry], q: &[f32], k: usize) -> Vec<Hit> {
    let mut all: Vec<Hit> = entries
        .iter()
        .map(|e| Hit {
            id: e.id,
            modality: e.modality,
            score: inner_product(q, &e.vector),
        })
        .collect();
    all.sort_by(hit_order);
    all.truncate(k);
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn flat_knn_matches_sort_oracle(
        (dim, es) in entries(&[Modality::Text, Modality::Image]),
        q in prop::collection::vec(-2i8..=2, 6),
        k in 1usize..50,
    ) {
        let q: Vec<f32> = q.into_iter().take(dim).map(f32::from).collect();
        let expected = oracle(&es, &q, k);
        let index = IndexHandle::build(es.clone(), Scope::Joint, IndexKind::Flat, 0).unwrap();
        let got = index.knn(&q, k).unwrap();
        prop_assert_eq!(got.truncated, k > es.len());
        prop_assert_eq!(got.hits.len(), expected.len());
        for (g, e) in got.hits.iter().zip(&expected) {
            prop_assert_eq!(g.id, e.id);
            prop_assert_eq!(g.modality, e.modality);
            prop_assert_eq!(g.score.to_bits(), e.score.to_bits());
        }
    }

    #[test]
    fn flat_knn_results_are_prefixes(
        (dim, es) in entries(&[Modality::Image]),
        q in prop::collection::vec(-2i8..=2, 6),
        k in 1usize..40,
    ) {
        let q: Vec<f32> = q.into_iter().take(dim).map(f32::from).collect();
        let index = IndexHandle::build(es, Scope::Single(Modality::Image), IndexKind::Flat, 0).unwrap();
        let small = index.knn(&q, k).unwrap().hits;
        let large = index.knn(&q, k + 5).unwrap().hits;
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn index_bytes_round_trip((_, es) in entries(&[Modality::Text]), hnsw in any::<bool>(), fp in any::<u64>()) {
        let kind = if hnsw {
            IndexKind::Hnsw(HnswParams { m: 4, ef_construction: 16, ef_search: 8, seed: 1 })
        } else {
            IndexKind::Flat
        };
        let index = IndexHandle::build(es, Scope::Single(Modality::Text), kind, fp).unwrap();
        let bytes = index.to_bytes();
        let back = IndexHandle::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, index);
    }

    #[test]
    fn truncated_index_is_rejected((_, es) in entries(&[Modality::Text]), cut in any::<prop::sample::Index>()) {
        let bytes = IndexHandle::build(es, Scope::Single(Modality::Text), IndexKind::Flat, 0)
            .unwrap()
            .to_bytes();
        let n = cut.index(bytes.len());
        prop_assert!(IndexHandle::from_bytes(&bytes[..n]).is_err());
    }

    #[test]
    fn feature_file_round_trip(
        raw_dim in 1usize..6,
        lens in prop::collection::vec(1usize..5, 0..6),
        seed in any::<u64>(),
    ) {
        let mut x = seed;
        let mut next = move || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // exactly representable in f32
            f64::from((x >> 40) as u16) / 256.0
        };
        let records = lens
            .iter()
            .map(|&l| {
                let data = (0..l * raw_dim).map(|_| next()).collect();
                FeatureSequence::new(Modality::Image, Tensor::matrix(l, raw_dim, data)).unwrap()
            })
            .collect();
        let f = FeatureFile::new(Modality::Image, raw_dim, records).unwrap();
        let bytes = f.to_bytes();
        let back = FeatureFile::from_bytes(&bytes, FeatureManifest::default()).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, f);
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..60, 1..80), k in 1usize..50) {
        let r = RankList(ranks);
        let a = recall_at(&r, k);
        let b = recall_at(&r, k + 1);
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!(a <= b);
    }
}
