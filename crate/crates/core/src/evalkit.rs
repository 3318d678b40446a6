//! Retrieval and reader evaluation: bidirectional Recall@K over image pools
//! and accuracy-versus-k sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::alignment::AlignmentModel;
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::index::{Entry, HnswParams, IndexHandle, IndexKind, Scope};
use crate::reader::{eval_reader, CaptionSource, ReaderDataset, ReaderModel};
use crate::training::ImageGroup;

/// 1-based rank of the best-ranked ground-truth item, per query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankList(pub Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    #[serde(rename = "text_to_image")]
    TextToImage,
    #[serde(rename = "image_to_text")]
    ImageToText,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::TextToImage => "text_to_image",
            Direction::ImageToText => "image_to_text",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
    pub folds: usize,
}

/// Percentage of ranks that are at most `k`.
pub fn recall_at(ranks: &RankList, k: usize) -> f64 {
    100.0 * ranks.0.iter().filter(|&&r| r <= k).count() as f64 / ranks.0.len() as f64
}

pub fn recall_at_k(ranks: &RankList, direction: Direction) -> Result<RecallReport> {
    if ranks.0.is_empty() {
        return Err(Error::contract("recall over zero queries"));
    }
    if ranks.0.contains(&0) {
        return Err(Error::contract("ranks are 1-based"));
    }
    Ok(RecallReport {
        direction,
        r1: recall_at(ranks, 1),
        r5: recall_at(ranks, 5),
        r10: recall_at(ranks, 10),
        queries: ranks.0.len(),
        folds: 1,
    })
}

/// How pool queries are answered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Hnsw(HnswParams),
}

/// Embeddings of one pool: every image and every caption with its owner.
struct PoolIndex {
    images: IndexHandle,
    captions: IndexHandle,
    caption_owner: Vec<usize>,
    image_queries: Vec<Vec<f32>>,
    caption_queries: Vec<Vec<f32>>,
}

fn encode_pool(model: &AlignmentModel, pool: &[ImageGroup], mode: SearchMode) -> Result<PoolIndex> {
    if pool.is_empty() || pool.iter().any(|g| g.captions.is_empty()) {
        return Err(Error::contract("pool needs at least one image, each with a caption"));
    }
    let kind = match mode {
        SearchMode::Exact => IndexKind::Flat,
        SearchMode::Hnsw(p) => IndexKind::Hnsw(p),
    };
    let fp = model.fingerprint();
    let mut img_entries = Vec::with_capacity(pool.len());
    let mut cap_entries = Vec::new();
    let mut caption_owner = Vec::new();
    for (i, g) in pool.iter().enumerate() {
        let e = model.encode(&g.image)?;
        img_entries.push(Entry::from_f64(i as u64, Modality::Image, &e.vector));
        for c in &g.captions {
            let e = model.encode_caption(c)?;
            cap_entries.push(Entry::from_f64(caption_owner.len() as u64, Modality::Text, &e.vector));
            caption_owner.push(i);
        }
    }
    let image_queries = img_entries.iter().map(|e| e.vector.clone()).collect();
    let caption_queries = cap_entries.iter().map(|e| e.vector.clone()).collect();
    Ok(PoolIndex {
        images: IndexHandle::build(img_entries, Scope::Single(Modality::Image), kind, fp)?,
        captions: IndexHandle::build(cap_entries, Scope::Single(Modality::Text), kind, fp)?,
        caption_owner,
        image_queries,
        caption_queries,
    })
}

/// Rank lists for both directions over one pool. A ground truth missing from
/// an approximate result list is ranked one past the end.
fn pool_ranks(p: &PoolIndex) -> Result<(RankList, RankList)> {
    let n_img = p.images.len();
    let mut t2i = Vec::with_capacity(p.caption_queries.len());
    for (c, q) in p.caption_queries.iter().enumerate() {
        let r = p.images.knn(q, n_img)?;
        let owner = p.caption_owner[c] as u64;
        let rank = r.hits.iter().position(|h| h.id == owner).map_or(n_img + 1, |i| i + 1);
        t2i.push(rank);
    }
    let n_cap = p.captions.len();
    let mut i2t = Vec::with_capacity(n_img);
    for (i, q) in p.image_queries.iter().enumerate() {
        let r = p.captions.knn(q, n_cap)?;
        let rank = r
            .hits
            .iter()
            .position(|h| p.caption_owner[h.id as usize] == i)
            .map_or(n_cap + 1, |j| j + 1);
        i2t.push(rank);
    }
    Ok((RankList(t2i), RankList(i2t)))
}

/// Both directions over one evaluation, averaged over folds when `folds > 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BidirectionalReport {
    pub text_to_image: RecallReport,
    pub image_to_text: RecallReport,
    pub per_fold: Vec<(RecallReport, RecallReport)>,
}

impl BidirectionalReport {
    /// CSV with columns `direction,k,value,fold`; the fold column is `mean` for averages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,k,value,fold\n");
        let mut rows = |r: &RecallReport, fold: &str| {
            for (k, v) in [(1, r.r1), (5, r.r5), (10, r.r10)] {
                let _ = writeln!(s, "{},{k},{v:.4},{fold}", r.direction.name());
            }
        };
        for (i, (a, b)) in self.per_fold.iter().enumerate() {
            rows(a, &i.to_string());
            rows(b, &i.to_string());
        }
        rows(&self.text_to_image, "mean");
        rows(&self.image_to_text, "mean");
        s
    }
}

fn average(reports: &[RecallReport]) -> RecallReport {
    let n = reports.len() as f64;
    RecallReport {
        direction: reports[0].direction,
        r1: reports.iter().map(|r| r.r1).sum::<f64>() / n,
        r5: reports.iter().map(|r| r.r5).sum::<f64>() / n,
        r10: reports.iter().map(|r| r.r10).sum::<f64>() / n,
        queries: reports.iter().map(|r| r.queries).sum(),
        folds: reports.len(),
    }
}

/// Text→Image: every caption ranks all pool images. Image→Text: every image
/// ranks all pool captions and scores its best-ranked own caption.
pub fn eval_bidirectional(
    model: &AlignmentModel,
    pool: &[ImageGroup],
    folds: usize,
    mode: SearchMode,
) -> Result<BidirectionalReport> {
    if folds == 0 || pool.len() % folds != 0 || pool.is_empty() {
        return Err(Error::contract(format!(
            "{folds} folds do not divide a pool of {}",
            pool.len()
        )));
    }
    let size = pool.len() / folds;
    let mut per_fold = Vec::with_capacity(folds);
    for f in 0..folds {
        let p = encode_pool(model, &pool[f * size..(f + 1) * size], mode)?;
        let (t2i, i2t) = pool_ranks(&p)?;
        per_fold.push((
            recall_at_k(&t2i, Direction::TextToImage)?,
            recall_at_k(&i2t, Direction::ImageToText)?,
        ));
    }
    let t: Vec<RecallReport> = per_fold.iter().map(|x| x.0).collect();
    let i: Vec<RecallReport> = per_fold.iter().map(|x| x.1).collect();
    Ok(BidirectionalReport {
        text_to_image: average(&t),
        image_to_text: average(&i),
        per_fold,
    })
}

/// Text→Image R@1 (percent) with exact search over a single fold.
pub fn text_to_image_r1(model: &AlignmentModel, pool: &[ImageGroup]) -> Result<f64> {
    Ok(eval_bidirectional(model, pool, 1, SearchMode::Exact)?.text_to_image.r1)
}

/// Reader accuracy (percent) per inference-time retrieval count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KCurve {
    pub points: Vec<(usize, f64)>,
}

impl KCurve {
    /// `(k, accuracy)` of the best point; the smallest k wins ties.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.points
            .iter()
            .copied()
            .fold(None, |best, p| match best {
                Some((_, acc)) if acc >= p.1 => best,
                _ => Some(p),
            })
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == k).map(|p| p.1)
    }

    /// Max minus min accuracy over points with `lo <= k <= hi`.
    pub fn range_over(&self, lo: usize, hi: usize) -> f64 {
        let vals: Vec<f64> = self
            .points
            .iter()
            .filter(|p| (lo..=hi).contains(&p.0))
            .map(|p| p.1)
            .collect();
        if vals.is_empty() {
            return 0.0;
        }
        vals.iter().copied().fold(f64::MIN, f64::max) - vals.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,accuracy\n");
        for (k, a) in &self.points {
            let _ = writeln!(s, "{k},{a:.4}");
        }
        s
    }

    /// Line plot of accuracy against k.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (480.0, 320.0, 48.0);
        let kmax = self.points.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
        let x = |k: usize| pad + (w - 2.0 * pad) * k as f64 / kmax;
        let y = |a: f64| h - pad - (h - 2.0 * pad) * a / 100.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#,
            w / 2.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            h - pad,
            w - pad,
            h - pad
        );
        let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
        for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{tick}</text>"#,
                pad - 4.0,
                y(tick) + 3.0
            );
        }
        for (k, _) in &self.points {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{k}</text>"#,
                x(*k),
                h - pad + 14.0
            );
        }
        let pts: Vec<String> = self
            .points
            .iter()
            .map(|(k, a)| format!("{:.1},{:.1}", x(*k), y(*a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for (k, a) in &self.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, x(*k), y(*a));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">retrieved captions k</text>"#,
            w / 2.0,
            h - 10.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Evaluates `reader` at every `k` in order.
pub fn run_k_sweep(
    reader: &ReaderModel,
    data: &ReaderDataset,
    retriever: Option<&dyn CaptionSource>,
    k_values: &[usize],
) -> Result<KCurve> {
    let points = k_values
        .iter()
        .map(|&k| Ok((k, eval_reader(reader, data, retriever, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(KCurve { points })
}

/// Writes `<stem>.csv` and `<stem>.svg` next to each other.
pub fn write_sweep(curve: &KCurve, stem: impl AsRef<Path>, title: &str) -> Result<()> {
    let stem = stem.as_ref();
    fs::write(stem.with_extension("csv"), curve.to_csv())?;
    fs::write(stem.with_extension("svg"), curve.to_svg(title))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentConfig;
    use crate::synthdata::{generate, GenSpec, Split};
    use crate::training::groups_from_corpus;

    #[test]
    fn recall_examples() {
        let r = recall_at_k(&RankList(vec![1, 3, 12, 6, 2]), Direction::TextToImage).unwrap();
        assert_eq!((r.r1, r.r5, r.r10), (20.0, 60.0, 80.0));
        let all = recall_at_k(&RankList(vec![1; 7]), Direction::ImageToText).unwrap();
        assert_eq!((all.r1, all.r5, all.r10), (100.0, 100.0, 100.0));
        assert!(recall_at_k(&RankList(vec![]), Direction::TextToImage).is_err());
    }

    fn small_model() -> AlignmentModel {
        AlignmentModel::new(AlignmentConfig {
            d: 8,
            heads: 2,
            ff: 8,
            text_buckets: 64,
            text_dim: 6,
            ..Default::default()
        })
        .unwrap()
    }

    fn pool(n: usize) -> Vec<ImageGroup> {
        let c = generate(&GenSpec {
            n_pairs: n,
            ..Default::default()
        })
        .unwrap();
        groups_from_corpus(&c, &small_model().image_features, Split::Train).unwrap()
    }

    #[test]
    fn single_image_pool_is_perfect() {
        let mut p = pool(1);
        p[0].captions.truncate(1);
        let r = eval_bidirectional(&small_model(), &p, 1, SearchMode::Exact).unwrap();
        assert_eq!(r.text_to_image.r1, 100.0);
        assert_eq!(r.image_to_text.r1, 100.0);
    }

    #[test]
    fn identical_folds_average_to_single_fold() {
        let base = pool(10);
        let m = small_model();
        let single = eval_bidirectional(&m, &base, 1, SearchMode::Exact).unwrap();
        let mut twice = base.clone();
        twice.extend(base.clone());
        let folded = eval_bidirectional(&m, &twice, 2, SearchMode::Exact).unwrap();
        assert_eq!(folded.text_to_image.r1, single.text_to_image.r1);
        assert_eq!(folded.image_to_text.r10, single.image_to_text.r10);
        assert_eq!(folded.text_to_image.folds, 2);
        assert!(eval_bidirectional(&m, &base, 3, SearchMode::Exact).is_err());
    }

    #[test]
    fn curve_helpers() {
        let c = KCurve {
            points: vec![(0, 50.0), (5, 70.0), (10, 80.0), (20, 80.0), (40, 60.0)],
        };
        assert_eq!(c.peak(), Some((10, 80.0)));
        assert_eq!(c.range_over(5, 40), 20.0);
        assert!(c.to_csv().starts_with("k,accuracy\n0,50.0000"));
        assert!(c.to_svg("t").contains("<polyline"));
    }
}
