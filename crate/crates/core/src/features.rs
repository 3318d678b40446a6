//! Per-modality feature extractors and the binary feature file.
//!
//! Images are synthetic grid scenes: every cell becomes one row holding a
//! one-hot attribute block followed by a positional block. Captions are
//! whitespace-tokenized and looked up in a hash-bucketed embedding table, then
//! offset by a sinusoidal position code.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::sinusoidal;

pub const FEATURE_MAGIC: &[u8; 4] = b"XFEA";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" | "caption" => Ok(Modality::Text),
            _ => Err(Error::contract(format!("unknown modality {s:?}"))),
        }
    }
}

/// `[L, raw_dim]` raw features for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub rows: Tensor,
}

impl FeatureSequence {
    pub fn new(modality: Modality, rows: Tensor) -> Result<Self> {
        let (l, _) = rows.dims2()?;
        if l == 0 {
            return Err(Error::degenerate("feature sequence with no rows"));
        }
        if !rows.is_finite() {
            return Err(Error::degenerate("non-finite feature value"));
        }
        Ok(Self { modality, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw_dim(&self) -> usize {
        self.rows.cols()
    }
}

/// One object occupying a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: u16,
    /// Color index, or [`HIDDEN_COLOR`] when the image does not show it.
    pub color: u16,
    pub size: u16,
}

/// Color of an object whose color the image does not show; its color
/// block is left all zero.
pub const HIDDEN_COLOR: u16 = u16::MAX;

/// A grid of cells, row-major, each optionally holding an object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cells: Vec<Option<SceneObject>>,
}

impl SyntheticScene {
    pub fn empty(grid_rows: usize, grid_cols: usize) -> Self {
        Self {
            grid_rows,
            grid_cols,
            cells: vec![None; grid_rows * grid_cols],
        }
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, &SceneObject)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|o| (i, o)))
    }
}

/// Frozen, deterministic image feature extractor for [`SyntheticScene`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageExtractor {
    pub n_shapes: usize,
    pub n_colors: usize,
    pub n_sizes: usize,
    pub pos_dim: usize,
    pub positional: bool,
}

impl ImageExtractor {
    pub fn new(n_shapes: usize, n_colors: usize, n_sizes: usize) -> Self {
        Self {
            n_shapes,
            n_colors,
            n_sizes,
            pos_dim: 8,
            positional: true,
        }
    }

    /// Width of the attribute block (shape incl. "empty", color, size).
    pub fn attr_dim(&self) -> usize {
        self.n_shapes + 1 + self.n_colors + self.n_sizes
    }

    pub fn raw_dim(&self) -> usize {
        self.attr_dim() + self.pos_dim
    }

    pub fn extract(&self, scene: &SyntheticScene) -> Result<FeatureSequence> {
        let cells = scene.grid_rows * scene.grid_cols;
        if cells == 0 || scene.cells.is_empty() {
            return Err(Error::degenerate("scene has no cells"));
        }
        if scene.cells.len() != cells {
            return Err(Error::contract(format!(
                "scene declares {cells} cells but holds {}",
                scene.cells.len()
            )));
        }
        let dim = self.raw_dim();
        let half = self.pos_dim / 2;
        let mut data = vec![0.0; cells * dim];
        for (i, cell) in scene.cells.iter().enumerate() {
            let row = &mut data[i * dim..(i + 1) * dim];
            match cell {
                None => row[0] = 1.0,
                Some(o) => {
                    let (s, c, z) = (o.shape as usize, o.color as usize, o.size as usize);
                    let hidden = o.color == HIDDEN_COLOR;
                    if s >= self.n_shapes || (c >= self.n_colors && !hidden) || z >= self.n_sizes {
                        return Err(Error::contract(format!(
                            "cell {i} attributes ({s}, {c}, {z}) outside vocabularies \
                             ({}, {}, {})",
                            self.n_shapes, self.n_colors, self.n_sizes
                        )));
                    }
                    row[1 + s] = 1.0;
                    if !hidden {
                        row[1 + self.n_shapes + c] = 1.0;
                    }
                    row[1 + self.n_shapes + self.n_colors + z] = 1.0;
                }
            }
            if self.positional && self.pos_dim > 0 {
                let (r, c) = (i / scene.grid_cols, i % scene.grid_cols);
                let pos = &mut row[self.attr_dim()..];
                let pr = sinusoidal(r, half);
                let pc = sinusoidal(c, self.pos_dim - half);
                for (dst, v) in pos.iter_mut().zip(pr.into_iter().chain(pc)) {
                    // stored files are f32; keep extracted values representable
                    *dst = v as f32 as f64;
                }
            }
        }
        FeatureSequence::new(Modality::Image, Tensor::matrix(cells, dim, data))
    }
}

/// Lower-cased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// 64-bit FNV-1a, the stable hash behind the bucketed vocabulary.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn token_bucket(token: &str, buckets: usize) -> usize {
    (fnv1a(token.as_bytes()) % buckets as u64) as usize
}

/// Text feature extractor: a trainable hash-bucketed embedding table plus a
/// fixed sinusoidal position code.
#[derive(Clone, Debug, PartialEq)]
pub struct TextExtractor {
    pub buckets: usize,
    pub dim: usize,
    pub positional: bool,
    pub table: Tensor,
}

impl TextExtractor {
    pub fn new<R: Rng>(buckets: usize, dim: usize, rng: &mut R) -> Self {
        let table = Tensor::matrix(
            buckets,
            dim,
            (0..buckets * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        Self {
            buckets,
            dim,
            positional: true,
            table,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.dim
    }

    pub fn buckets_of(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| token_bucket(t, self.buckets)).collect()
    }

    pub fn extract(&self, caption: &str) -> Result<FeatureSequence> {
        Ok(self.extract_tokens(&tokenize(caption))?.0)
    }

    /// Features plus the table row used for every position, which the
    /// training loop needs to route gradients back into the table.
    pub fn extract_tokens(&self, tokens: &[String]) -> Result<(FeatureSequence, Vec<usize>)> {
        if tokens.is_empty() {
            return Err(Error::degenerate("empty caption"));
        }
        let ids = self.buckets_of(tokens);
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for (pos, &b) in ids.iter().enumerate() {
            let row = self.table.row(b);
            if self.positional {
                let pe = sinusoidal(pos, self.dim);
                data.extend(row.iter().zip(pe).map(|(x, p)| x + p));
            } else {
                data.extend_from_slice(row);
            }
        }
        let seq = FeatureSequence::new(Modality::Text, Tensor::matrix(ids.len(), self.dim, data))?;
        Ok((seq, ids))
    }
}

/// Contents of one feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub modality: Modality,
    pub raw_dim: usize,
    pub records: Vec<FeatureSequence>,
}

/// What the caller expects a feature file to contain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FeatureManifest {
    pub modality: Option<Modality>,
    pub raw_dim: Option<usize>,
}

impl FeatureFile {
    pub fn new(modality: Modality, raw_dim: usize, records: Vec<FeatureSequence>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.raw_dim() != raw_dim || r.modality != modality {
                return Err(Error::contract(format!(
                    "record {i} is {:?}/{} but file is {:?}/{raw_dim}",
                    r.modality,
                    r.raw_dim(),
                    modality
                )));
            }
        }
        Ok(Self {
            modality,
            raw_dim,
            records,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(FEATURE_MAGIC);
        w.u32(FEATURE_VERSION);
        w.u8(self.modality.tag());
        w.len_u32(self.raw_dim);
        w.len_u32(self.records.len());
        for r in &self.records {
            w.len_u32(r.len());
            for &x in r.rows.data() {
                w.f32(x as f32);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], manifest: FeatureManifest) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != FEATURE_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let tag = r.u8("modality")?;
        let modality =
            Modality::from_tag(tag).ok_or_else(|| Error::format(at, format!("modality tag {tag}")))?;
        if manifest.modality.is_some_and(|m| m != modality) {
            return Err(Error::format(
                at,
                format!("expected {:?} features, file holds {modality:?}", manifest.modality),
            ));
        }
        let at = r.offset();
        let raw_dim = r.u32("raw_dim")? as usize;
        if raw_dim == 0 || manifest.raw_dim.is_some_and(|d| d != raw_dim) {
            return Err(Error::format(
                at,
                format!("raw_dim {raw_dim} does not match expected {:?}", manifest.raw_dim),
            ));
        }
        let count = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            if r.remaining() == 0 {
                return Err(Error::format(
                    r.offset(),
                    format!("header declares {count} records, found {i}"),
                ));
            }
            let at = r.offset();
            let len = r.u32("sequence length")? as usize;
            if len == 0 {
                return Err(Error::format(at, format!("record {i} has zero length")));
            }
            let n = len * raw_dim;
            let raw = r.take(n * 4, "record payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let seq = FeatureSequence::new(modality, Tensor::matrix(len, raw_dim, data))
                .map_err(|e| Error::format(at, e.to_string()))?;
            records.push(seq);
        }
        r.expect_end()?;
        Ok(Self {
            modality,
            raw_dim,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads a feature file, checking it against `manifest`.
pub fn load_features(path: impl AsRef<Path>, manifest: FeatureManifest) -> Result<FeatureFile> {
    let bytes = fs::read(path)?;
    FeatureFile::from_bytes(&bytes, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> SyntheticScene {
        let mut s = SyntheticScene::empty(2, 2);
        s.cells[0] = Some(SceneObject {
            shape: 1,
            color: 2,
            size: 0,
        });
        s.cells[3] = Some(SceneObject {
            shape: 0,
            color: 0,
            size: 2,
        });
        s
    }

    #[test]
    fn image_rows_equal_cell_count() {
        let ex = ImageExtractor::new(4, 4, 3);
        for (r, c) in [(1, 1), (2, 2), (3, 4), (5, 5)] {
            let f = ex.extract(&SyntheticScene::empty(r, c)).unwrap();
            assert_eq!(f.len(), r * c);
            assert_eq!(f.raw_dim(), ex.raw_dim());
        }
        assert_eq!(ex.extract(&scene()).unwrap(), ex.extract(&scene()).unwrap());
    }

    #[test]
    fn single_cell_change_touches_only_that_attribute_block() {
        let ex = ImageExtractor::new(4, 4, 3);
        let a = scene();
        let mut b = scene();
        b.cells[3] = Some(SceneObject {
            shape: 3,
            color: 1,
            size: 1,
        });
        let (fa, fb) = (ex.extract(&a).unwrap(), ex.extract(&b).unwrap());
        for row in 0..4 {
            for col in 0..ex.raw_dim() {
                let differs = fa.rows.get(row, col) != fb.rows.get(row, col);
                if differs {
                    assert_eq!(row, 3);
                    assert!(col < ex.attr_dim());
                }
            }
        }
        assert_ne!(fa.rows.row(3), fb.rows.row(3));
    }

    #[test]
    fn hidden_color_leaves_color_block_empty() {
        let ex = ImageExtractor::new(4, 4, 3);
        let mut s = scene();
        s.cells[0].as_mut().unwrap().color = HIDDEN_COLOR;
        let f = ex.extract(&s).unwrap();
        let row = f.rows.row(0);
        assert_eq!(row[1 + 1], 1.0);
        assert!(row[5..9].iter().all(|&v| v == 0.0));
        assert_eq!(row[9], 1.0);
    }

    #[test]
    fn empty_scene_and_bad_ids_rejected() {
        let ex = ImageExtractor::new(4, 4, 3);
        assert!(matches!(
            ex.extract(&SyntheticScene::empty(0, 3)),
            Err(Error::Degenerate(_))
        ));
        let mut s = scene();
        s.cells[1] = Some(SceneObject {
            shape: 9,
            color: 0,
            size: 0,
        });
        assert!(matches!(ex.extract(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn text_lengths_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tx = TextExtractor::new(64, 8, &mut rng);
        let f = tx.extract("red square").unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f, tx.extract("red square").unwrap());
        assert!(matches!(tx.extract("   "), Err(Error::Degenerate(_))));
    }

    #[test]
    fn colliding_tokens_share_an_embedding_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tx = TextExtractor::new(16, 8, &mut rng);
        tx.positional = false;
        // brute-force search for two distinct tokens in one bucket
        let target = token_bucket("alpha", 16);
        let other = (0..1000)
            .map(|i| format!("tok{i}"))
            .find(|t| token_bucket(t, 16) == target)
            .unwrap();
        let a = tx.extract("alpha").unwrap();
        let b = tx.extract(&other).unwrap();
        assert_eq!(a.rows, b.rows);
        // and with positions on, only the position code differs
        tx.positional = true;
        let a = tx.extract(&format!("alpha {other}")).unwrap();
        let pe0 = sinusoidal(0, 8);
        let pe1 = sinusoidal(1, 8);
        for j in 0..8 {
            let r0 = a.rows.get(0, j) - pe0[j];
            let r1 = a.rows.get(1, j) - pe1[j];
            assert!((r0 - r1).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_file_round_trip_and_corruption() {
        let ex = ImageExtractor::new(4, 4, 3);
        let recs = vec![ex.extract(&scene()).unwrap(), ex.extract(&SyntheticScene::empty(1, 3)).unwrap()];
        let file = FeatureFile::new(Modality::Image, ex.raw_dim(), recs).unwrap();
        let bytes = file.to_bytes();
        let back = FeatureFile::from_bytes(&bytes, FeatureManifest::default()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_bytes(), bytes);

        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                FeatureFile::from_bytes(&bytes[..cut], FeatureManifest::default()),
                Err(Error::Format { .. })
            ));
        }

        // header claims 3 records, payload carries 2
        let mut lying = bytes.clone();
        lying[13..17].copy_from_slice(&3u32.to_le_bytes());
        let err = FeatureFile::from_bytes(&lying, FeatureManifest::default()).unwrap_err();
        assert!(err.to_string().contains("declares 3 records, found 2"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(FeatureFile::from_bytes(&bad, FeatureManifest::default()).is_err());

        let wrong_dim = FeatureManifest {
            raw_dim: Some(ex.raw_dim() + 1),
            ..Default::default()
        };
        assert!(FeatureFile::from_bytes(&bytes, wrong_dim).is_err());
    }
}
