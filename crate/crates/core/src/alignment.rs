//! The dual encoder: per-modality projection, one shared transformer-encoder
//! layer, single-query attention pooling and optional L2 normalization.
//!
//! Both modalities go through the *same* [`EncoderLayer`] parameters; only the
//! bias-free projections differ. Similarity is the plain inner product.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{dot_slices, Tape, Tensor, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, ImageExtractor, Modality, SyntheticScene, TextExtractor};
use crate::nn::{attention_pool, xavier, Binder, EncoderLayer, ParamGroup, ParamId, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XALN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Shared embedding width.
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub normalize_image: bool,
    pub normalize_text: bool,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub n_sizes: usize,
    pub image_pos_dim: usize,
    pub image_positional: bool,
    pub text_buckets: usize,
    pub text_dim: usize,
    pub text_positional: bool,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            ff: 256,
            layers: 1,
            normalize_image: false,
            normalize_text: true,
            n_shapes: 8,
            n_colors: 8,
            n_sizes: 3,
            image_pos_dim: 8,
            image_positional: true,
            text_buckets: 4096,
            text_dim: 32,
            text_positional: true,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn normalize(&self, m: Modality) -> bool {
        match m {
            Modality::Image => self.normalize_image,
            Modality::Text => self.normalize_text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::contract(format!(
                "embedding width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 || self.ff == 0 || self.text_buckets == 0 || self.text_dim == 0 {
            return Err(Error::contract("layer count, ff width and text dims must be positive"));
        }
        Ok(())
    }

    fn write(&self, w: &mut ByteWriter) {
        for v in [self.d, self.heads, self.ff, self.layers] {
            w.len_u32(v);
        }
        w.u8(self.normalize_image.into());
        w.u8(self.normalize_text.into());
        for v in [self.n_shapes, self.n_colors, self.n_sizes, self.image_pos_dim] {
            w.len_u32(v);
        }
        w.u8(self.image_positional.into());
        w.len_u32(self.text_buckets);
        w.len_u32(self.text_dim);
        w.u8(self.text_positional.into());
        w.u64(self.seed);
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let mut u = |what| r.u32(what).map(|v| v as usize);
        let (d, heads, ff, layers) = (u("d")?, u("heads")?, u("ff")?, u("layers")?);
        let normalize_image = r.u8("normalize flag")? != 0;
        let normalize_text = r.u8("normalize flag")? != 0;
        let mut u = |what| r.u32(what).map(|v| v as usize);
        let (n_shapes, n_colors, n_sizes, image_pos_dim) =
            (u("shapes")?, u("colors")?, u("sizes")?, u("pos dim")?);
        let image_positional = r.u8("positional flag")? != 0;
        let text_buckets = r.u32("buckets")? as usize;
        let text_dim = r.u32("text dim")? as usize;
        let text_positional = r.u8("positional flag")? != 0;
        let seed = r.u64("seed")?;
        let cfg = Self {
            d,
            heads,
            ff,
            layers,
            normalize_image,
            normalize_text,
            n_shapes,
            n_colors,
            n_sizes,
            image_pos_dim,
            image_positional,
            text_buckets,
            text_dim,
            text_positional,
            seed,
        };
        cfg.validate().map_err(|e| Error::format(r.offset(), e.to_string()))?;
        Ok(cfg)
    }
}

/// Output of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub normalized: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Plain inner product of two embeddings.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "similarity between {}-d and {}-d embeddings",
            a.dim(),
            b.dim()
        )));
    }
    Ok(dot_slices(&a.vector, &b.vector))
}

/// Trainable parameters of both encoders plus their feature extractors.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub config: AlignmentConfig,
    pub params: ParamStore,
    pub image_features: ImageExtractor,
    /// Text embedding table; trained in the feature-encoder group.
    pub text_features: TextExtractor,
    proj_image: ParamId,
    proj_text: ParamId,
    layers: Vec<EncoderLayer>,
    pool_query: ParamId,
}

/// Tape handles for one encoder forward pass.
pub(crate) struct EncodedOnTape {
    pub output: Var,
    pub input: Var,
}

impl AlignmentModel {
    pub fn new(config: AlignmentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let image_features = ImageExtractor {
            n_shapes: config.n_shapes,
            n_colors: config.n_colors,
            n_sizes: config.n_sizes,
            pos_dim: config.image_pos_dim,
            positional: config.image_positional,
        };
        let mut text_features = TextExtractor::new(config.text_buckets, config.text_dim, &mut rng);
        text_features.positional = config.text_positional;
        let mut params = ParamStore::default();
        let g = ParamGroup::Model;
        let proj_image = params.add(
            "proj.image",
            g,
            xavier(&mut rng, image_features.raw_dim(), config.d),
        );
        let proj_text = params.add("proj.text", g, xavier(&mut rng, config.text_dim, config.d));
        let layers = (0..config.layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut params,
                    &format!("shared.{i}"),
                    config.d,
                    config.ff,
                    config.heads,
                    &mut rng,
                )
            })
            .collect();
        let pool_query = params.add("pool.query", g, xavier(&mut rng, 1, config.d));
        Ok(Self {
            config,
            params,
            image_features,
            text_features,
            proj_image,
            proj_text,
            layers,
            pool_query,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn raw_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.image_features.raw_dim(),
            Modality::Text => self.text_features.raw_dim(),
        }
    }

    pub fn projection(&self, m: Modality) -> ParamId {
        match m {
            Modality::Image => self.proj_image,
            Modality::Text => self.proj_text,
        }
    }

    /// Ids of every shared-layer parameter.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let skip = [self.proj_image, self.proj_text, self.pool_query];
        (0..self.params.len())
            .map(ParamId)
            .filter(|id| !skip.contains(id))
            .collect()
    }

    /// Records the encoder on `tape`. `input` must hold `[L, raw_dim]` features.
    pub(crate) fn encode_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        input: Var,
        modality: Modality,
    ) -> Result<(Var, Var)> {
        let raw = tape.value(input).cols();
        if raw != self.raw_dim(modality) {
            return Err(Error::contract(format!(
                "{} features have width {raw}, encoder expects {}",
                modality.name(),
                self.raw_dim(modality)
            )));
        }
        let p = binder.var(tape, self.projection(modality));
        let mut h = tape.matmul(input, p)?;
        for layer in &self.layers {
            h = layer.forward(tape, binder, h)?;
        }
        let q = binder.var(tape, self.pool_query);
        let (mut out, weights) = attention_pool(tape, h, q)?;
        if self.config.normalize(modality) {
            out = tape.l2_normalize_rows(out)?;
        }
        Ok((out, weights))
    }

    /// Records the encoder with a differentiable input leaf.
    pub(crate) fn encode_trainable(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        feats: &FeatureSequence,
    ) -> Result<EncodedOnTape> {
        let input = tape.leaf(feats.rows.clone().with_requires_grad(true));
        let (output, _) = self.encode_on_tape(tape, binder, input, feats.modality)?;
        Ok(EncodedOnTape { output, input })
    }

    /// Embedding and attention-pooling weights.
    pub fn encode_detailed(&self, feats: &FeatureSequence) -> Result<(Embedding, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let input = tape.constant(feats.rows.clone());
        let (out, w) = self.encode_on_tape(&mut tape, &mut binder, input, feats.modality)?;
        let emb = Embedding {
            vector: tape.value(out).data().to_vec(),
            modality: feats.modality,
            normalized: self.config.normalize(feats.modality),
        };
        Ok((emb, tape.value(w).data().to_vec()))
    }

    pub fn encode(&self, feats: &FeatureSequence) -> Result<Embedding> {
        Ok(self.encode_detailed(feats)?.0)
    }

    pub fn encode_scene(&self, scene: &SyntheticScene) -> Result<Embedding> {
        self.encode(&self.image_features.extract(scene)?)
    }

    pub fn encode_caption(&self, caption: &str) -> Result<Embedding> {
        self.encode(&self.text_features.extract(caption)?)
    }

    fn full_store(&self) -> ParamStore {
        let mut all = self.params.clone();
        all.add(
            "features.text.table",
            ParamGroup::FeatureEncoder,
            self.text_features.table.clone(),
        );
        all
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        self.config.write(&mut w);
        self.full_store().write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let config = AlignmentConfig::read(&mut r)?;
        let mut model = Self::new(config)?;
        let mut store = ParamStore::read_into(&model.full_store(), &mut r)?;
        r.expect_end()?;
        let table = store
            .iter_mut()
            .last()
            .map(|p| std::mem::replace(&mut p.value, Tensor::zeros(vec![0])))
            .ok_or_else(|| Error::format(r.offset(), "missing text table"))?;
        let mut params = ParamStore::default();
        for p in store.iter().take(model.params.len()) {
            params.add(p.name.clone(), p.group, p.value.clone());
        }
        model.params = params;
        model.text_features.table = table;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// 64-bit fingerprint over the configuration and every parameter byte.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
