//! ConvLSTM autoencoder: three bidirectional encoder blocks feed a dense
//! embedding, and one of three decoder families reconstructs the clip from
//! that embedding alone.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod convlstm;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{positional_encoding, TransformerLayer};
pub use blocks::{BlockR, Conv, Dense, EncoderBlock, SeqNorm, Trace, UpBlock, UpCore};
pub use config::{DecoderKind, ModelConfig, ModelVariant, TransformerConfig, BLOCKS};
pub use convlstm::{ConvLstmCell, ConvLstmState};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Eager, Graph, ParamId, ParamStore, Tensor};

/// A clip of `T` frames stored as one `(T, spatial..., C)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor(Tensor);

impl ClipTensor {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() < 3 {
            return Err(Error::shape("clip", format!("need (T, spatial..., C), got {:?}", frames.shape())));
        }
        Ok(ClipTensor(frames))
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        Self::new(Tensor::stack(frames)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> Vec<Tensor> {
        self.0.unstack()
    }

    /// Copy with the frame order reversed.
    pub fn reversed(&self) -> ClipTensor {
        let mut f = self.frames();
        f.reverse();
        ClipTensor(Tensor::stack(&f).expect("frames share a shape"))
    }
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Parameter handles of the encoder. Names start with `enc.`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub dense: Dense,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut cin = cfg.input_channels;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            blocks.push(EncoderBlock::new(
                store,
                &format!("enc.block{}", i + 1),
                cfg.spatial_rank,
                cin,
                h,
                cfg.proj_channels,
                cfg.kernel,
                cfg.leaky_slope,
                cfg.norm_eps,
                rng,
            )?);
            cin = cfg.proj_channels;
        }
        let dense = Dense::new(store, "enc.dense", cfg.latent_len(), cfg.embedding_dim, rng)?;
        Ok(Encoder { blocks, dense })
    }

    /// Frames in, `(embedding_dim,)` out. The final block's frames are
    /// averaged over time before the dense layer.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        frames: &[G::Var],
        trace: &mut Trace,
    ) -> Result<G::Var> {
        let mut xs = frames.to_vec();
        for (i, block) in self.blocks.iter().enumerate() {
            xs = block.forward(g, store, &xs, &format!("block{}", i + 1), trace)?;
        }
        let mut sum = xs[0].clone();
        for x in &xs[1..] {
            sum = g.add(&sum, x)?;
        }
        let mean = g.scale(&sum, 1.0 / xs.len() as f64);
        let n = g.value(&mean).len();
        let flat = g.reshape(&mean, &[1, n])?;
        trace.push(("flatten".into(), vec![n]));
        let emb = self.dense.forward(g, store, &flat)?;
        let e = g.value(&emb).len();
        let emb = g.reshape(&emb, &[e])?;
        trace.push(("embedding".into(), vec![e]));
        Ok(emb)
    }
}

/// How the embedding becomes a sequence of latent frames.
#[derive(Debug, Clone)]
pub enum DecoderSeed {
    /// Dense map to one latent frame, repeated for every timestep.
    Dense(Dense),
    /// Dense map to a token repeated per timestep, plus position codes,
    /// through a transformer stack, then a per-token map to latent frames.
    Transformer { input: Dense, layers: Vec<TransformerLayer>, output: Dense },
}

/// Parameter handles of the decoder. Names start with `dec.`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub seed: DecoderSeed,
    pub blocks: Vec<UpBlock>,
    pub head: Conv,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let kind = cfg.variant.decoder_kind();
        let seed = match (kind, &cfg.transformer) {
            (DecoderKind::Transformer, Some(t)) => {
                let input = Dense::new(store, "dec.token", cfg.embedding_dim, t.hidden, rng)?;
                let layers = (0..t.layers)
                    .map(|i| TransformerLayer::new(store, &format!("dec.layer{}", i + 1), t, cfg.norm_eps, rng))
                    .collect::<Result<_>>()?;
                let output = Dense::new(store, "dec.latent", t.hidden, cfg.latent_len(), rng)?;
                DecoderSeed::Transformer { input, layers, output }
            }
            (DecoderKind::Transformer, None) => return Err(Error::Config("transformer settings missing".into())),
            _ => DecoderSeed::Dense(Dense::new(store, "dec.latent", cfg.embedding_dim, cfg.latent_len(), rng)?),
        };
        let blocks = cfg
            .hidden
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &h)| {
                UpBlock::new(
                    store,
                    &format!("dec.block{}", i + 1),
                    kind,
                    cfg.spatial_rank,
                    cfg.proj_channels,
                    h,
                    cfg.proj_channels,
                    cfg.kernel,
                    cfg.leaky_slope,
                    cfg.norm_eps,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let head = Conv::new(
            store,
            "dec.head",
            &vec![cfg.kernel; cfg.spatial_rank],
            cfg.proj_channels,
            cfg.input_channels,
            rng,
        )?;
        Ok(Decoder { seed, blocks, head })
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        cfg: &ModelConfig,
        embedding: &G::Var,
        trace: &mut Trace,
    ) -> Result<Vec<G::Var>> {
        let e = g.value(embedding).len();
        let row = g.reshape(embedding, &[1, e])?;
        let mut latent_shape = vec![cfg.latent_size(); cfg.spatial_rank];
        latent_shape.push(cfg.proj_channels);
        let t = cfg.clip_len;
        let mut xs = match &self.seed {
            DecoderSeed::Dense(dense) => {
                let lat = dense.forward(g, store, &row)?;
                let lat = g.reshape(&lat, &latent_shape)?;
                vec![lat; t]
            }
            DecoderSeed::Transformer { input, layers, output } => {
                let token = input.forward(g, store, &row)?;
                let width = g.value(&token).len();
                let tokens = g.stack(&vec![token; t])?;
                let tokens = g.reshape(&tokens, &[t, width])?;
                let pe = g.constant(positional_encoding(t, width));
                let mut x = g.add(&tokens, &pe)?;
                for layer in layers {
                    x = layer.forward(g, store, &x)?;
                }
                trace.push(("tokens".into(), g.value(&x).shape().to_vec()));
                let lat = output.forward(g, store, &x)?;
                (0..t)
                    .map(|i| {
                        let row = g.index(&lat, i)?;
                        g.reshape(&row, &latent_shape)
                    })
                    .collect::<Result<_>>()?
            }
        };
        trace.push(("latent".into(), latent_shape.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            xs = block.forward(g, store, &xs, &format!("up{}", i + 1), trace)?;
        }
        xs.iter().map(|x| self.head.forward(g, store, x)).collect()
    }
}

/// Encoder and (optionally) decoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Option<Decoder>,
}

const META_PREFIX: &str = "meta.";

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Autoencoder {
    /// Xavier-initialized model. Encoder and decoder draw from separate
    /// streams, so the encoder weights do not depend on the decoder kind.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// Encoder only, for embedding and inference.
    pub fn encoder_only(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    fn build(config: ModelConfig, seed: u64, with_decoder: bool) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng_stream(seed, 0))?;
        let decoder =
            if with_decoder { Some(Decoder::new(&mut store, &config, &mut rng_stream(seed, 1))?) } else { None };
        Ok(Autoencoder { config, store, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("enc.")
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let want = self.config.clip_shape();
        if clip.tensor().shape() != want.as_slice() {
            return Err(Error::shape("encode", format!("model expects clips of {want:?}, got {:?}", clip.tensor().shape())));
        }
        Ok(())
    }

    /// Records the encoder on `g` with `frames` as its input.
    pub fn encode_frames<G: Graph>(&self, g: &mut G, frames: &[G::Var], trace: &mut Trace) -> Result<G::Var> {
        self.encoder.forward(g, &self.store, frames, trace)
    }

    pub fn decode_var<G: Graph>(&self, g: &mut G, embedding: &G::Var, trace: &mut Trace) -> Result<Vec<G::Var>> {
        let decoder = self.decoder.as_ref().ok_or_else(|| Error::invalid("model was loaded without a decoder"))?;
        decoder.forward(g, &self.store, &self.config, embedding, trace)
    }

    /// Encodes on `g` with the clip frames as constants.
    pub fn encode_graph<G: Graph>(&self, g: &mut G, clip: &ClipTensor) -> Result<G::Var> {
        self.check_clip(clip)?;
        let frames: Vec<G::Var> = clip.frames().into_iter().map(|f| g.constant(f)).collect();
        self.encode_frames(g, &frames, &mut Trace::new())
    }

    pub fn encode(&self, clip: &ClipTensor) -> Result<EmbeddingVector> {
        Ok(self.encode_traced(clip)?.0)
    }

    /// Embedding plus the shape at every named stage of the encoder.
    pub fn encode_traced(&self, clip: &ClipTensor) -> Result<(EmbeddingVector, Trace)> {
        self.check_clip(clip)?;
        let mut g = Eager;
        let frames: Vec<_> = clip.frames().into_iter().map(|f| g.constant(f)).collect();
        let mut trace = Trace::new();
        let emb = self.encode_frames(&mut g, &frames, &mut trace)?;
        drop(frames);
        let values = std::sync::Arc::try_unwrap(emb).unwrap_or_else(|a| (*a).clone()).into_data();
        Ok((EmbeddingVector::new(values)?, trace))
    }

    pub fn decode(&self, embedding: &EmbeddingVector) -> Result<ClipTensor> {
        if embedding.len() != self.config.embedding_dim {
            return Err(Error::DimensionMismatch { expected: self.config.embedding_dim, found: embedding.len() });
        }
        let mut g = Eager;
        let e = g.constant(Tensor::from_vec(embedding.values().to_vec()));
        let frames = self.decode_var(&mut g, &e, &mut Trace::new())?;
        let frames: Vec<Tensor> = frames.iter().map(|f| (**f).clone()).collect();
        ClipTensor::from_frames(&frames)
    }

    pub fn reconstruct(&self, clip: &ClipTensor) -> Result<ClipTensor> {
        self.decode(&self.encode(clip)?)
    }

    /// Checkpoint whose header holds the model config and `meta` pairs.
    pub fn to_checkpoint(&self, meta: &[(String, String)]) -> Checkpoint {
        let mut header = self.config.to_text();
        for (k, v) in meta {
            header.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        Checkpoint::from_store(header, &self.store)
    }

    /// Rebuilds a model from a checkpoint. Without `with_decoder`, decoder
    /// weights in the file are skipped.
    pub fn from_checkpoint(ck: &Checkpoint, with_decoder: bool) -> Result<(Self, Vec<(String, String)>)> {
        let mut model_text = String::new();
        let mut meta = Vec::new();
        for line in ck.header.lines() {
            match line.strip_prefix(META_PREFIX) {
                Some(rest) => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| Error::Corrupt(format!("bad header line `{line}`")))?;
                    meta.push((k.to_string(), v.to_string()));
                }
                None => {
                    model_text.push_str(line);
                    model_text.push('\n');
                }
            }
        }
        let config = ModelConfig::from_text(&model_text)?;
        let mut model = Self::build(config, 0, with_decoder)?;
        let mut loaded = 0;
        for (name, value) in &ck.params {
            match model.store.id(name) {
                Some(id) => {
                    model.store.set_value(id, value.clone())?;
                    loaded += 1;
                }
                None if !with_decoder && name.starts_with("dec.") => {}
                None => return Err(Error::Corrupt(format!("checkpoint parameter `{name}` not in model"))),
            }
        }
        if loaded != model.store.len() {
            return Err(Error::Corrupt(format!("checkpoint covers {loaded} of {} parameters", model.store.len())));
        }
        Ok((model, meta))
    }

    pub fn save(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        crate::store::write_atomic(path, &self.to_checkpoint(meta).to_bytes()?)
    }

    pub fn load(path: &Path, with_decoder: bool) -> Result<(Self, Vec<(String, String)>)> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&fs::read(path)?)?, with_decoder)
    }
}
