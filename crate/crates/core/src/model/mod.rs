//! Image encoder plus one transformer decoder that serves both the location
//! pass and the parallel recognition pass.

mod forward;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcodec::Vocab;
use crate::tensor::{Scalar, Tensor};

pub use forward::{sinusoidal_2d, Bound, IadOutput, LossOptions, TrainForward, Transmissions};
pub use layers::{Attn, ConvStage, DecoderLayer, DecoderStack, EncoderLayer, FeedForward, Linear, Norm};

/// How the recognition queries are formed from the location pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransmissionPolicy {
    /// hidden state plus coordinate-token embedding
    #[default]
    #[serde(rename = "token+feat")]
    TokenFeat,
    #[serde(rename = "token")]
    Token,
    #[serde(rename = "feat")]
    Feat,
}

impl std::str::FromStr for TransmissionPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "token+feat" | "token-feat" => Ok(Self::TokenFeat),
            "token" => Ok(Self::Token),
            "feat" => Ok(Self::Feat),
            o => Err(format!("unknown transmission policy `{}` (token+feat|token|feat)", o)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Location,
    Recognition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_mult: usize,
    pub n_bins: usize,
    pub max_chars: usize,
    pub max_instances: usize,
    /// Characters of the recognition dictionary, in id order.
    pub charset: String,
    pub image_side: usize,
    pub in_channels: usize,
    /// Output channels of the four stem stages; strides are 2, 2, 2, 1.
    pub stem_channels: [usize; 4],
    pub share_decoder: bool,
    pub transmission: TransmissionPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 3,
            n_decoder_layers: 3,
            ffn_mult: 4,
            n_bins: 1000,
            max_chars: 25,
            max_instances: 60,
            charset: crate::seqcodec::default_charset().into_iter().collect(),
            image_side: 128,
            in_channels: 1,
            stem_channels: [16, 32, 64, 128],
            share_decoder: true,
            transmission: TransmissionPolicy::TokenFeat,
        }
    }
}

pub const STEM_STRIDES: [usize; 4] = [2, 2, 2, 1];

impl ModelConfig {
    /// Smallest configuration used for gradient checks.
    pub fn micro() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_mult: 2,
            n_bins: 16,
            max_chars: 4,
            max_instances: 4,
            charset: "abcdef".into(),
            image_side: 16,
            in_channels: 1,
            stem_channels: [2, 2, 2, 4],
            share_decoder: true,
            transmission: TransmissionPolicy::TokenFeat,
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn small() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            ffn_mult: 2,
            n_bins: 64,
            max_chars: 8,
            max_instances: 8,
            image_side: 64,
            stem_channels: [16, 32, 48, 64],
            ..Self::default()
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_bins, self.charset.chars().collect()).expect("validated charset")
    }

    pub fn vocab_size(&self) -> usize {
        self.n_bins + self.charset.chars().count() + 3
    }

    pub fn memory_side(&self) -> usize {
        self.image_side / 8
    }

    /// Decoder positions cover the longest location sequence and the
    /// longest recognition query sequence.
    pub fn max_positions(&self) -> usize {
        (2 * self.max_instances + 2).max(self.max_chars + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be a multiple of 4 for 2-D positional encoding".into()));
        }
        if self.image_side % 8 != 0 || self.image_side == 0 {
            return Err(Error::Config(format!("image side {} must be a positive multiple of 8", self.image_side)));
        }
        if self.n_bins < 2 || self.max_chars == 0 || self.max_instances == 0 {
            return Err(Error::Config("n_bins >= 2, max_chars >= 1 and max_instances >= 1 required".into()));
        }
        Vocab::new(self.n_bins, self.charset.chars().collect()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Opaque index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter arrays in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Every learnable array, plus the layer structure that indexes into it.
#[derive(Clone, Debug)]
pub struct Weights<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: Vec<ConvStage>,
    pub stem_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: DecoderStack,
    /// Separate recognition decoder, only when sharing is disabled.
    pub prd_decoder: Option<DecoderStack>,
    pub token_embed: ParamId,
    pub dec_pos: ParamId,
    pub head: Linear,
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, 0.02).expect("valid std") }
    }

    pub(crate) fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| T::lit(self.normal.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), v).expect("matching size")
    }

    /// Normal with standard deviation `std` instead of the default.
    pub(crate) fn scaled<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let mut t = self.normal::<T>(shape);
        let k = T::lit(std / 0.02);
        t.data_mut().iter_mut().for_each(|v| *v *= k);
        t
    }
}

impl<T: Scalar> Weights<T> {
    /// Fresh weights: Xavier-normal projections, He-normal convolutions,
    /// normal(0, 0.02) embeddings, unit scale and zero shift for
    /// normalization, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init::new(seed);
        let d = config.d_model;
        let mut stem = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.stem_channels.iter().enumerate() {
            stem.push(ConvStage::new(&mut store, &mut init, &format!("stem.{}", i), cin, cout, STEM_STRIDES[i]));
            cin = cout;
        }
        let stem_proj = Linear::new(&mut store, &mut init, "stem.proj", cin, d);
        let encoder = (0..config.n_encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("encoder.{}", i), d, config.ffn_mult))
            .collect();
        let encoder_norm = Norm::new(&mut store, "encoder.norm", d);
        let decoder = DecoderStack::new(&mut store, &mut init, "decoder", config);
        let prd_decoder =
            (!config.share_decoder).then(|| DecoderStack::new(&mut store, &mut init, "prd_decoder", config));
        let token_embed = store.add("token_embed", init.normal(&[config.vocab_size(), d]));
        let dec_pos = store.add("dec_pos", init.normal(&[config.max_positions(), d]));
        let head = Linear::new(&mut store, &mut init, "head", d, config.vocab_size());
        Ok(Self {
            config: config.clone(),
            store,
            stem,
            stem_proj,
            encoder,
            encoder_norm,
            decoder,
            prd_decoder,
            token_embed,
            dec_pos,
            head,
        })
    }

    /// Decoder parameters used by a role. With sharing on, both roles get
    /// the same stack.
    pub fn decoder_for(&self, role: Role) -> &DecoderStack {
        match (role, &self.prd_decoder) {
            (Role::Recognition, Some(prd)) => prd,
            _ => &self.decoder,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stem_proj: self.stem_proj,
            encoder: self.encoder.clone(),
            encoder_norm: self.encoder_norm,
            decoder: self.decoder.clone(),
            prd_decoder: self.prd_decoder.clone(),
            token_embed: self.token_embed,
            dec_pos: self.dec_pos,
            head: self.head,
        }
    }

    /// Rebuild the layer structure for `config` and fill it from `store`,
    /// checking every name and shape.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        if w.store.len() != store.len() {
            return Err(Error::checkpoint(
                "tensors",
                format!("expected {} arrays, found {}", w.store.len(), store.len()),
            ));
        }
        for ((_, name, want), (_, got_name, got)) in w.store.iter().zip(store.iter()) {
            if name != got_name {
                return Err(Error::checkpoint(got_name, format!("expected array `{}`", name)));
            }
            if want.shape() != got.shape() {
                return Err(Error::checkpoint(
                    name,
                    format!("shape {:?} does not match configured {:?}", got.shape(), want.shape()),
                ));
            }
        }
        w.store = store;
        Ok(w)
    }
}
