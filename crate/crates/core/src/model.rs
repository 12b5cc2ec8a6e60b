//! The composed forecaster: segmentation, time encoder, semantic prototypes,
//! TSCC, adapter-augmented frozen backbone and decoder head.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::{Backbone, BackboneConfig, BackboneOutputs};
use crate::data::{NormStats, WindowSpec};
use crate::embedding::{load_embedding_table, SemanticProjection, TimeEncoder, VocabularyTable};
use crate::error::{Error, Result};
use crate::forecast::{rollout_batch, Decoder, DecoderMode};
use crate::layers::Builder;
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};
use crate::scalar::Scalar;
use crate::tscc::{Tscc, TsccConfig, TsccOutputs};

/// Every architectural hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Context length `L`.
    pub context_len: usize,
    /// Native step `τ`.
    pub horizon: usize,
    /// Segment length `P`.
    pub segment_len: usize,
    /// Embedding width `D`.
    pub width: usize,
    pub encoder_hidden: usize,
    /// Vocabulary size `V` of the seeded table.
    pub vocab: usize,
    /// Width `D_w` of the seeded table.
    pub vocab_width: usize,
    /// Optional matrix file replacing the seeded table.
    pub vocab_path: Option<String>,
    /// Prototype count `Kp`.
    pub prototypes: usize,
    pub projection_bias: bool,
    pub decoder_mode: DecoderMode,
    pub decoder_hidden: usize,
    /// Regularizer of the per-window instance normalization.
    pub norm_eps: f64,
    pub tscc: TsccConfig,
    pub adapter: AdapterConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = 64;
        Self {
            context_len: 672,
            horizon: 96,
            segment_len: 96,
            width: d,
            encoder_hidden: 2 * d,
            vocab: 1000,
            vocab_width: d,
            vocab_path: None,
            prototypes: 32,
            projection_bias: true,
            decoder_mode: DecoderMode::Flatten,
            decoder_hidden: 2 * d,
            norm_eps: 1e-5,
            tscc: TsccConfig::for_width(d),
            adapter: AdapterConfig::for_width(d),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for full-model gradient checks:
    /// `N=4, P=8, D=D_llm=16, Kp=8, V=32`, one layer, two heads, `r=4, h=8`.
    pub fn tiny() -> Self {
        let d = 16;
        Self {
            context_len: 32,
            horizon: 8,
            segment_len: 8,
            width: d,
            encoder_hidden: 2 * d,
            vocab: 32,
            vocab_width: d,
            vocab_path: None,
            prototypes: 8,
            projection_bias: true,
            decoder_mode: DecoderMode::Flatten,
            decoder_hidden: 2 * d,
            norm_eps: 1e-5,
            tscc: TsccConfig {
                cross_heads: 2,
                k_top: 3,
                ..TsccConfig::for_width(d)
            },
            adapter: AdapterConfig {
                rank: 4,
                hidden: 8,
                ..AdapterConfig::for_width(d)
            },
            backbone: BackboneConfig {
                layers: 1,
                heads: 2,
                width: d,
                ffn_width: 4 * d,
                max_positions: 8,
                ..BackboneConfig::default()
            },
        }
    }

    /// A small configuration that trains in seconds on one core.
    pub fn desk(context_len: usize, horizon: usize, segment_len: usize) -> Self {
        let d = 32;
        Self {
            context_len,
            horizon,
            segment_len,
            width: d,
            encoder_hidden: 2 * d,
            vocab: 200,
            vocab_width: d,
            vocab_path: None,
            prototypes: 16,
            projection_bias: true,
            decoder_mode: DecoderMode::Flatten,
            decoder_hidden: 2 * d,
            norm_eps: 1e-5,
            tscc: TsccConfig {
                cross_heads: 4,
                ..TsccConfig::for_width(d)
            },
            adapter: AdapterConfig::for_width(d),
            backbone: BackboneConfig {
                layers: 2,
                heads: 4,
                width: d,
                ffn_width: 4 * d,
                max_positions: (context_len / segment_len.max(1)).max(1),
                ..BackboneConfig::default()
            },
        }
    }

    /// Segments per window, `N = L / P`.
    pub fn segments(&self) -> usize {
        self.context_len / self.segment_len.max(1)
    }

    pub fn window_spec(&self, stride: usize) -> WindowSpec {
        WindowSpec {
            context_len: self.context_len,
            horizon: self.horizon,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || self.context_len == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "model.context_len, model.horizon and model.segment_len must be positive".into(),
            ));
        }
        if self.context_len % self.segment_len != 0 {
            return Err(Error::Config(format!(
                "model.context_len = {} is not divisible by model.segment_len = {}",
                self.context_len, self.segment_len
            )));
        }
        if self.width == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.prototypes == 0 {
            return Err(Error::Config("model.prototypes must be positive".into()));
        }
        if self.vocab_path.is_none() && self.prototypes > self.vocab {
            return Err(Error::Config(format!(
                "model.prototypes = {} exceeds model.vocab = {}",
                self.prototypes, self.vocab
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("model.norm_eps must be positive".into()));
        }
        self.backbone.validate()?;
        if self.segments() > self.backbone.max_positions {
            return Err(Error::Config(format!(
                "{} segments exceed backbone.max_positions = {}",
                self.segments(),
                self.backbone.max_positions
            )));
        }
        self.tscc.validate(self.width, self.prototypes)?;
        self.adapter.validate(self.backbone.width)?;
        if self.decoder_mode == DecoderMode::PerSegment && self.horizon % self.segments() != 0 {
            return Err(Error::Config(format!(
                "model.decoder_mode = per_segment needs model.horizon = {} divisible by {} segments",
                self.horizon,
                self.segments()
            )));
        }
        Ok(())
    }
}

/// Named groups of parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Handles to every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// `[B, N, P]`.
    pub segments: Var,
    /// `H: [B, N, D]`.
    pub encoded: Var,
    /// `l₂: [Kp, D]`.
    pub prototypes: Var,
    pub tscc: TsccOutputs,
    pub backbone: BackboneOutputs,
    /// `O: [B, τ]`, normalized.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub encoder: TimeEncoder,
    pub vocabulary: VocabularyTable,
    pub projection: SemanticProjection,
    pub tscc: Tscc,
    pub backbone: Backbone,
    pub decoder: Decoder,
    trained: bool,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every component from `seed`. Each component draws
    /// from its own derived stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngState::new(seed);
        let mut store = ParamStore::new();
        let vocabulary = match &config.vocab_path {
            Some(path) => load_embedding_table(&mut store, path, Some((config.vocab, config.vocab_width, seed)))?,
            None => VocabularyTable::seeded(&mut store, config.vocab, config.vocab_width, seed)?,
        };
        if config.prototypes > vocabulary.vocab {
            return Err(Error::Config(format!(
                "model.prototypes = {} exceeds the vocabulary size {}",
                config.prototypes, vocabulary.vocab
            )));
        }
        let d = config.width;
        let d_llm = config.backbone.width;
        let mut rng = root.derive("encoder");
        let encoder = TimeEncoder::new(
            &mut Builder::new(&mut store, &mut rng, true),
            config.segment_len,
            config.encoder_hidden,
            d,
        )?;
        let mut rng = root.derive("semantic");
        let projection = SemanticProjection::new(
            &mut Builder::new(&mut store, &mut rng, true),
            &vocabulary,
            config.prototypes,
            d,
            config.projection_bias,
        )?;
        let mut rng = root.derive("tscc");
        let tscc = Tscc::new(&mut Builder::new(&mut store, &mut rng, true), &config.tscc, d, d_llm)?;
        let mut rng = root.derive("backbone");
        let backbone = Backbone::new(
            &mut Builder::new(&mut store, &mut rng, true),
            &config.backbone,
            Some(&config.adapter),
        )?;
        let mut rng = root.derive("decoder");
        let decoder = Decoder::new(
            &mut Builder::new(&mut store, &mut rng, true),
            config.decoder_mode,
            config.segments(),
            d_llm,
            config.decoder_hidden,
            config.horizon,
        )?;
        Ok(Self {
            config,
            seed,
            store,
            encoder,
            vocabulary,
            projection,
            tscc,
            backbone,
            decoder,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    /// Forward pass with the model's own parameters.
    pub fn forward(&self, g: &mut Graph<T>, context: &Tensor<T>, rng: Option<&mut RngState>) -> Result<ModelOutputs> {
        self.forward_with(&self.store, g, context, rng)
    }

    /// Forward pass from a normalized `[B, L]` context, reading parameters
    /// from `store`. `rng == None` selects the deterministic decomposition.
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        context: &Tensor<T>,
        rng: Option<&mut RngState>,
    ) -> Result<ModelOutputs> {
        let c = &self.config;
        if context.rank() != 2 || context.shape()[1] != c.context_len {
            return Err(Error::ShapeMismatch {
                op: "model",
                lhs: context.shape().to_vec(),
                rhs: vec![c.context_len],
            });
        }
        let b = context.shape()[0];
        let x = g.constant(context.clone())?;
        let segments = g.reshape(x, &[b, c.segments(), c.segment_len])?;
        self.forward_segments(store, g, segments, rng)
    }

    /// Forward pass from an already segmented `[B, N, P]` graph value.
    pub fn forward_segments(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        segments: Var,
        rng: Option<&mut RngState>,
    ) -> Result<ModelOutputs> {
        let encoded = self.encoder.forward(g, store, segments)?;
        let prototypes = self.projection.forward(g, store, &self.vocabulary)?;
        let tscc = self.tscc.forward(g, store, encoded, prototypes, rng)?;
        let backbone = self.backbone.forward(g, store, tscc.fused)?;
        let output = self.decoder.forward(g, store, backbone.output)?;
        Ok(ModelOutputs {
            segments,
            encoded,
            prototypes,
            tscc,
            backbone,
            output,
        })
    }

    /// Deterministic one-step prediction from normalized contexts `[B, L] -> [B, τ]`.
    pub fn predict(&self, context: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, context, None)?;
        Ok(g.value(out.output).clone())
    }

    /// Forecasts `horizon` raw values after each raw `[L]` context by
    /// autoregressive rollout. Every window is normalized once with its own
    /// context statistics, which are reused to map all predictions back.
    pub fn forecast(&self, contexts: &[Vec<T>], horizon: usize) -> Result<Vec<Vec<T>>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let eps = T::lit(self.config.norm_eps);
        let stats: Vec<NormStats<T>> = contexts.iter().map(|c| NormStats::from_context(c, eps)).collect();
        let normalized: Vec<Vec<T>> = contexts.iter().zip(&stats).map(|(c, s)| s.normalize(c)).collect();
        let preds = self.forecast_normalized(&normalized, horizon)?;
        Ok(preds.iter().zip(&stats).map(|(p, s)| s.denormalize(p)).collect())
    }

    /// Rollout entirely in normalized space.
    pub fn forecast_normalized(&self, contexts: &[Vec<T>], horizon: usize) -> Result<Vec<Vec<T>>> {
        let l = self.config.context_len;
        if contexts.iter().any(|c| c.len() != l) {
            return Err(Error::invalid(
                "forecast",
                format!("every context must have length {l}"),
            ));
        }
        rollout_batch(contexts, self.config.horizon, horizon, |ctx| {
            let flat: Vec<T> = ctx.iter().flatten().copied().collect();
            let pred = self.predict(&Tensor::new([ctx.len(), l], flat)?)?;
            Ok(pred.data().chunks(self.config.horizon).map(<[T]>::to_vec).collect())
        })
    }

    /// Backbone host weights and the vocabulary table.
    pub fn host_params(&self) -> Vec<ParamId> {
        let mut p = self.backbone.host_params();
        p.push(self.vocabulary.weight);
        p
    }

    /// Parameters of the encoder, projection, TSCC, adapters, positions and decoder.
    pub fn enhancement_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.projection.params());
        p.extend(self.tscc.params());
        p.push(self.backbone.position);
        p.extend(self.backbone.adapter_params());
        p.extend(self.decoder.params());
        p
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.backbone.adapter_params()
    }

    /// Splits parameter names into trainable and frozen sets.
    pub fn partition(&self) -> Result<Partition> {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for (_, p) in self.store.iter() {
            if p.name.is_empty() {
                return Err(Error::Parameter("unnamed parameter encountered".into()));
            }
            if p.trainable {
                trainable.push(p.name.clone());
            } else {
                frozen.push(p.name.clone());
            }
        }
        let known: BTreeSet<ParamId> = self
            .host_params()
            .into_iter()
            .chain(self.enhancement_params())
            .collect();
        if known.len() != self.store.len() {
            return Err(Error::Parameter(format!(
                "{} parameters registered but {} attributed to components",
                self.store.len(),
                known.len()
            )));
        }
        Ok(Partition { trainable, frozen })
    }
}
