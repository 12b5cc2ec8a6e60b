//! Frozen pre-norm causal transformer with per-layer adapter hooks.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, TimeAdapter};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, merge_heads, scaled_dot_attention, split_heads, Builder, Init, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

/// Cost scope under which the self-attention kernel is accounted.
pub const SELF_ATTENTION_SCOPE: &str = "self_attention";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub frozen: bool,
    /// Standard deviation of the seeded host-weight initialization.
    pub init_std: f64,
    pub eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            ffn_width: 256,
            max_positions: 64,
            frozen: true,
            init_std: 0.02,
            eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("backbone.layers must be at least 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.heads = {} does not divide backbone.width = {}",
                self.heads, self.width
            )));
        }
        if self.ffn_width == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "backbone.ffn_width and backbone.max_positions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: b.param(&format!("{name}.gain"), &[width], Init::Ones)?,
            bias: b.param(&format!("{name}.bias"), &[width], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, eps: T) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, eps)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Host weights of one transformer block plus its optional adapter.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapter: Option<TimeAdapter>,
    pub heads: usize,
    pub eps: f64,
}

impl AttentionLayer {
    fn host_params(&self) -> Vec<ParamId> {
        let mut p = self.ln1.params();
        for l in [&self.query, &self.key, &self.value, &self.output, &self.fc1, &self.fc2] {
            p.extend(l.params());
        }
        p.extend(self.ln2.params());
        p
    }

    /// One pre-norm block. Returns the block output and the attention weights `[B, heads, N, N]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let n = g.shape(x)[1];
        let eps = T::lit(self.eps);
        let u = self.ln1.forward(g, store, x, eps)?;
        let q = self.query.forward(g, store, u)?;
        let mut k = self.key.forward(g, store, u)?;
        let mut v = self.value.forward(g, store, u)?;
        if let Some(adapter) = &self.adapter {
            let (dk, dv) = adapter.forward(g, store, u)?;
            k = g.add(k, dk)?;
            v = g.add(v, dv)?;
        }
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let k_t = g.transpose_last(k)?;
        let mask = g.constant(causal_mask(n))?;
        let outer = g.cost_scope();
        g.set_cost_scope(Some(SELF_ATTENTION_SCOPE));
        let kernel = scaled_dot_attention(g, q, k_t, v, Some(mask));
        g.set_cost_scope(outer);
        let (mixed, weights) = kernel?;
        let mixed = merge_heads(g, mixed)?;
        let attn = self.output.forward(g, store, mixed)?;
        let x = g.add(x, attn)?;
        let u = self.ln2.forward(g, store, x, eps)?;
        let f = self.fc1.forward(g, store, u)?;
        let f = g.gelu(f)?;
        let f = self.fc2.forward(g, store, f)?;
        Ok((g.add(x, f)?, weights))
    }
}

/// Learned positions, stacked blocks and a final layer norm.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub position: ParamId,
    pub layers: Vec<AttentionLayer>,
    pub final_norm: LayerNorm,
    pub config: BackboneConfig,
}

/// Output of [`Backbone::forward`].
#[derive(Clone, Debug)]
pub struct BackboneOutputs {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl Backbone {
    /// Host weights are registered as frozen when `cfg.frozen`; the positional
    /// table and adapters are always trainable.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cfg: &BackboneConfig,
        adapter: Option<&AdapterConfig>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let restore = b.trainable;
        b.trainable = true;
        let position = b.param("backbone.position", &[cfg.max_positions, d], Init::Normal(cfg.init_std))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("backbone.layers.{i}");
            b.trainable = !cfg.frozen;
            let w = Init::Normal(cfg.init_std);
            let lin = |b: &mut Builder<'_, T>, part: &str, input: usize, output: usize, bias: bool| {
                b.linear_with(&format!("{name}.{part}"), input, output, bias, w, Init::Zeros)
            };
            let ln1 = LayerNorm::new(b, &format!("{name}.ln1"), d)?;
            let query = lin(b, "query", d, d, true)?;
            let key = lin(b, "key", d, d, false)?;
            let value = lin(b, "value", d, d, true)?;
            let output = lin(b, "output", d, d, true)?;
            let ln2 = LayerNorm::new(b, &format!("{name}.ln2"), d)?;
            let fc1 = lin(b, "fc1", d, cfg.ffn_width, true)?;
            let fc2 = lin(b, "fc2", cfg.ffn_width, d, true)?;
            layers.push(AttentionLayer {
                ln1,
                query,
                key,
                value,
                output,
                ln2,
                fc1,
                fc2,
                adapter: None,
                heads: cfg.heads,
                eps: cfg.eps,
            });
        }
        b.trainable = !cfg.frozen;
        let final_norm = LayerNorm::new(b, "backbone.final_norm", d)?;
        b.trainable = restore;
        if let Some(a) = adapter.filter(|a| a.enabled) {
            let mut rng = b.rng.derive("adapter");
            let mut ab = Builder::new(&mut *b.store, &mut rng, true);
            for (i, layer) in layers.iter_mut().enumerate() {
                layer.adapter = Some(TimeAdapter::new(&mut ab, &format!("adapter.layers.{i}"), a, d)?);
            }
        }
        Ok(Self {
            position,
            layers,
            final_norm,
            config: cfg.clone(),
        })
    }

    /// `x: [B, N, D_llm]`, already the fused `GA + GC`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<BackboneOutputs> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.width {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: shape,
                rhs: vec![self.config.width],
            });
        }
        let n = shape[1];
        if n > self.config.max_positions {
            return Err(Error::IndexOutOfRange {
                op: "backbone positions",
                index: n,
                limit: self.config.max_positions,
            });
        }
        let pos = g.param(store, self.position)?;
        let pos = g.slice(pos, 0, 0, n)?;
        let mut h = g.add(x, pos)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, w) = layer.forward(g, store, h)?;
            h = out;
            attention.push(w);
        }
        let output = self.final_norm.forward(g, store, h, T::lit(self.config.eps))?;
        Ok(BackboneOutputs { output, attention })
    }

    /// Host weights (everything except positions and adapters).
    pub fn host_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.layers.iter().flat_map(|l| l.host_params()).collect();
        p.extend(self.final_norm.params());
        p
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.adapter.as_ref())
            .flat_map(|a| a.params())
            .collect()
    }
}
