//! Temporal-semantic cross-correlation: alignment of time-series embeddings
//! with semantic prototypes, variational anomaly decomposition, top-k
//! prototype infusion and gated fusion into backbone-width embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{merge_heads, scaled_dot_attention, split_heads, Builder, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};
use crate::scalar::Scalar;

/// Hyperparameters of the TSCC stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsccConfig {
    /// When false the stage reduces to `F_llm(J)`.
    pub enabled: bool,
    pub cross_heads: usize,
    /// Encoder width `n` of the variational decomposition.
    pub vae_hidden: usize,
    /// Latent width `m`.
    pub latent: usize,
    pub k_top: usize,
    pub gate_hidden: usize,
    pub logvar_clamp: f64,
    pub eps: f64,
}

impl TsccConfig {
    pub fn for_width(d: usize) -> Self {
        Self {
            enabled: true,
            cross_heads: 4,
            vae_hidden: (d / 2).max(1),
            latent: (d / 4).max(1),
            k_top: 5,
            gate_hidden: 2 * d,
            logvar_clamp: 10.0,
            eps: 1e-5,
        }
    }

    pub fn validate(&self, width: usize, prototypes: usize) -> Result<()> {
        if self.cross_heads == 0 || width % self.cross_heads != 0 {
            return Err(Error::Config(format!(
                "tscc.cross_heads = {} does not divide width {width}",
                self.cross_heads
            )));
        }
        if self.enabled {
            if self.vae_hidden == 0 || self.vae_hidden >= width {
                return Err(Error::Config(format!(
                    "tscc.vae_hidden = {} must lie in [1, {width})",
                    self.vae_hidden
                )));
            }
            if self.latent == 0 || self.latent > self.vae_hidden {
                return Err(Error::Config(format!(
                    "tscc.latent = {} must lie in [1, {}]",
                    self.latent, self.vae_hidden
                )));
            }
            if self.k_top == 0 || self.k_top > prototypes {
                return Err(Error::Config(format!(
                    "tscc.k_top = {} must lie in [1, {prototypes}]",
                    self.k_top
                )));
            }
        }
        if !(self.logvar_clamp > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("tscc.logvar_clamp and tscc.eps must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-head cross-attention with queries from `H` and keys/values from the prototypes.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Outputs of [`CrossAttention::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CrossAligned {
    /// `J: [B, N, D]`.
    pub joint: Var,
    /// `[B, heads, N, Kp]`.
    pub weights: Var,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(
                "cross_align",
                format!("{heads} heads do not divide width {width}"),
            ));
        }
        Ok(Self {
            query: b.linear(&format!("{name}.query"), width, width, true)?,
            key: b.linear(&format!("{name}.key"), width, width, false)?,
            value: b.linear(&format!("{name}.value"), width, width, true)?,
            output: b.linear(&format!("{name}.output"), width, width, true)?,
            heads,
        })
    }

    /// `prototypes: [Kp, D]`, `h: [B, N, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prototypes: Var,
        h: Var,
    ) -> Result<CrossAligned> {
        let (ps, hs) = (g.shape(prototypes).to_vec(), g.shape(h).to_vec());
        if ps.len() != 2 || hs.len() != 3 || ps[1] != hs[2] {
            return Err(Error::ShapeMismatch {
                op: "cross_align",
                lhs: ps,
                rhs: hs,
            });
        }
        let (kp, d) = (ps[0], ps[1]);
        let dh = d / self.heads;
        let q = self.query.forward(g, store, h)?;
        let q = split_heads(g, q, self.heads)?;
        let k = self.key.forward(g, store, prototypes)?;
        let k = g.reshape(k, &[kp, self.heads, dh])?;
        let k_t = g.permute(k, &[1, 2, 0])?;
        let v = self.value.forward(g, store, prototypes)?;
        let v = g.reshape(v, &[kp, self.heads, dh])?;
        let v = g.permute(v, &[1, 0, 2])?;
        let (mixed, weights) = scaled_dot_attention(g, q, k_t, v, None)?;
        let mixed = merge_heads(g, mixed)?;
        let joint = self.output.forward(g, store, mixed)?;
        Ok(CrossAligned { joint, weights })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// `S = l₂ + mean_{B,N}(J)` broadcast over the prototype axis.
pub fn enrich_prototypes<T: Scalar>(g: &mut Graph<T>, joint: Var, prototypes: Var) -> Result<Var> {
    let js = g.shape(joint).to_vec();
    let ps = g.shape(prototypes).to_vec();
    if js.len() != 3 || ps.len() != 2 || js[2] != ps[1] {
        return Err(Error::ShapeMismatch {
            op: "enrich_prototypes",
            lhs: js,
            rhs: ps,
        });
    }
    let flat = g.reshape(joint, &[js[0] * js[1], js[2]])?;
    let v = g.mean(flat, 0)?;
    g.add(prototypes, v)
}

/// Variational split of the joint space into anomaly and de-anomaly parts.
#[derive(Clone, Debug)]
pub struct AmVae {
    pub encoder: Linear,
    pub mu: Linear,
    pub logvar: Linear,
    pub decoder: Linear,
    pub clamp: f64,
}

/// Outputs of [`AmVae::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    /// Anomaly semantics `DC`.
    pub anomaly: Var,
    /// De-anomaly semantics `DA = J − DC`.
    pub clean: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

impl AmVae {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        width: usize,
        hidden: usize,
        latent: usize,
        clamp: f64,
    ) -> Result<Self> {
        Ok(Self {
            encoder: b.linear("tscc.vae.encoder", width, hidden, true)?,
            mu: b.linear("tscc.vae.mu", hidden, latent, true)?,
            logvar: b.linear("tscc.vae.logvar", hidden, latent, true)?,
            decoder: b.linear("tscc.vae.decoder", latent, width, true)?,
            clamp,
        })
    }

    /// With `rng == None` the noise is zero and `z == μ`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        joint: Var,
        rng: Option<&mut RngState>,
    ) -> Result<Decomposition> {
        let hidden = self.encoder.forward(g, store, joint)?;
        let hidden = g.gelu(hidden)?;
        let mu = self.mu.forward(g, store, hidden)?;
        let logvar = self.logvar.forward(g, store, hidden)?;
        let c = T::lit(self.clamp);
        let logvar = g.clamp(logvar, -c, c)?;
        let z = match rng {
            None => mu,
            Some(rng) => {
                let shape = g.shape(mu).to_vec();
                let n = shape.iter().product();
                let eps = Tensor::new(shape, (0..n).map(|_| rng.normal::<T>()).collect())?;
                let eps = g.constant(eps)?;
                reparameterize(g, mu, logvar, eps)?
            }
        };
        let anomaly = self.decoder.forward(g, store, z)?;
        let clean = g.sub(joint, anomaly)?;
        Ok(Decomposition {
            anomaly,
            clean,
            mu,
            logvar,
            z,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.encoder, &self.mu, &self.logvar, &self.decoder]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// `z = μ + ε ⊙ exp(½·logσ²)`.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, T::lit(0.5))?;
    let sigma = g.exp(half)?;
    let noise = g.mul(eps, sigma)?;
    g.add(mu, noise)
}

/// `M[b,n,i] = (1/D)·⟨std(H[b,n,:]), std(S[i,:])⟩`.
pub fn cross_correlation<T: Scalar>(g: &mut Graph<T>, h: Var, s: Var, eps: T) -> Result<Var> {
    let (hs, ss) = (g.shape(h).to_vec(), g.shape(s).to_vec());
    if hs.len() != 3 || ss.len() != 2 || hs[2] != ss[1] {
        return Err(Error::ShapeMismatch {
            op: "cross_correlation",
            lhs: hs,
            rhs: ss,
        });
    }
    let d = hs[2];
    let hn = g.standardize(h, 2, eps)?;
    let sn = g.standardize(s, 1, eps)?;
    let sn_t = g.transpose_last(sn)?;
    let m = g.matmul(hn, sn_t)?;
    g.scale(m, T::one() / T::from_usize(d).unwrap())
}

/// Indices of the `k` largest entries along the last axis of `m`, ordered by
/// descending value then ascending index. Output is flat, `k` per row.
pub fn topk_select<T: Scalar>(m: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let width = *m.shape().last().unwrap_or(&0);
    if k == 0 || k > width {
        return Err(Error::IndexOutOfRange {
            op: "topk_select",
            index: k,
            limit: width,
        });
    }
    let mut out = Vec::with_capacity(m.len() / width * k);
    let mut order: Vec<usize> = Vec::with_capacity(width);
    for row in m.data().chunks_exact(width) {
        order.clear();
        order.extend(0..width);
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        out.extend_from_slice(&order[..k]);
    }
    Ok(out)
}

/// `DX̄[b,n,:] = DX[b,n,:] ⊙ mean_{i ∈ idx[b,n]} S[i,:]`.
pub fn infuse<T: Scalar>(g: &mut Graph<T>, dx: Var, s: Var, indices: &[usize], k: usize) -> Result<Var> {
    let shape = g.shape(dx).to_vec();
    if shape.len() != 3 || g.shape(s).len() != 2 || g.shape(s)[1] != shape[2] {
        return Err(Error::ShapeMismatch {
            op: "infuse",
            lhs: shape,
            rhs: g.shape(s).to_vec(),
        });
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if k == 0 || indices.len() != b * n * k {
        return Err(Error::invalid(
            "infuse",
            format!("expected {} indices, got {}", b * n * k, indices.len()),
        ));
    }
    let rows = g.gather_rows(s, indices)?;
    let rows = g.reshape(rows, &[b, n, k, d])?;
    let w = g.mean(rows, 2)?;
    g.mul(dx, w)
}

/// `Attn = sigmoid(MLP([H, DX̄]))`, `G = Attn⊙H + (1−Attn)⊙J`, `GX = F_llm(G)`.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub mlp: Mlp,
    pub project: Linear,
}

/// Outputs of [`ChannelGate::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Gated {
    pub attention: Var,
    /// Fused representation before the width projection.
    pub fused: Var,
    pub output: Var,
}

impl ChannelGate {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        hidden: usize,
        llm_width: usize,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(b, &format!("{name}.mlp"), 2 * width, hidden, width)?,
            project: b.linear(&format!("{name}.f_llm"), width, llm_width, true)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        dx: Var,
        joint: Var,
    ) -> Result<Gated> {
        let both = g.concat(&[h, dx], 2)?;
        let logits = self.mlp.forward(g, store, both)?;
        let attention = g.sigmoid(logits)?;
        let fused = gate_fuse(g, attention, h, joint)?;
        let output = self.project.forward(g, store, fused)?;
        Ok(Gated {
            attention,
            fused,
            output,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.mlp.params();
        p.extend(self.project.params());
        p
    }
}

/// `a⊙h + (1−a)⊙j`.
pub fn gate_fuse<T: Scalar>(g: &mut Graph<T>, a: Var, h: Var, j: Var) -> Result<Var> {
    let ah = g.mul(a, h)?;
    let rest = g.one_minus(a)?;
    let rj = g.mul(rest, j)?;
    g.add(ah, rj)
}

/// The semantic-enhancement parts that exist only when TSCC is enabled.
#[derive(Clone, Debug)]
pub struct Enhancement {
    pub vae: AmVae,
    pub gate_clean: ChannelGate,
    pub gate_anomaly: ChannelGate,
    pub k_top: usize,
}

/// The TSCC stage from `(H, l₂)` to backbone-width embeddings.
#[derive(Clone, Debug)]
pub struct Tscc {
    pub align: CrossAttention,
    pub enhancement: Option<Enhancement>,
    /// Plain `F_llm(J)` projection used when enhancement is disabled.
    pub plain: Option<Linear>,
    pub eps: f64,
}

/// Every intermediate of one TSCC pass.
#[derive(Clone, Debug)]
pub struct TsccOutputs {
    pub joint: Var,
    pub align_weights: Var,
    pub enriched: Option<Var>,
    pub decomposition: Option<Decomposition>,
    pub correlation: Option<Var>,
    /// Flat top-k indices, `k_top` per `(b, n)`.
    pub topk: Vec<usize>,
    pub clean: Option<Gated>,
    pub anomaly: Option<Gated>,
    /// Input to the backbone: `GA + GC`, or `F_llm(J)` when disabled.
    pub fused: Var,
}

impl Tscc {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &TsccConfig, width: usize, llm_width: usize) -> Result<Self> {
        let align = CrossAttention::new(b, "tscc.align", width, cfg.cross_heads)?;
        let (enhancement, plain) = if cfg.enabled {
            let vae = AmVae::new(b, width, cfg.vae_hidden, cfg.latent, cfg.logvar_clamp)?;
            let gate_clean = ChannelGate::new(b, "tscc.gate_clean", width, cfg.gate_hidden, llm_width)?;
            let gate_anomaly = ChannelGate::new(b, "tscc.gate_anomaly", width, cfg.gate_hidden, llm_width)?;
            (
                Some(Enhancement {
                    vae,
                    gate_clean,
                    gate_anomaly,
                    k_top: cfg.k_top,
                }),
                None,
            )
        } else {
            (None, Some(b.linear("tscc.f_llm", width, llm_width, true)?))
        };
        Ok(Self {
            align,
            enhancement,
            plain,
            eps: cfg.eps,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        prototypes: Var,
        rng: Option<&mut RngState>,
    ) -> Result<TsccOutputs> {
        let aligned = self.align.forward(g, store, prototypes, h)?;
        let joint = aligned.joint;
        let Some(enh) = &self.enhancement else {
            let plain = self.plain.as_ref().expect("plain projection present when disabled");
            let fused = plain.forward(g, store, joint)?;
            return Ok(TsccOutputs {
                joint,
                align_weights: aligned.weights,
                enriched: None,
                decomposition: None,
                correlation: None,
                topk: Vec::new(),
                clean: None,
                anomaly: None,
                fused,
            });
        };
        let s = enrich_prototypes(g, joint, prototypes)?;
        let dec = enh.vae.forward(g, store, joint, rng)?;
        let m = cross_correlation(g, h, s, T::lit(self.eps))?;
        let topk = topk_select(g.value(m), enh.k_top)?;
        let da = infuse(g, dec.clean, s, &topk, enh.k_top)?;
        let dc = infuse(g, dec.anomaly, s, &topk, enh.k_top)?;
        let clean = enh.gate_clean.forward(g, store, h, da, joint)?;
        let anomaly = enh.gate_anomaly.forward(g, store, h, dc, joint)?;
        let fused = g.add(clean.output, anomaly.output)?;
        Ok(TsccOutputs {
            joint,
            align_weights: aligned.weights,
            enriched: Some(s),
            decomposition: Some(dec),
            correlation: Some(m),
            topk,
            clean: Some(clean),
            anomaly: Some(anomaly),
            fused,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.align.params();
        if let Some(e) = &self.enhancement {
            p.extend(e.vae.params());
            p.extend(e.gate_clean.params());
            p.extend(e.gate_anomaly.params());
        }
        if let Some(l) = &self.plain {
            p.extend(l.params());
        }
        p
    }
}

/// `KL(N(μ, σ²) ‖ N(0, I))` averaged over latent entries.
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    // ½(μ² + σ² − 1 − logσ²)
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -T::one())?;
    let t = g.scale(t, T::lit(0.5))?;
    g.mean_all(t)
}
