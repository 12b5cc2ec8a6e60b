//! Decoder head and autoregressive multi-horizon rollout.

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::{Builder, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// One head over the flattened `[N·D_llm]` window.
    Flatten,
    /// A shared head per segment emitting `τ/N` values each.
    PerSegment,
}

impl DecoderMode {
    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::Flatten => "flatten",
            DecoderMode::PerSegment => "per_segment",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "flatten" => Some(DecoderMode::Flatten),
            "per_segment" => Some(DecoderMode::PerSegment),
            _ => None,
        }
    }
}

/// `O = F₂(GELU(F₁(Y)))`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub first: Linear,
    pub second: Linear,
    pub mode: DecoderMode,
    pub segments: usize,
    pub width: usize,
    pub horizon: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        mode: DecoderMode,
        segments: usize,
        width: usize,
        hidden: usize,
        horizon: usize,
    ) -> Result<Self> {
        let (input, output) = match mode {
            DecoderMode::Flatten => (segments * width, horizon),
            DecoderMode::PerSegment => {
                if segments == 0 || horizon % segments != 0 {
                    return Err(Error::Config(format!(
                        "per-segment decoding needs the horizon {horizon} to be divisible by {segments} segments"
                    )));
                }
                (width, horizon / segments)
            }
        };
        Ok(Self {
            first: b.linear("decoder.fc1", input, hidden, true)?,
            second: b.linear("decoder.fc2", hidden, output, true)?,
            mode,
            segments,
            width,
            horizon,
        })
    }

    /// `y: [B, N, D_llm] -> [B, τ]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        if shape.len() != 3 || shape[1] != self.segments || shape[2] != self.width {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![self.segments, self.width],
            });
        }
        let b = shape[0];
        let x = match self.mode {
            DecoderMode::Flatten => g.reshape(y, &[b, self.segments * self.width])?,
            DecoderMode::PerSegment => y,
        };
        let h = self.first.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let o = self.second.forward(g, store, h)?;
        g.reshape(o, &[b, self.horizon])
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        p
    }
}

/// Rolls a one-step predictor out to `horizon` values.
///
/// `step` maps a normalized context of length `L` to `τ` normalized values.
/// Each round appends the prediction and drops the oldest `τ` context values;
/// the final round is truncated so exactly `horizon` values are returned,
/// giving `horizon div τ` full rounds and a remainder of `horizon mod τ`.
pub fn rollout<T: Scalar>(
    context: &[T],
    tau: usize,
    horizon: usize,
    mut step: impl FnMut(&[T]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let mut out = rollout_batch(&[context.to_vec()], tau, horizon, |ctx| Ok(vec![step(&ctx[0])?]))?;
    Ok(out.remove(0))
}

/// [`rollout`] over several contexts at once; `step` sees every context of a round together.
pub fn rollout_batch<T: Scalar>(
    contexts: &[Vec<T>],
    tau: usize,
    horizon: usize,
    mut step: impl FnMut(&[Vec<T>]) -> Result<Vec<Vec<T>>>,
) -> Result<Vec<Vec<T>>> {
    if horizon == 0 {
        return Err(Error::invalid("rollout", "horizon must be at least 1"));
    }
    let l = contexts.first().map_or(0, Vec::len);
    if tau == 0 || l == 0 || contexts.iter().any(|c| c.len() != l) {
        return Err(Error::invalid(
            "rollout",
            "empty or ragged contexts, or zero native step",
        ));
    }
    let mut ctx = contexts.to_vec();
    let mut out = vec![Vec::with_capacity(horizon.div_ceil(tau) * tau); ctx.len()];
    let mut produced = 0;
    while produced < horizon {
        let preds = step(&ctx)?;
        if preds.len() != ctx.len() || preds.iter().any(|p| p.len() != tau) {
            return Err(Error::invalid(
                "rollout",
                format!("step must return {} rows of {tau} values", ctx.len()),
            ));
        }
        let more = produced + tau < horizon;
        for ((c, o), p) in ctx.iter_mut().zip(&mut out).zip(preds) {
            if more {
                c.extend_from_slice(&p);
                c.drain(..c.len() - l);
            }
            o.extend(p);
        }
        produced += tau;
    }
    for o in &mut out {
        o.truncate(horizon);
    }
    Ok(out)
}

/// Normalizes a raw context, rolls out in normalized space, and maps the
/// predictions back with the original context statistics.
pub fn rollout_raw<T: Scalar>(
    raw_context: &[T],
    eps: T,
    tau: usize,
    horizon: usize,
    step: impl FnMut(&[T]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let stats = NormStats::from_context(raw_context, eps);
    let pred = rollout(&stats.normalize(raw_context), tau, horizon, step)?;
    Ok(stats.denormalize(&pred))
}
