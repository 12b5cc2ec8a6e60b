//! Recurrent key/value correction plugged into each frozen attention layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Builder, Init, Linear, Lstm};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// `down → long (r→h) → short (h→r) → up`.
    Sequential,
    /// Long and short paths both read `down(x)`; their `r`-wide outputs are summed.
    Parallel,
    /// `down → up` with no recurrence.
    LowRank,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Sequential => "sequential",
            Topology::Parallel => "parallel",
            Topology::LowRank => "low_rank",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sequential" => Some(Topology::Sequential),
            "parallel" => Some(Topology::Parallel),
            "low_rank" => Some(Topology::LowRank),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub enabled: bool,
    pub rank: usize,
    pub hidden: usize,
    pub scale: f64,
    pub topology: Topology,
}

impl AdapterConfig {
    pub fn for_width(d_llm: usize) -> Self {
        Self {
            enabled: true,
            rank: (d_llm / 8).max(1),
            hidden: (d_llm / 2).max(2),
            scale: 1.0,
            topology: Topology::Sequential,
        }
    }

    pub fn validate(&self, d_llm: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.rank == 0 || self.rank >= d_llm {
            return Err(Error::Config(format!(
                "adapter.rank = {} must lie in [1, {d_llm})",
                self.rank
            )));
        }
        if self.hidden <= self.rank {
            return Err(Error::Config(format!(
                "adapter.hidden = {} must exceed adapter.rank = {}",
                self.hidden, self.rank
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("adapter.scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Paths {
    Sequential { long: Lstm, short: Lstm },
    Parallel { long: Lstm, long_proj: Linear, short: Lstm },
    LowRank,
}

/// One adapter instance for one attention layer.
#[derive(Clone, Debug)]
pub struct TimeAdapter {
    pub down: Linear,
    pub up: Linear,
    paths: Paths,
    pub width: usize,
    pub scale: f64,
}

impl TimeAdapter {
    /// `up` starts at zero so a fresh adapter contributes nothing.
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cfg: &AdapterConfig, width: usize) -> Result<Self> {
        let (r, h) = (cfg.rank, cfg.hidden);
        let down = b.linear(&format!("{name}.down"), width, r, true)?;
        let paths = match cfg.topology {
            Topology::Sequential => Paths::Sequential {
                long: Lstm::new(b, &format!("{name}.long"), r, h)?,
                short: Lstm::new(b, &format!("{name}.short"), h, r)?,
            },
            Topology::Parallel => Paths::Parallel {
                long: Lstm::new(b, &format!("{name}.long"), r, h)?,
                long_proj: b.linear(&format!("{name}.long_proj"), h, r, false)?,
                short: Lstm::new(b, &format!("{name}.short"), r, r)?,
            },
            Topology::LowRank => Paths::LowRank,
        };
        let up = b.linear_with(&format!("{name}.up"), r, 2 * width, false, Init::Zeros, Init::Zeros)?;
        Ok(Self {
            down,
            up,
            paths,
            width,
            scale: cfg.scale,
        })
    }

    /// `x: [B, N, D_llm] -> (Δk, Δv)`, each `[B, N, D_llm]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::ShapeMismatch {
                op: "adapter",
                lhs: shape,
                rhs: vec![self.width],
            });
        }
        if shape[1] == 0 {
            return Err(Error::invalid("adapter", "sequence has no segments"));
        }
        let u = self.down.forward(g, store, x)?;
        let mid = match &self.paths {
            Paths::Sequential { long, short } => {
                let a = long.forward(g, store, u)?;
                short.forward(g, store, a)?
            }
            Paths::Parallel { long, long_proj, short } => {
                let a = long.forward(g, store, u)?;
                let a = long_proj.forward(g, store, a)?;
                let b = short.forward(g, store, u)?;
                g.add(a, b)?
            }
            Paths::LowRank => u,
        };
        let out = self.up.forward(g, store, mid)?;
        let out = if self.scale == 1.0 {
            out
        } else {
            g.scale(out, T::lit(self.scale))?
        };
        let dk = g.slice(out, 2, 0, self.width)?;
        let dv = g.slice(out, 2, self.width, self.width)?;
        Ok((dk, dv))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.down.params();
        match &self.paths {
            Paths::Sequential { long, short } => {
                p.extend(long.params());
                p.extend(short.params());
            }
            Paths::Parallel { long, long_proj, short } => {
                p.extend(long.params());
                p.extend(long_proj.params());
                p.extend(short.params());
            }
            Paths::LowRank => {}
        }
        p.extend(self.up.params());
        p
    }

    pub fn topology(&self) -> Topology {
        match self.paths {
            Paths::Sequential { .. } => Topology::Sequential,
            Paths::Parallel { .. } => Topology::Parallel,
            Paths::LowRank => Topology::LowRank,
        }
    }
}
