//! Parameterized building blocks shared by the model components.

use crate::error::{Error, Result};
use crate::numerics::{recurrent_cell_step, Graph, ParamId, ParamStore, RngState, Tensor, Var};
use crate::scalar::Scalar;

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Registers parameters under a name prefix with a shared trainability flag.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut RngState,
    pub trainable: bool,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut RngState, trainable: bool) -> Self {
        Self { store, rng, trainable }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.uniform(-b, b)).collect(),
            Init::Normal(s) => (0..n).map(|_| self.rng.normal::<T>() * T::lit(s)).collect(),
        };
        self.store
            .register(name, Tensor::new(shape.to_vec(), data)?, self.trainable)
    }

    /// Affine map with the usual `±1/√fan_in` uniform initialization.
    pub fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        self.linear_with(name, input, output, bias, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn linear_with(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Linear> {
        let weight = self.param(&format!("{name}.weight"), &[input, output], weight_init)?;
        let bias = if bias {
            Some(self.param(&format!("{name}.bias"), &[output], bias_init)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }
}

/// `y = x·W + b` over the last axis; `W: [input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let width = *g.shape(x).last().unwrap_or(&0);
        if width != self.input {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.input, self.output],
            });
        }
        let w = g.param(store, self.weight)?;
        let b = match self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Two affine layers with GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Self {
            first: b.linear(&format!("{name}.fc1"), input, hidden, true)?,
            second: b.linear(&format!("{name}.fc2"), hidden, output, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.second.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        p
    }
}

/// LSTM run forward along axis 1 of a `[B, N, input]` sequence from zero state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: b.param(&format!("{name}.w_ih"), &[input, 4 * hidden], Init::Uniform(bound))?,
            w_hh: b.param(&format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::Uniform(bound))?,
            bias: b.param(&format!("{name}.bias"), &[4 * hidden], Init::Uniform(bound))?,
            input,
            hidden,
        })
    }

    /// Returns the hidden state at every step: `[B, N, hidden]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                lhs: shape,
                rhs: vec![self.input, self.hidden],
            });
        }
        let (batch, steps) = (shape[0], shape[1]);
        if steps == 0 {
            return Err(Error::invalid("lstm", "sequence has no steps"));
        }
        let w_ih = g.param(store, self.w_ih)?;
        let w_hh = g.param(store, self.w_hh)?;
        let bias = g.param(store, self.bias)?;
        let mut h = g.constant(Tensor::zeros([batch, self.hidden]))?;
        let mut c = g.constant(Tensor::zeros([batch, self.hidden]))?;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice(x, 1, t, 1)?;
            let xt = g.reshape(xt, &[batch, self.input])?;
            (h, c) = recurrent_cell_step(g, xt, h, c, w_ih, w_hh, bias)?;
            outputs.push(g.reshape(h, &[batch, 1, self.hidden])?);
        }
        g.concat(&outputs, 1)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_ih, self.w_hh, self.bias]
    }
}

/// `[B, N, D] -> [B, heads, N, D/heads]`.
pub(crate) fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, n, h * dh])
}

/// `softmax(q·kᵀ/√d_h + mask)·v` over split heads. `q: [..., N_q, d_h]`,
/// `k_t: [..., d_h, N_k]`, `v: [..., N_k, d_h]`; the batch dims of `k_t` and
/// `v` may be a trailing suffix of those of `q`. Returns the mixed values and
/// the attention weights `[..., N_q, N_k]`.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k_t: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().unwrap_or(&1);
    let scores = g.matmul(q, k_t)?;
    let scores = g.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt())?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let axis = g.shape(scores).len() - 1;
    let weights = g.softmax(scores, axis)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Additive causal mask `[n, n]`: zero on and below the diagonal, a large
/// negative number above it so the softmax weight underflows to exactly zero.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = T::lit(-1e9);
        }
    }
    m
}
