use super::graph::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// One LSTM step.
///
/// `x: [B, in]`, `h, c: [B, hidden]`, `w_ih: [in, 4·hidden]`,
/// `w_hh: [hidden, 4·hidden]`, `bias: [4·hidden]`. Gate blocks are ordered
/// input, forget, candidate, output. Returns the next `(h, c)`.
pub fn recurrent_cell_step<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    let xi = g.matmul(x, w_ih)?;
    let hh = g.matmul(h, w_hh)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add(pre, bias)?;
    let gate = |g: &mut Graph<T>, k: usize| g.slice(pre, 1, k * hidden, hidden);
    let (i, f, cand, o) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cand = g.tanh(cand)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
