use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, ParamId, ParamStore};

/// Hidden and cell state of a ConvLSTM, both `(spatial..., hidden)`.
#[derive(Debug, Clone)]
pub struct ConvLstmState<V> {
    pub hidden: V,
    pub cell: V,
}

/// ConvLSTM without peephole terms. All four gate pre-activations come from
/// one convolution over the input and one over the previous hidden state,
/// packed along the channel axis in the order input, forget, output,
/// candidate.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

pub(crate) fn kernel_shape(extents: &[usize], cin: usize, cout: usize) -> Vec<usize> {
    let mut s = extents.to_vec();
    s.push(cin);
    s.push(cout);
    s
}

impl ConvLstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        kernel: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let taps: usize = kernel.iter().product();
        let w_x = store.add_xavier(
            format!("{prefix}.w_x"),
            &kernel_shape(kernel, in_channels, 4 * hidden),
            taps * in_channels,
            taps * 4 * hidden,
            rng,
        )?;
        let w_h = store.add_xavier(
            format!("{prefix}.w_h"),
            &kernel_shape(kernel, hidden, 4 * hidden),
            taps * hidden,
            taps * 4 * hidden,
            rng,
        )?;
        let bias = store.add_zeros(format!("{prefix}.b"), &[4 * hidden])?;
        Ok(ConvLstmCell { w_x, w_h, bias, hidden })
    }

    /// One time step. `None` stands for the all-zero initial state; it gives
    /// the same result as passing explicit zeros without the wasted
    /// convolution.
    pub fn step<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        x: &G::Var,
        state: Option<&ConvLstmState<G::Var>>,
    ) -> Result<ConvLstmState<G::Var>> {
        let h = self.hidden;
        let w_x = g.param(store, self.w_x);
        let bias = g.param(store, self.bias);
        let mut gates = g.conv(x, &w_x, ConvSpec::default())?;
        if let Some(s) = state {
            let hs = g.value(&s.hidden).shape();
            let xs = g.value(x).shape();
            if hs[..hs.len() - 1] != xs[..xs.len() - 1] {
                return Err(Error::shape("convlstm_step", format!("input {xs:?} vs state {hs:?}")));
            }
            let w_h = g.param(store, self.w_h);
            let rec = g.conv(&s.hidden, &w_h, ConvSpec::default())?;
            gates = g.add(&gates, &rec)?;
        }
        let gates = g.add_bias(&gates, &bias)?;
        let pre_i = g.slice(&gates, 0, h)?;
        let pre_f = g.slice(&gates, h, h)?;
        let pre_o = g.slice(&gates, 2 * h, h)?;
        let pre_c = g.slice(&gates, 3 * h, h)?;
        let i = g.sigmoid(&pre_i);
        let o = g.sigmoid(&pre_o);
        let cand = g.tanh(&pre_c);
        let mut cell = g.mul(&i, &cand)?;
        if let Some(s) = state {
            let f = g.sigmoid(&pre_f);
            let kept = g.mul(&f, &s.cell)?;
            cell = g.add(&kept, &cell)?;
        }
        let squashed = g.tanh(&cell);
        let hidden = g.mul(&o, &squashed)?;
        Ok(ConvLstmState { hidden, cell })
    }

    /// Runs over a whole sequence from a zero state. With `reverse` the
    /// sequence is consumed back to front; outputs stay aligned with the
    /// input positions either way.
    pub fn run<G: Graph>(&self, g: &mut G, store: &ParamStore, xs: &[G::Var], reverse: bool) -> Result<Vec<G::Var>> {
        let mut out: Vec<Option<G::Var>> = vec![None; xs.len()];
        let mut state: Option<ConvLstmState<G::Var>> = None;
        let order: Box<dyn Iterator<Item = usize>> =
            if reverse { Box::new((0..xs.len()).rev()) } else { Box::new(0..xs.len()) };
        for t in order {
            let next = self.step(g, store, &xs[t], state.as_ref())?;
            out[t] = Some(next.hidden.clone());
            state = Some(next);
        }
        Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
    }
}
