use rand::Rng;

use super::convlstm::{kernel_shape, ConvLstmCell};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, ParamId, ParamStore, PoolKind};

/// Shapes recorded at named points of a forward pass.
pub type Trace = Vec<(String, Vec<usize>)>;

fn record<G: Graph>(g: &G, trace: &mut Trace, name: String, v: &G::Var) {
    trace.push((name, g.value(v).shape().to_vec()));
}

/// Kernel plus bias, applied per frame.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        extents: &[usize],
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let taps: usize = extents.iter().product();
        let w = store.add_xavier(format!("{prefix}.w"), &kernel_shape(extents, cin, cout), taps * cin, taps * cout, rng)?;
        let b = store.add_zeros(format!("{prefix}.b"), &[cout])?;
        Ok(Conv { w, b })
    }

    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<G::Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv(x, &w, ConvSpec::default())?;
        g.add_bias(&y, &b)
    }
}

/// Affine map `x W + b` on row vectors.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add_xavier(format!("{prefix}.w"), &[inputs, outputs], inputs, outputs, rng)?;
        let b = store.add_zeros(format!("{prefix}.b"), &[outputs])?;
        Ok(Dense { w, b })
    }

    /// `x` is `(rows, inputs)`.
    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<G::Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, &w)?;
        g.add_bias(&y, &b)
    }
}

/// Learnable scale and shift for sequence-wise normalization.
#[derive(Debug, Clone)]
pub struct SeqNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl SeqNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, eps: f64) -> Result<Self> {
        let gamma = store.add_ones(format!("{prefix}.gamma"), &[channels])?;
        let beta = store.add_zeros(format!("{prefix}.beta"), &[channels])?;
        Ok(SeqNorm { gamma, beta, eps })
    }

    /// Normalizes each channel over every timestep and position of `frames`.
    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, frames: &[G::Var]) -> Result<Vec<G::Var>> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let stacked = g.stack(frames)?;
        let normed = g.channel_norm(&stacked, &gamma, &beta, self.eps)?;
        (0..frames.len()).map(|t| g.index(&normed, t)).collect()
    }
}

/// ConvLSTM whose per-step output is concatenated with the step input and
/// passed through LeakyReLU. Output channels = input channels + hidden.
#[derive(Debug, Clone)]
pub struct BlockR {
    pub cell: ConvLstmCell,
    pub slope: f64,
}

impl BlockR {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        kernel: &[usize],
        slope: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(BlockR { cell: ConvLstmCell::new(store, prefix, in_channels, hidden, kernel, rng)?, slope })
    }

    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, xs: &[G::Var]) -> Result<Vec<G::Var>> {
        let hs = self.cell.run(g, store, xs, false)?;
        xs.iter()
            .zip(&hs)
            .map(|(x, h)| {
                let cat = g.concat(&[x.clone(), h.clone()])?;
                Ok(g.leaky_relu(&cat, self.slope))
            })
            .collect()
    }
}

/// Encoder block (LRBP, or L3RBP on volumes): bidirectional ConvLSTM,
/// block R on the merged directions, 1x1 projection, 2x max pooling and
/// sequence normalization.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub forward_cell: ConvLstmCell,
    pub backward_cell: ConvLstmCell,
    pub residual: BlockR,
    pub proj: Conv,
    pub norm: SeqNorm,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        kernel: usize,
        slope: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = vec![kernel; rank];
        let forward_cell = ConvLstmCell::new(store, &format!("{prefix}.fwd"), in_channels, hidden, &k, rng)?;
        let backward_cell = ConvLstmCell::new(store, &format!("{prefix}.bwd"), in_channels, hidden, &k, rng)?;
        let residual = BlockR::new(store, &format!("{prefix}.res"), 2 * hidden, hidden, &k, slope, rng)?;
        let proj = Conv::new(store, &format!("{prefix}.proj"), &vec![1; rank], 3 * hidden, out_channels, rng)?;
        let norm = SeqNorm::new(store, &format!("{prefix}.norm"), out_channels, eps)?;
        Ok(EncoderBlock { forward_cell, backward_cell, residual, proj, norm })
    }

    /// Forward and backward direction outputs before merging.
    pub fn directions<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        xs: &[G::Var],
    ) -> Result<(Vec<G::Var>, Vec<G::Var>)> {
        Ok((self.forward_cell.run(g, store, xs, false)?, self.backward_cell.run(g, store, xs, true)?))
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        xs: &[G::Var],
        name: &str,
        trace: &mut Trace,
    ) -> Result<Vec<G::Var>> {
        let first = xs.first().ok_or(Error::Empty("encoder block input"))?;
        let shape = g.value(first).shape();
        if let Some(&odd) = shape[..shape.len() - 1].iter().find(|&&d| d % 2 != 0) {
            return Err(Error::shape("encoder block", format!("spatial extent {odd} is not divisible by 2")));
        }
        let (fwd, bwd) = self.directions(g, store, xs)?;
        let merged: Vec<G::Var> =
            fwd.into_iter().zip(bwd).map(|(f, b)| g.concat(&[f, b])).collect::<Result<_>>()?;
        record(g, trace, format!("{name}.bidirectional"), &merged[0]);
        let res = self.residual.forward(g, store, &merged)?;
        drop(merged);
        record(g, trace, format!("{name}.residual"), &res[0]);
        let mut pooled = Vec::with_capacity(res.len());
        for r in res {
            let p = self.proj.forward(g, store, &r)?;
            pooled.push(g.pool(&p, PoolKind::Max, 2)?);
        }
        record(g, trace, format!("{name}.pooled"), &pooled[0]);
        self.norm.forward(g, store, &pooled)
    }
}

/// The temporal layer inside a decoder up-sampling block.
#[derive(Debug, Clone)]
pub enum UpCore {
    /// URB / R3BP.
    ConvLstm(ConvLstmCell),
    /// UQB / U4DB: time is stacked as a leading spatial axis and mixed by
    /// one or more convolutions, then a pointwise channel mixer.
    Quasi4d { factors: Vec<Conv>, mixer: Conv },
    /// UTB: plain per-frame convolution; attention happens before.
    FrameConv(Conv),
}

/// Decoder block: 2x nearest up-sampling, a temporal core, concatenation
/// with the up-sampled input, LeakyReLU, 1x1 projection and sequence
/// normalization.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub core: UpCore,
    pub proj: Conv,
    pub norm: SeqNorm,
    pub slope: f64,
}

/// Kernel extents over `(T, spatial...)` for the quasi-4D factorization:
/// one full `k^(rank+1)` kernel on frames, and on volumes a `(k,1,k,k)`
/// kernel chained with a `(1,k,k,k)` kernel so time and depth are never
/// mixed in a single dense 4D kernel.
pub fn quasi4d_factors(rank: usize, kernel: usize) -> Vec<Vec<usize>> {
    match rank {
        2 => vec![vec![kernel; 3]],
        _ => {
            let mut time_plane = vec![kernel; rank + 1];
            time_plane[1] = 1;
            let mut volume = vec![kernel; rank + 1];
            volume[0] = 1;
            vec![time_plane, volume]
        }
    }
}

impl UpBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: super::DecoderKind,
        rank: usize,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        kernel: usize,
        slope: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        use super::DecoderKind;
        let k = vec![kernel; rank];
        let core = match kind {
            DecoderKind::ConvLstm => {
                UpCore::ConvLstm(ConvLstmCell::new(store, &format!("{prefix}.lstm"), in_channels, hidden, &k, rng)?)
            }
            DecoderKind::Quasi4d => {
                let mut factors = Vec::new();
                let mut cin = in_channels;
                for (i, extents) in quasi4d_factors(rank, kernel).iter().enumerate() {
                    factors.push(Conv::new(store, &format!("{prefix}.q4d{i}"), extents, cin, hidden, rng)?);
                    cin = hidden;
                }
                let mixer = Conv::new(store, &format!("{prefix}.mix"), &vec![1; rank + 1], hidden, hidden, rng)?;
                UpCore::Quasi4d { factors, mixer }
            }
            DecoderKind::Transformer => {
                UpCore::FrameConv(Conv::new(store, &format!("{prefix}.conv"), &k, in_channels, hidden, rng)?)
            }
        };
        let proj = Conv::new(store, &format!("{prefix}.proj"), &vec![1; rank], in_channels + hidden, out_channels, rng)?;
        let norm = SeqNorm::new(store, &format!("{prefix}.norm"), out_channels, eps)?;
        Ok(UpBlock { core, proj, norm, slope })
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        xs: &[G::Var],
        name: &str,
        trace: &mut Trace,
    ) -> Result<Vec<G::Var>> {
        let up: Vec<G::Var> = xs.iter().map(|x| g.upsample(x, 2)).collect::<Result<_>>()?;
        record(g, trace, format!("{name}.upsampled"), &up[0]);
        let core: Vec<G::Var> = match &self.core {
            UpCore::ConvLstm(cell) => cell.run(g, store, &up, false)?,
            UpCore::FrameConv(conv) => up.iter().map(|u| conv.forward(g, store, u)).collect::<Result<_>>()?,
            UpCore::Quasi4d { factors, mixer } => {
                let mut vol = g.stack(&up)?;
                for f in factors {
                    vol = f.forward(g, store, &vol)?;
                }
                vol = mixer.forward(g, store, &vol)?;
                (0..up.len()).map(|t| g.index(&vol, t)).collect::<Result<_>>()?
            }
        };
        let mut projected = Vec::with_capacity(up.len());
        for (u, c) in up.into_iter().zip(core) {
            let cat = g.concat(&[u, c])?;
            let act = g.leaky_relu(&cat, self.slope);
            projected.push(self.proj.forward(g, store, &act)?);
        }
        self.norm.forward(g, store, &projected)
    }
}
