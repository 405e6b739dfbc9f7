use super::kernels::channel_norm_forward;
use super::Tensor;
use crate::error::{Error, Result};

/// Exponential moving averages of per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1 }
    }

    /// Folds the population statistics of `batch` into the running values.
    pub fn update(&mut self, batch: &[Tensor]) -> Result<()> {
        let x = stack_batch(batch)?;
        let c = x.channels();
        if c != self.mean.len() {
            return Err(Error::shape("running_stats", format!("{} channels, got {c}", self.mean.len())));
        }
        let rows = (x.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for ch in 0..c {
                var[ch] += (row[ch] - mean[ch]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows);
        let m = self.momentum;
        for ch in 0..c {
            self.mean[ch] = (1.0 - m) * self.mean[ch] + m * mean[ch];
            self.var[ch] = (1.0 - m) * self.var[ch] + m * var[ch];
        }
        Ok(())
    }
}

/// Where [`seq_norm`] takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum ChannelStats<'a> {
    /// Population statistics of the batch being normalized.
    Batch,
    Running(&'a RunningStats),
}

fn stack_batch(batch: &[Tensor]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Empty("seq_norm batch"));
    }
    Tensor::stack(batch)
}

/// Normalizes every channel jointly over all timesteps, positions and
/// sequences of the batch, then applies `gamma`/`beta`.
pub fn seq_norm(
    batch: &[Tensor],
    gamma: &Tensor,
    beta: &Tensor,
    stats: ChannelStats<'_>,
    eps: f64,
) -> Result<Vec<Tensor>> {
    let x = stack_batch(batch)?;
    let fixed = match stats {
        ChannelStats::Batch => None,
        ChannelStats::Running(r) => Some((r.mean.as_slice(), r.var.as_slice())),
    };
    let (y, _) = channel_norm_forward(&x, gamma, beta, eps, fixed)?;
    Ok(y.unstack())
}
