use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{accumulate_reconstruction, reconstruction_eager};
use super::triplet::{
    accumulate_triplet_batch, mine_challenging, remix_batches, sample_triplets, triplet_losses, LabeledClips, Source,
    Triplet,
};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, ClipTensor, ModelVariant};
use crate::tensor::{sgd_step, ParamId, SgdConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    /// L2 coefficient lambda of the triplet objective. The optimizer uses
    /// `2 * lambda` as weight decay, the gradient of `lambda * ||theta||^2`.
    pub weight_decay: f64,
    pub margin: f64,
    pub pretrain_epochs: usize,
    pub triplet_epochs: usize,
    pub finetune_epochs: usize,
    pub early_stop_patience: usize,
    pub batch: usize,
    pub mining_fraction: f64,
    pub remix_ratio: f64,
    pub per_anchor: usize,
    pub validation_fraction: f64,
    pub pretrain: bool,
    pub triplet: bool,
    pub challenging: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_decay: 0.1,
            lr_decay_every: 10,
            momentum: 0.9,
            weight_decay: 0.001,
            margin: 0.5,
            pretrain_epochs: 50,
            triplet_epochs: 50,
            finetune_epochs: 50,
            early_stop_patience: 5,
            batch: 32,
            mining_fraction: 0.2,
            remix_ratio: 0.5,
            per_anchor: 1,
            validation_fraction: 0.15,
            pretrain: true,
            triplet: true,
            challenging: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the batch size used for the variant's data kind.
    pub fn for_variant(variant: ModelVariant) -> Self {
        TrainConfig { batch: if variant.is_3d() { 8 } else { 32 }, ..Self::default() }
    }

    /// Step size during zero-based `epoch` of a stage.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mining_fraction > 0.0 && self.mining_fraction < 1.0) {
            return bad(format!("mining_fraction {} must be in (0, 1)", self.mining_fraction));
        }
        if !(0.0..=1.0).contains(&self.remix_ratio) {
            return bad(format!("remix_ratio {} must be in [0, 1]", self.remix_ratio));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} must be in [0, 1)", self.validation_fraction));
        }
        if self.batch == 0 || self.per_anchor == 0 || self.lr_decay_every == 0 {
            return bad("batch, per_anchor and lr_decay_every must be positive".into());
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.margin >= 0.0) {
            return bad("lr, momentum, weight_decay and margin must be non-negative".into());
        }
        if self.challenging && !self.triplet {
            return bad("challenging-sample retraining needs the triplet stage".into());
        }
        Ok(())
    }

    fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig { lr: self.learning_rate(epoch), momentum: self.momentum, weight_decay: 2.0 * self.weight_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Triplet,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Triplet => "triplet",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub triplets: Vec<Triplet>,
    pub hard: Vec<Triplet>,
    /// Number of hard entries in every fine-tuning batch, in order.
    pub hard_per_batch: Vec<usize>,
}

/// Shuffled split into (train, validation) index lists.
fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let val = if n >= 2 { ((fraction * n as f64).round() as usize).min(n - 1) } else { 0 };
    let train = idx.split_off(val);
    (train, idx)
}

/// Tracks the best validation loss and when to stop.
struct EarlyStop {
    best: f64,
    since: usize,
    patience: usize,
    snapshot: Option<Vec<std::sync::Arc<crate::tensor::Tensor>>>,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop { best: f64::INFINITY, since: 0, patience, snapshot: None }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, loss: f64, model: &Autoencoder) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
            self.snapshot = Some(model.store().snapshot());
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }

    fn restore(self, model: &mut Autoencoder) -> Result<()> {
        match self.snapshot {
            Some(s) => model.store_mut().restore(&s),
            None => Ok(()),
        }
    }
}

fn step(model: &mut Autoencoder, ids: &[ParamId], cfg: SgdConfig) -> Result<()> {
    model.store_mut().zero_missing_grads(ids);
    sgd_step(model.store_mut(), ids, cfg)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn pretrain(
    model: &mut Autoencoder,
    clips: &[&ClipTensor],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    let (mut train, val) = split(clips.len(), cfg.validation_fraction, rng);
    let ids = model.all_params();
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    for epoch in 0..cfg.pretrain_epochs {
        train.shuffle(rng);
        let sgd = cfg.sgd(epoch);
        let mut losses = Vec::with_capacity(train.len());
        for batch in train.chunks(cfg.batch) {
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                losses.push(accumulate_reconstruction(model, clips[i], w)?);
            }
            step(model, &ids, sgd)?;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean(val.iter().map(|&i| reconstruction_eager(model, clips[i])).collect::<Result<Vec<_>>>()?))
        };
        let entry = EpochLog { stage: Stage::Pretrain.to_string(), epoch, lr: sgd.lr, train_loss: mean(losses), val_loss };
        log::info!("{entry:?}");
        log.push(entry);
        if let Some(v) = val_loss {
            if stop.observe(v, model) {
                break;
            }
        }
    }
    stop.restore(model)
}

fn triplet_epochs(
    model: &mut Autoencoder,
    data: &LabeledClips,
    train: &[Triplet],
    val: &[Triplet],
    hard: Option<&[Triplet]>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    let (stage, epochs) = match hard {
        None => (Stage::Triplet, cfg.triplet_epochs),
        Some(_) => (Stage::Finetune, cfg.finetune_epochs),
    };
    let ids = model.encoder_params();
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    let (hard_pool, rest_pool): (Vec<Triplet>, Vec<Triplet>) = match hard {
        Some(h) => {
            let rest = train.iter().filter(|t| !h.contains(t)).copied().collect();
            (h.to_vec(), rest)
        }
        None => (Vec::new(), train.to_vec()),
    };
    let mut order = train.to_vec();
    for epoch in 0..epochs {
        let sgd = cfg.sgd(epoch);
        let batches: Vec<Vec<Triplet>> = match hard {
            None => {
                order.shuffle(rng);
                order.chunks(cfg.batch).map(|c| c.to_vec()).collect()
            }
            Some(_) => {
                let n = train.len().div_ceil(cfg.batch);
                remix_batches(hard_pool.len(), rest_pool.len(), cfg.batch, cfg.remix_ratio, n, rng)
                    .into_iter()
                    .map(|b| {
                        report.hard_per_batch.push(b.iter().filter(|s| matches!(s, Source::Hard(_))).count());
                        b.into_iter()
                            .map(|s| match s {
                                Source::Hard(i) => hard_pool[i],
                                Source::Rest(i) => rest_pool[i],
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        let mut total = 0.0;
        let mut count = 0;
        for batch in &batches {
            total += accumulate_triplet_batch(model, &data.clips, batch, cfg.margin)?;
            count += batch.len();
            step(model, &ids, sgd)?;
        }
        let val_loss =
            if val.is_empty() { None } else { Some(mean(triplet_losses(model, &data.clips, val, cfg.margin)?)) };
        let entry = EpochLog { stage: stage.to_string(), epoch, lr: sgd.lr, train_loss: total / count.max(1) as f64, val_loss };
        log::info!("{entry:?}");
        report.log.push(entry);
        if let Some(v) = val_loss {
            if stop.observe(v, model) {
                break;
            }
        }
    }
    stop.restore(model)
}

/// Runs the enabled stages in order: autoencoder pretraining on every clip,
/// triplet training on the labeled clips, mining of the hardest triplets and
/// fine-tuning on batches mixing hard and ordinary triplets. `observer` sees
/// the model after each completed stage.
pub fn train_schedule(
    model: &mut Autoencoder,
    unlabeled: &[ClipTensor],
    labeled: &LabeledClips,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(Stage, &Autoencoder) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if labeled.labels.len() != labeled.clips.len() {
        return Err(Error::invalid("labeled clips and labels differ in length"));
    }
    if cfg.triplet && labeled.distinct_classes() < 2 {
        return Err(Error::invalid("triplet training needs labeled clips from at least 2 classes"));
    }
    if cfg.pretrain && unlabeled.is_empty() && labeled.is_empty() {
        return Err(Error::Empty("training clips"));
    }
    if cfg.pretrain && model.decoder().is_none() {
        return Err(Error::invalid("pretraining needs a decoder"));
    }
    for clip in unlabeled.iter().chain(&labeled.clips) {
        model.check_clip(clip)?;
    }

    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if cfg.pretrain {
        let all: Vec<&ClipTensor> = unlabeled.iter().chain(&labeled.clips).collect();
        pretrain(model, &all, cfg, &mut rng, &mut report.log)?;
        observer(Stage::Pretrain, model)?;
    }
    if !cfg.triplet {
        return Ok(report);
    }

    let triplets = sample_triplets(&labeled.labels, cfg.per_anchor, cfg.seed)?;
    let (train_idx, val_idx) = split(triplets.len(), cfg.validation_fraction, &mut rng);
    let train: Vec<Triplet> = train_idx.iter().map(|&i| triplets[i]).collect();
    let val: Vec<Triplet> = val_idx.iter().map(|&i| triplets[i]).collect();
    report.triplets = train.clone();
    triplet_epochs(model, labeled, &train, &val, None, cfg, &mut rng, &mut report)?;
    observer(Stage::Triplet, model)?;

    if cfg.challenging {
        let losses = triplet_losses(model, &labeled.clips, &train, cfg.margin)?;
        let (hard, _) = mine_challenging(&train, &losses, cfg.mining_fraction)?;
        report.hard = hard.clone();
        triplet_epochs(model, labeled, &train, &val, Some(&hard), cfg, &mut rng, &mut report)?;
        observer(Stage::Finetune, model)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_steps_down_every_ten_epochs() {
        let cfg = TrainConfig::default();
        for e in 0..50 {
            assert_eq!(cfg.learning_rate(e), 0.001 * 0.1f64.powi((e / 10) as i32));
        }
        assert_eq!(cfg.learning_rate(9), 0.001);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { mining_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { remix_ratio: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { triplet: false, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::for_variant(ModelVariant::M2_3d).batch, 8);
    }
}
