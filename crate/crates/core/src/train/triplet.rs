use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{squared_distance, triplet_var};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, ClipTensor, EmbeddingVector};
use crate::tensor::{Graph, Tape};

/// Indices into a labeled clip set. The anchor and positive share a class,
/// the negative does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub anchor_class: usize,
    pub negative_class: usize,
}

/// Clips with a class index each; `class_names[label]` names the class.
#[derive(Debug, Clone, Default)]
pub struct LabeledClips {
    pub clips: Vec<ClipTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledClips {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn push(&mut self, clip: ClipTensor, class: &str) {
        let label = match self.class_names.iter().position(|c| c == class) {
            Some(i) => i,
            None => {
                self.class_names.push(class.to_string());
                self.class_names.len() - 1
            }
        };
        self.clips.push(clip);
        self.labels.push(label);
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Draws `per_anchor` triplets for every anchor, in anchor order. Anchors
/// whose class has a single member are skipped.
pub fn sample_triplets(labels: &[usize], per_anchor: usize, seed: u64) -> Result<Vec<Triplet>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::invalid(format!("triplets need at least 2 classes, found {}", members.len())));
    }
    for (class, m) in &members {
        if m.len() < 2 {
            log::warn!("class {class} has a single clip; it is never used as an anchor");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labels.len() * per_anchor);
    for (anchor, &class) in labels.iter().enumerate() {
        let same = &members[&class];
        if same.len() < 2 {
            continue;
        }
        let others = labels.len() - same.len();
        for _ in 0..per_anchor {
            let positive = loop {
                let p = same[rng.gen_range(0..same.len())];
                if p != anchor {
                    break p;
                }
            };
            // k-th clip outside the anchor's class, in index order
            let mut k = rng.gen_range(0..others);
            let negative = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != class)
                .find_map(|(i, _)| {
                    if k == 0 {
                        Some(i)
                    } else {
                        k -= 1;
                        None
                    }
                })
                .expect("another class exists");
            out.push(Triplet { anchor, positive, negative, anchor_class: class, negative_class: labels[negative] });
        }
    }
    Ok(out)
}

/// `ceil(fraction * n)`, ignoring rounding error in the product.
pub fn hard_count(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    ((x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize).min(n)
}

/// Splits `triplets` into the `ceil(fraction * N)` with the largest losses
/// and the rest. Equal losses keep input order. `hard` is ordered by
/// descending loss, `rest` keeps input order.
pub fn mine_challenging(triplets: &[Triplet], losses: &[f64], fraction: f64) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    if triplets.is_empty() {
        return Err(Error::Empty("mining input"));
    }
    if losses.len() != triplets.len() {
        return Err(Error::DimensionMismatch { expected: triplets.len(), found: losses.len() });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("mining fraction {fraction} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let k = hard_count(triplets.len(), fraction);
    let mut is_hard = vec![false; triplets.len()];
    let hard = order[..k]
        .iter()
        .map(|&i| {
            is_hard[i] = true;
            triplets[i]
        })
        .collect();
    let rest = triplets.iter().zip(&is_hard).filter(|(_, &h)| !h).map(|(t, _)| *t).collect();
    Ok((hard, rest))
}

/// Current hinge loss of every triplet, encoding each referenced clip once.
pub fn triplet_losses(model: &Autoencoder, clips: &[ClipTensor], triplets: &[Triplet], margin: f64) -> Result<Vec<f64>> {
    let mut cache: BTreeMap<usize, EmbeddingVector> = BTreeMap::new();
    for t in triplets {
        for i in [t.anchor, t.positive, t.negative] {
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(i) {
                let clip = clips.get(i).ok_or_else(|| Error::invalid(format!("triplet references clip {i}")))?;
                e.insert(model.encode(clip)?);
            }
        }
    }
    triplets
        .iter()
        .map(|t| {
            let a = cache[&t.anchor].values();
            let dp = squared_distance(a, cache[&t.positive].values())?;
            let dn = squared_distance(a, cache[&t.negative].values())?;
            Ok((dp - dn + margin).max(0.0))
        })
        .collect()
}

/// `sum_i L(a_i, p_i, n_i) + lambda * ||theta||^2` over encoder parameters.
pub fn triplet_batch_objective(
    model: &Autoencoder,
    clips: &[ClipTensor],
    triplets: &[Triplet],
    margin: f64,
    lambda: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet batch"));
    }
    let hinge: f64 = triplet_losses(model, clips, triplets, margin)?.iter().sum();
    Ok(hinge + lambda * model.store().squared_norm(&model.encoder_params()))
}

/// Adds the gradient of the hinge part of [`triplet_batch_objective`] to
/// the encoder gradients and returns the summed hinge loss. Every distinct
/// clip is encoded once on a shared tape, so all three branches of every
/// triplet feed the same encoder weights.
pub fn accumulate_triplet_batch(
    model: &mut Autoencoder,
    clips: &[ClipTensor],
    triplets: &[Triplet],
    margin: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet batch"));
    }
    let mut tape = Tape::new();
    let mut emb = BTreeMap::new();
    for t in triplets {
        for i in [t.anchor, t.positive, t.negative] {
            if !emb.contains_key(&i) {
                let clip = clips.get(i).ok_or_else(|| Error::invalid(format!("triplet references clip {i}")))?;
                emb.insert(i, model.encode_graph(&mut tape, clip)?);
            }
        }
    }
    let mut total = None;
    for t in triplets {
        let l = triplet_var(&mut tape, &emb[&t.anchor], &emb[&t.positive], &emb[&t.negative], margin)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(&acc, &l)?,
        });
    }
    let total = total.expect("non-empty batch");
    let value = tape.value(&total).item();
    tape.backward(total)?.accumulate_into(model.store_mut())?;
    Ok(value)
}

/// Where a fine-tuning batch entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Hard(usize),
    Rest(usize),
}

/// Fine-tuning batches of size `batch`, each with `floor(remix * batch)`
/// entries cycled from the hard pool and the remainder from the rest.
/// Pools are reshuffled every time they are exhausted. If one pool is
/// empty the other fills the whole batch.
pub fn remix_batches(
    hard: usize,
    rest: usize,
    batch: usize,
    remix: f64,
    batches: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<Source>> {
    struct Pool {
        order: Vec<usize>,
        pos: usize,
    }
    impl Pool {
        fn next(&mut self, rng: &mut impl Rng) -> usize {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            self.pos += 1;
            self.order[self.pos - 1]
        }
    }
    let mut hp = Pool { order: (0..hard).collect(), pos: hard };
    let mut rp = Pool { order: (0..rest).collect(), pos: rest };
    let mut n_hard = ((remix * batch as f64) + 1e-9).floor() as usize;
    if rest == 0 {
        n_hard = batch;
    }
    if hard == 0 {
        n_hard = 0;
    }
    (0..batches)
        .map(|_| {
            let mut b: Vec<Source> = (0..n_hard).map(|_| Source::Hard(hp.next(rng))).collect();
            b.extend((n_hard..batch).map(|_| Source::Rest(rp.next(rng))));
            b
        })
        .collect()
}
