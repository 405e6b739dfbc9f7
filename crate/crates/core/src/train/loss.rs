use crate::error::{Error, Result};
use crate::model::{Autoencoder, ClipTensor, EmbeddingVector, Trace};
use crate::tensor::{Eager, Graph, Tape, Tensor};

/// Squared Euclidean distance.
pub fn embedding_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    squared_distance(a.values(), b.values())
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Hinge `max(0, D(a,p) - D(a,n) + margin)`.
pub fn triplet_loss(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negative: &EmbeddingVector,
    margin: f64,
) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::invalid(format!("margin must be non-negative, got {margin}")));
    }
    let dp = embedding_distance(anchor, positive)?;
    let dn = embedding_distance(anchor, negative)?;
    Ok((dp - dn + margin).max(0.0))
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Reconstruction error of one clip through the whole autoencoder.
pub fn autoencoder_loss(model: &Autoencoder, clip: &ClipTensor) -> Result<f64> {
    mse(model.reconstruct(clip)?.tensor(), clip.tensor())
}

/// Records `D(a, b)` for two `(dim,)` values.
pub fn distance_var<G: Graph>(g: &mut G, a: &G::Var, b: &G::Var) -> Result<G::Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(&d, &d)?;
    Ok(g.sum(&sq))
}

pub fn triplet_var<G: Graph>(g: &mut G, a: &G::Var, p: &G::Var, n: &G::Var, margin: f64) -> Result<G::Var> {
    let dp = distance_var(g, a, p)?;
    let dn = distance_var(g, a, n)?;
    let diff = g.sub(&dp, &dn)?;
    let shifted = g.add_scalar(&diff, margin);
    Ok(g.relu(&shifted))
}

/// Records the reconstruction MSE of `clip` on `g`.
pub fn reconstruction_var<G: Graph>(g: &mut G, model: &Autoencoder, clip: &ClipTensor) -> Result<G::Var> {
    model.check_clip(clip)?;
    let frames: Vec<G::Var> = clip.frames().into_iter().map(|f| g.constant(f)).collect();
    let emb = model.encode_frames(g, &frames, &mut Trace::new())?;
    let out = model.decode_var(g, &emb, &mut Trace::new())?;
    let out = g.stack(&out)?;
    let target = g.constant(clip.tensor().clone());
    let d = g.sub(&out, &target)?;
    let sq = g.mul(&d, &d)?;
    Ok(g.mean(&sq))
}

/// Reconstruction loss of one clip, with its gradient added to the model's
/// parameter gradients scaled by `weight`.
pub fn accumulate_reconstruction(model: &mut Autoencoder, clip: &ClipTensor, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = reconstruction_var(&mut tape, model, clip)?;
    let value = tape.value(&loss).item();
    let scaled = tape.scale(&loss, weight);
    tape.backward(scaled)?.accumulate_into(model.store_mut())?;
    Ok(value)
}

/// [`reconstruction_var`] evaluated without recording.
pub fn reconstruction_eager(model: &Autoencoder, clip: &ClipTensor) -> Result<f64> {
    let mut g = Eager;
    let v = reconstruction_var(&mut g, model, clip)?;
    Ok(v.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(embedding_distance(&e(&[0.0, 0.0]), &e(&[3.0, 4.0])).unwrap(), 25.0);
        assert_eq!(embedding_distance(&e(&[1.5, -2.0]), &e(&[1.5, -2.0])).unwrap(), 0.0);
        assert!(embedding_distance(&e(&[0.0]), &e(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn triplet_examples() {
        // D(a,p)=1, D(a,n)=3
        let (a, p, n) = (e(&[0.0, 0.0]), e(&[1.0, 0.0]), e(&[0.0, 3f64.sqrt()]));
        assert!(triplet_loss(&a, &p, &n, 0.5).unwrap().abs() < 1e-12);
        // D(a,p)=2, D(a,n)=1
        let (p, n) = (e(&[2f64.sqrt(), 0.0]), e(&[0.0, 1.0]));
        assert!((triplet_loss(&a, &p, &n, 0.5).unwrap() - 1.5).abs() < 1e-12);
        assert!(triplet_loss(&a, &p, &n, -1.0).is_err());
    }

    #[test]
    fn kink_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec(vec![0.0]));
        let p = tape.input(Tensor::from_vec(vec![1.0]));
        let n = tape.input(Tensor::from_vec(vec![1.5f64.sqrt()]));
        // 1 - 1.5 + 0.5 = 0 up to rounding; force the exact kink with margin
        let margin = 1.5f64.sqrt().powi(2) - 1.0;
        let l = triplet_var(&mut tape, &a, &p, &n, margin).unwrap();
        assert_eq!(tape.value(&l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        for v in [a, p, n] {
            assert!(g.wrt(v).map_or(true, |g| g.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn mse_examples() {
        let z = Tensor::zeros(&[2, 3]);
        let o = Tensor::full(&[2, 3], 1.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(mse(&o, &o).unwrap(), 0.0);
    }
}
