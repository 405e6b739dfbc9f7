use rand::Rng;

use super::blocks::Dense;
use super::config::TransformerConfig;
use crate::error::Result;
use crate::tensor::{Eager, Graph, ParamId, ParamStore, Tensor};

/// Post-norm transformer encoder layer over a `(T, width)` token matrix.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub out: Dense,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub heads: usize,
    pub head_dim: usize,
    pub eps: f64,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &TransformerConfig, eps: f64, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.hidden;
        let inner = cfg.heads * cfg.head_dim();
        let norm = |store: &mut ParamStore, n: &str| -> Result<(ParamId, ParamId)> {
            Ok((store.add_ones(format!("{prefix}.{n}.gamma"), &[d])?, store.add_zeros(format!("{prefix}.{n}.beta"), &[d])?))
        };
        Ok(TransformerLayer {
            query: Dense::new(store, &format!("{prefix}.q"), d, inner, rng)?,
            key: Dense::new(store, &format!("{prefix}.k"), d, inner, rng)?,
            value: Dense::new(store, &format!("{prefix}.v"), d, inner, rng)?,
            out: Dense::new(store, &format!("{prefix}.o"), inner, d, rng)?,
            ffn_in: Dense::new(store, &format!("{prefix}.ffn1"), d, cfg.intermediate, rng)?,
            ffn_out: Dense::new(store, &format!("{prefix}.ffn2"), cfg.intermediate, d, rng)?,
            norm1: norm(store, "ln1")?,
            norm2: norm(store, "ln2")?,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            eps,
        })
    }

    /// Multi-head scaled dot-product self-attention, before the output
    /// projection. Returns the concatenated head outputs and each head's
    /// `(T, T)` attention weights.
    pub fn attend<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<(G::Var, Vec<G::Var>)> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.slice(&q, start, self.head_dim)?;
            let kh = g.slice(&k, start, self.head_dim)?;
            let vh = g.slice(&v, start, self.head_dim)?;
            let kt = g.transpose(&kh)?;
            let scores = g.matmul(&qh, &kt)?;
            let scores = g.scale(&scores, scale);
            let w = g.softmax(&scores);
            heads.push(g.matmul(&w, &vh)?);
            weights.push(w);
        }
        Ok((g.concat(&heads)?, weights))
    }

    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, x: &G::Var) -> Result<G::Var> {
        let (att, _) = self.attend(g, store, x)?;
        let att = self.out.forward(g, store, &att)?;
        let res = g.add(x, &att)?;
        let (g1, b1) = (g.param(store, self.norm1.0), g.param(store, self.norm1.1));
        let x1 = g.layer_norm(&res, &g1, &b1, self.eps)?;
        let hidden = self.ffn_in.forward(g, store, &x1)?;
        let hidden = g.relu(&hidden);
        let ff = self.ffn_out.forward(g, store, &hidden)?;
        let res = g.add(&x1, &ff)?;
        let (g2, b2) = (g.param(store, self.norm2.0), g.param(store, self.norm2.1));
        g.layer_norm(&res, &g2, &b2, self.eps)
    }

    /// Attention weights per head for a `(T, width)` input.
    pub fn attention_weights(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Eager;
        let x = g.constant(x.clone());
        let (_, w) = self.attend(&mut g, store, &x)?;
        Ok(w.into_iter().map(|w| (*w).clone()).collect())
    }
}

/// Sinusoidal position code: `sin(t / 10000^(2i/d))` on even columns,
/// the matching cosine on odd ones.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * width);
    for t in 0..len {
        for c in 0..width {
            let freq = 10000f64.powf((2 * (c / 2)) as f64 / width as f64);
            let angle = t as f64 / freq;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, width], data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64) -> (ParamStore, TransformerLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig { layers: 1, heads: 3, hidden: 10, intermediate: 7 };
        let l = TransformerLayer::new(&mut store, "t", &cfg, 1e-5, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn weights_are_row_stochastic() {
        let (store, l) = layer(4);
        let x = Tensor::new(vec![5, 10], (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        for w in l.attention_weights(&store, &x).unwrap() {
            assert_eq!(w.shape(), &[5, 5]);
            for row in w.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, l) = layer(5);
        let x = Tensor::new(vec![1, 10], (0..10).map(|i| i as f64 * 0.3).collect()).unwrap();
        let mut g = Eager;
        let xv = g.constant(x.clone());
        let (att, w) = l.attend(&mut g, &store, &xv).unwrap();
        assert!(w.iter().all(|w| w.data() == [1.0]));
        let v = l.value.forward(&mut g, &store, &xv).unwrap();
        // head width 3 x 3 heads covers the whole value projection
        assert_eq!(att.data(), v.data());
    }

    #[test]
    fn head_width_uses_integer_division() {
        assert_eq!(TransformerConfig::FULL.head_dim(), 170);
    }

    #[test]
    fn position_code_first_row() {
        let pe = positional_encoding(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    }
}
