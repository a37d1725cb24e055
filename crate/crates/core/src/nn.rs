//! Shared building blocks: affine maps, affine layer norm, dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-uniform bound for a `fan_in → fan_out` map.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x Wᵀ + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_scale(store, name, fan_in, fan_out, bias, 1.0, rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[fan_out, fan_in],
            scale * xavier_bound(fan_in, fan_out),
            rng,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis with learnable gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Inverted dropout with masks drawn from a seeded stream. A `Dropout`
/// without a stream is the evaluation-mode identity.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        g.mask_mul(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_dropout_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 2.0]));
        let mut d = Dropout::eval();
        assert_eq!(d.apply(&mut g, x).unwrap(), x);
    }

    #[test]
    fn train_dropout_scales_survivors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1000], 1.0));
        let mut d = Dropout::train(0.1, ChaCha8Rng::seed_from_u64(3));
        let y = d.apply(&mut g, x).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.9).abs() < 1e-15));
        let dropped = v.iter().filter(|&&e| e == 0.0).count();
        assert!((50..150).contains(&dropped), "{dropped}");
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 5, vec![1., 4., -2., 0.5, 3., 9., 9., 1., 0., -4.]).unwrap());
        let y = ln.forward(&mut g, &store, x).unwrap();
        for r in g.value(y).to_rows() {
            let m = r.iter().sum::<f64>() / 5.0;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-7);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
