//! Causal journey transformer, prediction head and sequence loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionScale, MultiHeadAttention, Segment};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Dropout, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    #[default]
    Softmax,
    Sigmoid,
}

/// Post-norm layer: `x = LN(x + MHA(x))`, `x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct JourneyLayer {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl JourneyLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        scale: AttentionScale,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, scale, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, d_ff, true, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), d_ff, d, true, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segment: &Segment,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let a = self.attention.forward(g, store, x, std::slice::from_ref(segment), dropout)?;
        let x = g.add(x, a)?;
        let x = self.attn_norm.forward(g, store, x)?;
        let f = self.ffn_in.forward(g, store, x)?;
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, store, f)?;
        let f = dropout.apply(g, f)?;
        let y = g.add(x, f)?;
        self.ffn_norm.forward(g, store, y)
    }
}

#[derive(Debug, Clone)]
pub struct JourneyTransformer {
    pub layers: Vec<JourneyLayer>,
}

impl JourneyTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layers: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
        scale: AttentionScale,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("the journey transformer needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|i| JourneyLayer::new(store, &format!("journey.layer{i}"), d, heads, d_ff, scale, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Contextualises the `len × d` visit rows; `real[t]` is false on padded
    /// journey positions. Position `t` only sees real positions `<= t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        real: &[bool],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let len = g.value(x).rows();
        if len == 0 || real.len() != len {
            return Err(Error::shape("j_transformer", format!("{len} rows, {} flags", real.len())));
        }
        if !real[0] {
            return Err(Error::AllMasked("j_transformer"));
        }
        let segment = Segment::causal(0, real);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, &segment, dropout)?;
        }
        Ok(h)
    }
}

/// `W v + b` with `W` of shape `|C'| × d`.
#[derive(Debug, Clone, Copy)]
pub struct PredictionHead {
    pub linear: Linear,
    pub activation: HeadActivation,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        labels: usize,
        activation: HeadActivation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "head", d, labels, true, rng)?,
            activation,
        })
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.linear.forward(g, store, x)
    }

    pub fn probabilities(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        match self.activation {
            HeadActivation::Softmax => g.softmax(logits),
            HeadActivation::Sigmoid => Ok(g.sigmoid(logits)),
        }
    }
}

/// Binary cross-entropy summed over categories, averaged over the steps with
/// `step_mask[t] == true`. `labels` is a constant `steps × |C'|` 0/1 matrix.
pub fn sequence_loss(g: &mut Graph, probs: Var, labels: &Tensor, step_mask: &[bool]) -> Result<Var> {
    if g.shape(probs) != labels.shape() {
        return Err(Error::shape(
            "sequence_loss",
            format!("predictions {:?} vs labels {:?}", g.shape(probs), labels.shape()),
        ));
    }
    let steps = labels.rows();
    if step_mask.len() != steps {
        return Err(Error::shape("sequence_loss", format!("{} mask flags for {steps} steps", step_mask.len())));
    }
    let live = step_mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(Error::AllMasked("sequence_loss"));
    }
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p)?;
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let log_q = g.log(q)?;
    let y = g.constant(labels.clone());
    let not_y = Tensor::new(labels.shape().to_vec(), labels.data().iter().map(|v| 1.0 - v).collect())?;
    let not_y = g.constant(not_y);
    let a = g.mul(log_p, y)?;
    let b = g.mul(log_q, not_y)?;
    let ll = g.add(a, b)?;
    let w: Vec<f64> = step_mask
        .iter()
        .map(|&m| if m { -1.0 / live as f64 } else { 0.0 })
        .collect();
    let w = g.constant(Tensor::matrix(steps, 1, w)?);
    let weighted = g.mul_col(ll, w)?;
    Ok(g.sum(weighted))
}
