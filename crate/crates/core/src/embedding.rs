//! Attention-weighted ancestor embeddings.
//!
//! For each leaf `i` with ancestor set `A(i)` (the leaf itself plus every
//! ancestor up to the root):
//!
//! ```text
//! score(i, j) = w · tanh(W [E_i ; E_j] + b)      child first, then ancestor
//! alpha(i, ·) = softmax over j in A(i)
//! G_i         = sum_j alpha(i, j) E_j
//! ```
//!
//! All leaves are scored together: slot `k` of every ancestor list forms one
//! `|C| × 2d` batch, and leaves with fewer than `k+1` ancestors are masked out
//! of the softmax.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::ontology::OntologyDag;
use crate::params::{ParamId, ParamStore};

/// Half-width of the uniform initialisation of `E`, `M` and position rows.
pub const EMBED_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct OntologyAttention {
    /// `E`: one basic embedding per node, `(|C| + |N|) × d`.
    pub node_embedding: ParamId,
    /// `W_α`, `b_α`: `2d → d`.
    pub hidden: Linear,
    /// `w_α` stored as a `1 × d` row.
    pub score: ParamId,
}

impl OntologyAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dag: &OntologyDag,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let node_embedding = store.add_uniform("onto.E", &[dag.node_count(), d], EMBED_INIT, rng)?;
        let hidden = Linear::new(store, "onto.attn", 2 * d, d, true, rng)?;
        let score = store.add_uniform("onto.score", &[1, d], (3.0 / d as f64).sqrt(), rng)?;
        Ok(Self {
            node_embedding,
            hidden,
            score,
        })
    }

    /// Attention logits `|C| × K` (K = largest ancestor set) with the mask of
    /// real slots, plus the gathered ancestor rows per slot.
    fn scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sets: &[&[usize]],
    ) -> Result<(Var, Vec<bool>, Vec<Var>)> {
        let n = sets.len();
        let k_max = sets.iter().map(|s| s.len()).max().unwrap_or(0);
        let e = g.param(store, self.node_embedding);
        let leaves: Vec<Option<usize>> = sets.iter().map(|s| s.first().copied()).collect();
        let child = g.gather(e, &leaves)?;
        let w = g.param(store, self.score);
        let mut cols = Vec::with_capacity(k_max);
        let mut slots = Vec::with_capacity(k_max);
        let mut mask = vec![false; n * k_max];
        for k in 0..k_max {
            let mut rows = Vec::with_capacity(n);
            for (i, set) in sets.iter().enumerate() {
                rows.push(set.get(k).copied());
                mask[i * k_max + k] = k < set.len();
            }
            let anc = g.gather(e, &rows)?;
            let pair = g.concat_cols(&[child, anc])?;
            let h = self.hidden.forward(g, store, pair)?;
            let h = g.tanh(h);
            cols.push(g.matmul_t(h, w)?);
            slots.push(anc);
        }
        let scores = g.concat_cols(&cols)?;
        Ok((scores, mask, slots))
    }

    /// `G` (`|C| × d`) and the attention matrix `|C| × K`, where column `k`
    /// holds the weight on `dag.ancestors(i)[k]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dag: &OntologyDag,
    ) -> Result<(Var, Var)> {
        let sets = (0..dag.leaf_count())
            .map(|i| dag.ancestors(i))
            .collect::<Result<Vec<_>>>()?;
        self.forward_sets(g, store, &sets)
    }

    /// Embeds explicit ancestor sets; `sets[i][0]` is the child node and the
    /// rest are the nodes it attends over besides itself.
    pub fn forward_sets(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sets: &[&[usize]],
    ) -> Result<(Var, Var)> {
        if sets.iter().any(|s| s.is_empty()) {
            return Err(crate::Error::shape("ontological_embedding", "empty ancestor set"));
        }
        let (scores, mask, slots) = self.scores(g, store, sets)?;
        let alpha = g.masked_softmax(scores, Some(&mask))?;
        let mut terms = Vec::with_capacity(slots.len());
        for (k, anc) in slots.into_iter().enumerate() {
            let a = g.slice_cols(alpha, k, k + 1)?;
            terms.push(g.mul_col(anc, a)?);
        }
        let out = g.add_all(&terms)?;
        Ok((out, alpha))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, dag: &OntologyDag) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, dag)?.0)
    }
}
