//! Visit encoder: dual multi-head self-attention over the code and ontology
//! embeddings of each visit, information integration, and attention pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{xavier_bound, Dropout, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Reserved code id for padded visit slots.
pub const PAD_CODE: usize = usize::MAX;

/// Divisor of the attention logits: `sqrt(d)` or `sqrt(d_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttentionScale {
    #[default]
    #[serde(rename = "d")]
    Model,
    #[serde(rename = "d_k")]
    Head,
}

/// A square block of rows that attend among themselves.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// `len × len`, row-major; `mask[i * len + j]` admits key `j` for query `i`.
    pub mask: Option<Vec<bool>>,
}

impl Segment {
    pub fn full(start: usize, len: usize) -> Self {
        Self { start, len, mask: None }
    }

    /// Queries may attend only to keys flagged real.
    pub fn key_padding(start: usize, real: &[bool]) -> Self {
        let len = real.len();
        let mask = (0..len * len).map(|ij| real[ij % len]).collect();
        Self { start, len, mask: Some(mask) }
    }

    /// Query `i` attends to real keys `j <= i`.
    pub fn causal(start: usize, real: &[bool]) -> Self {
        let len = real.len();
        let mask = (0..len * len)
            .map(|ij| {
                let (i, j) = (ij / len, ij % len);
                j <= i && real[j]
            })
            .collect();
        Self { start, len, mask: Some(mask) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    /// `d × d_k` each.
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Multi-head scaled dot-product attention with a bias-free output map
/// `W^O` of shape `(h·d_k) × d`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadParams>,
    pub output: ParamId,
    d: usize,
    scale: f64,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        scale: AttentionScale,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d = {d} is not divisible by h = {heads}")));
        }
        let d_k = d / heads;
        let bound = xavier_bound(d, d_k);
        let mut hs = Vec::with_capacity(heads);
        for i in 0..heads {
            hs.push(HeadParams {
                query: store.add_uniform(format!("{name}.head{i}.query"), &[d, d_k], bound, rng)?,
                key: store.add_uniform(format!("{name}.head{i}.key"), &[d, d_k], bound, rng)?,
                value: store.add_uniform(format!("{name}.head{i}.value"), &[d, d_k], bound, rng)?,
            });
        }
        let output = store.add_uniform(format!("{name}.output"), &[d, d], xavier_bound(d, d), rng)?;
        let divisor = match scale {
            AttentionScale::Model => d,
            AttentionScale::Head => d_k,
        };
        Ok(Self {
            heads: hs,
            output,
            d,
            scale: 1.0 / (divisor as f64).sqrt(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Self-attention of `x` within each segment; rows outside every segment
    /// are an error. Returns the output rows and, per segment, per head, the
    /// attention weight matrix.
    pub fn forward_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[Segment],
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        self.attend(g, store, x, x, x, segments, dropout)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[Segment],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        Ok(self.forward_segments(g, store, x, segments, dropout)?.0)
    }

    /// General attention with separate query, key and value rows; every
    /// segment indexes the same row range of all three.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let rows = g.value(q).rows();
        for x in [q, k, v] {
            if g.shape(x) != [rows, self.d] {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("expected {rows}x{}, got {:?}", self.d, g.shape(x)),
                ));
            }
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::shape("multi_head_attention", "segments must tile the rows"));
            }
            if s.mask.as_ref().is_some_and(|m| m.len() != s.len * s.len) {
                return Err(Error::shape("multi_head_attention", "segment mask size"));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(Error::shape(
                "multi_head_attention",
                format!("segments cover {covered} of {rows} rows"),
            ));
        }
        let mut head_out = Vec::with_capacity(self.heads.len());
        let mut weights = vec![Vec::with_capacity(self.heads.len()); segments.len()];
        for hp in &self.heads {
            let wq = g.param(store, hp.query);
            let wk = g.param(store, hp.key);
            let wv = g.param(store, hp.value);
            let qh = g.matmul(q, wq)?;
            let kh = g.matmul(k, wk)?;
            let vh = g.matmul(v, wv)?;
            let mut parts = Vec::with_capacity(segments.len());
            for (si, s) in segments.iter().enumerate() {
                let (a, b) = (s.start, s.start + s.len);
                let (qs, ks, vs) = if segments.len() == 1 {
                    (qh, kh, vh)
                } else {
                    (g.slice_rows(qh, a, b)?, g.slice_rows(kh, a, b)?, g.slice_rows(vh, a, b)?)
                };
                let logits = g.matmul_t(qs, ks)?;
                let logits = g.scale(logits, self.scale);
                let w = g.masked_softmax(logits, s.mask.as_deref())?;
                weights[si].push(w);
                let w = dropout.apply(g, w)?;
                parts.push(g.matmul(w, vs)?);
            }
            head_out.push(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? });
        }
        let cat = if head_out.len() == 1 { head_out[0] } else { g.concat_cols(&head_out)? };
        let wo = g.param(store, self.output);
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// Code ids of `visits` padded to a fixed width `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitBatch {
    codes: Vec<usize>,
    mask: Vec<bool>,
    counts: Vec<usize>,
    width: usize,
}

impl VisitBatch {
    pub fn new(visits: &[&[usize]], width: usize) -> Result<Self> {
        let mut codes = Vec::with_capacity(visits.len() * width);
        let mut mask = Vec::with_capacity(visits.len() * width);
        let mut counts = Vec::with_capacity(visits.len());
        for v in visits {
            if v.is_empty() {
                return Err(Error::AllMasked("visit_batch"));
            }
            if v.len() > width {
                return Err(Error::shape(
                    "visit_batch",
                    format!("{} codes exceed the width {width}", v.len()),
                ));
            }
            codes.extend_from_slice(v);
            codes.extend(std::iter::repeat_n(PAD_CODE, width - v.len()));
            mask.extend(std::iter::repeat_n(true, v.len()));
            mask.extend(std::iter::repeat_n(false, width - v.len()));
            counts.push(v.len());
        }
        Ok(Self { codes, mask, counts, width })
    }

    pub fn visits(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major `visits × width` ids; padded slots hold [`PAD_CODE`].
    pub fn code_ids(&self) -> &[usize] {
        &self.codes
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Gather rows for an embedding lookup, `None` on padding.
    pub fn lookup_rows(&self) -> Vec<Option<usize>> {
        self.codes.iter().map(|&c| (c != PAD_CODE).then_some(c)).collect()
    }

    pub fn segments(&self) -> Vec<Segment> {
        (0..self.visits())
            .map(|t| {
                let a = t * self.width;
                Segment::key_padding(a, &self.mask[a..a + self.width])
            })
            .collect()
    }
}

/// `V^t → v_t` via `w · ReLU(W¹ V_i + b¹) + b` scores and a softmax over the
/// real rows of each visit.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    pub hidden: Linear,
    pub score: Linear,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, d, true, rng)?,
            score: Linear::new(store, &format!("{name}.score"), d, 1, true, rng)?,
        })
    }

    /// `rows` is `(visits·width) × d`; returns `visits × d` pooled vectors
    /// and the `visits × width` weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: Var,
        width: usize,
        real: &[bool],
    ) -> Result<(Var, Var)> {
        let (n, d) = (g.value(rows).rows(), g.value(rows).cols());
        if width == 0 || n % width != 0 || real.len() != n {
            return Err(Error::shape("attention_pool", format!("{n} rows, width {width}")));
        }
        let visits = n / width;
        let h = self.hidden.forward(g, store, rows)?;
        let h = g.relu(h);
        let s = self.score.forward(g, store, h)?;
        let s = g.reshape(s, &[visits, width])?;
        let alpha = g.masked_softmax(s, Some(real))?;
        let pooled = if visits == 1 {
            g.matmul(alpha, rows)?
        } else {
            let col = g.reshape(alpha, &[n, 1])?;
            let weighted = g.mul_col(rows, col)?;
            let mut sel = vec![0.0; visits * n];
            for t in 0..visits {
                for j in 0..width {
                    sel[t * n + t * width + j] = 1.0;
                }
            }
            let sel = g.constant(Tensor::matrix(visits, n, sel)?);
            g.matmul(sel, weighted)?
        };
        debug_assert_eq!(g.shape(pooled), &[visits, d]);
        Ok((pooled, alpha))
    }
}

/// Dual self-attention, integration and layer norm (`O_t`), then pooling.
/// Without an ontology branch only the code embeddings are encoded.
#[derive(Debug, Clone)]
pub struct VisitEncoder {
    pub code_attention: MultiHeadAttention,
    pub onto_attention: Option<MultiHeadAttention>,
    /// `W_M`, `W_G` as bias-free `d → d` maps and the shared bias `b`.
    pub code_proj: Linear,
    pub onto_proj: Option<Linear>,
    pub bias: ParamId,
    pub norm: LayerNorm,
    pub pool: AttentionPool,
}

impl VisitEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        scale: AttentionScale,
        with_ontology: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let code_attention = MultiHeadAttention::new(store, "enc.code_attn", d, heads, scale, rng)?;
        let onto_attention = with_ontology
            .then(|| MultiHeadAttention::new(store, "enc.onto_attn", d, heads, scale, rng))
            .transpose()?;
        let code_proj = Linear::new(store, "enc.code_proj", d, d, false, rng)?;
        let onto_proj = with_ontology
            .then(|| Linear::new(store, "enc.onto_proj", d, d, false, rng))
            .transpose()?;
        Ok(Self {
            code_attention,
            onto_attention,
            code_proj,
            onto_proj,
            bias: store.add("enc.bias", Tensor::zeros(&[1, d]))?,
            norm: LayerNorm::new(store, "enc.norm", d)?,
            pool: AttentionPool::new(store, "enc.pool", d, rng)?,
        })
    }

    pub fn uses_ontology(&self) -> bool {
        self.onto_attention.is_some()
    }

    /// `O = LN(ReLU(V_M W_Mᵀ + V_G W_Gᵀ + b) + V_M + V_G)` over stacked visit rows.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        code_rows: Var,
        onto_rows: Option<Var>,
        segments: &[Segment],
    ) -> Result<Var> {
        let mut off = Dropout::eval();
        let vm = self.code_attention.forward(g, store, code_rows, segments, &mut off)?;
        let mut pre = self.code_proj.forward(g, store, vm)?;
        let mut skip = vec![vm];
        match (&self.onto_attention, &self.onto_proj, onto_rows) {
            (Some(att), Some(proj), Some(eg)) => {
                let vg = att.forward(g, store, eg, segments, &mut off)?;
                let p = proj.forward(g, store, vg)?;
                pre = g.add(pre, p)?;
                skip.push(vg);
            }
            (None, None, None) => {}
            _ => {
                return Err(Error::Config(
                    "ontology rows must be supplied exactly when the encoder has an ontology branch".into(),
                ))
            }
        }
        let b = g.param(store, self.bias);
        let pre = g.add_row(pre, b)?;
        let h = g.relu(pre);
        skip.insert(0, h);
        let sum = g.add_all(&skip)?;
        self.norm.forward(g, store, sum)
    }

    /// Encodes and pools every visit of `batch`; returns `visits × d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &VisitBatch,
        code_table: Var,
        onto_table: Option<Var>,
    ) -> Result<Var> {
        let rows = batch.lookup_rows();
        let em = g.gather(code_table, &rows)?;
        let eg = onto_table.map(|t| g.gather(t, &rows)).transpose()?;
        let o = self.encode(g, store, em, eg, &batch.segments())?;
        Ok(self.pool.forward(g, store, o, batch.width(), batch.pad_mask())?.0)
    }
}
