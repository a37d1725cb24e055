//! Scalar-loop reimplementations used as independent oracles, and the
//! randomized drivers that compare them with the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use setor::embedding::OntologyAttention;
use setor::encoder::{AttentionPool, AttentionScale, MultiHeadAttention, Segment, VisitBatch, VisitEncoder, PAD_CODE};
use setor::journey::{sequence_loss, HeadActivation, JourneyTransformer, PredictionHead, PROB_CLAMP};
use setor::metrics::accuracy_at_k;
use setor::nn::{Dropout, LAYER_NORM_EPS};
use setor::ontology::OntologyDag;
use setor::data::PatientJourney;
use setor::ode::{ode_solve, solve_func, GradientMode, Method, OdeFunc, SolverConfig, VectorField};
use setor::trainer::{build_model, gradcheck_config, Dataset};
use setor::{Graph, ParamStore, Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrites every parameter with uniform noise so that zero biases and unit
/// gains do not hide mistakes.
pub fn randomize(store: &mut ParamStore, half_width: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-half_width..half_width);
        }
    }
}

pub fn random_mat(rows: usize, cols: usize, half_width: f64, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-half_width..half_width)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    store.by_name(name).unwrap().to_rows()
}

pub fn param_row(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).remove(0)
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut m = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y) {
            m = m.max((p - q).abs());
        }
    }
    m
}

/// `W x + b` with `W` stored `out × in`.
pub fn affine(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len());
    for (o, row) in w.iter().enumerate() {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += row[i] * x[i];
        }
        if let Some(b) = b {
            s += b[o];
        }
        out.push(s);
    }
    out
}

/// Row vector times a matrix stored `in × out`.
pub fn row_times(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn softmax(v: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for i in 0..v.len() {
        if mask[i] && v[i] > m {
            m = v[i];
        }
    }
    let mut e = vec![0.0; v.len()];
    let mut z = 0.0;
    for i in 0..v.len() {
        if mask[i] {
            e[i] = (v[i] - m).exp();
            z += e[i];
        }
    }
    for x in &mut e {
        *x /= z;
    }
    e
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mu = 0.0;
    for v in x {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mu) * (v - mu);
    }
    var /= n;
    let s = (var + LAYER_NORM_EPS).sqrt();
    (0..x.len()).map(|i| (x[i] - mu) / s * gain[i] + bias[i]).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Every node reachable from `leaf` by parent links, the leaf included.
pub fn reachable(dag: &OntologyDag, leaf: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([leaf]);
    let mut stack = vec![leaf];
    while let Some(n) = stack.pop() {
        for &p in dag.parents(n) {
            if seen.insert(p) {
                stack.push(p);
            }
        }
    }
    seen
}

/// `G` rows and, per leaf, the attention weight on each reachable node.
pub fn ontology_embedding_oracle(store: &ParamStore, dag: &OntologyDag) -> (Mat, Vec<BTreeMap<usize, f64>>) {
    let e = param(store, "onto.E");
    let w = param(store, "onto.attn.weight");
    let b = param_row(store, "onto.attn.bias");
    let u = param_row(store, "onto.score");
    let mut g_rows = Vec::new();
    let mut weights = Vec::new();
    for leaf in 0..dag.leaf_count() {
        let set: Vec<usize> = reachable(dag, leaf).into_iter().collect();
        let mut scores = Vec::new();
        for &j in &set {
            let mut pair = e[leaf].clone();
            pair.extend_from_slice(&e[j]);
            let h = affine(&pair, &w, Some(&b));
            let mut s = 0.0;
            for k in 0..h.len() {
                s += u[k] * h[k].tanh();
            }
            scores.push(s);
        }
        let alpha = softmax(&scores, &vec![true; set.len()]);
        let mut row = vec![0.0; e[0].len()];
        for (a, &j) in alpha.iter().zip(&set) {
            for k in 0..row.len() {
                row[k] += a * e[j][k];
            }
        }
        g_rows.push(row);
        weights.push(set.iter().copied().zip(alpha).collect());
    }
    (g_rows, weights)
}

/// Multi-head attention of the rows of `x` inside each segment.
pub fn mha_oracle(
    store: &ParamStore,
    name: &str,
    heads: usize,
    scale: AttentionScale,
    x: &Mat,
    segments: &[Segment],
) -> Mat {
    let d = x[0].len();
    let dk = d / heads;
    let divisor = match scale {
        AttentionScale::Model => d,
        AttentionScale::Head => dk,
    } as f64;
    let wo = param(store, &format!("{name}.output"));
    let mut out = vec![Vec::new(); x.len()];
    for seg in segments {
        for i in 0..seg.len {
            let mut cat = Vec::with_capacity(d);
            for h in 0..heads {
                let wq = param(store, &format!("{name}.head{h}.query"));
                let wk = param(store, &format!("{name}.head{h}.key"));
                let wv = param(store, &format!("{name}.head{h}.value"));
                let q = row_times(&x[seg.start + i], &wq);
                let mut scores = Vec::new();
                let mut mask = Vec::new();
                for j in 0..seg.len {
                    let k = row_times(&x[seg.start + j], &wk);
                    let mut s = 0.0;
                    for c in 0..dk {
                        s += q[c] * k[c];
                    }
                    scores.push(s / divisor.sqrt());
                    mask.push(seg.mask.as_ref().is_none_or(|m| m[i * seg.len + j]));
                }
                let a = softmax(&scores, &mask);
                let mut o = vec![0.0; dk];
                for j in 0..seg.len {
                    if a[j] != 0.0 {
                        let v = row_times(&x[seg.start + j], &wv);
                        for c in 0..dk {
                            o[c] += a[j] * v[c];
                        }
                    }
                }
                cat.extend(o);
            }
            out[seg.start + i] = row_times(&cat, &wo);
        }
    }
    out
}

/// Pooled vectors of `visits` groups of `width` rows; `real` flags the rows
/// that take part.
pub fn pool_oracle(store: &ParamStore, name: &str, rows: &Mat, width: usize, real: &[bool]) -> Mat {
    let wh = param(store, &format!("{name}.hidden.weight"));
    let bh = param_row(store, &format!("{name}.hidden.bias"));
    let ws = param(store, &format!("{name}.score.weight"));
    let bs = param_row(store, &format!("{name}.score.bias"));
    let d = rows[0].len();
    let mut out = Vec::new();
    for t in 0..rows.len() / width {
        let mut scores = Vec::new();
        for j in 0..width {
            let h = relu(&affine(&rows[t * width + j], &wh, Some(&bh)));
            scores.push(affine(&h, &ws, Some(&bs))[0]);
        }
        let a = softmax(&scores, &real[t * width..(t + 1) * width]);
        let mut p = vec![0.0; d];
        for j in 0..width {
            if real[t * width + j] {
                for c in 0..d {
                    p[c] += a[j] * rows[t * width + j][c];
                }
            }
        }
        out.push(p);
    }
    out
}

/// Pooled visit vectors computed from the code ids alone; padded slots are
/// never touched.
pub fn encode_visit_oracle(
    store: &ParamStore,
    heads: usize,
    scale: AttentionScale,
    visits: &[Vec<usize>],
    codes: &Mat,
    onto: Option<&Mat>,
) -> Mat {
    let wm = param(store, "enc.code_proj.weight");
    let b = param_row(store, "enc.bias");
    let gain = param_row(store, "enc.norm.gain");
    let nb = param_row(store, "enc.norm.bias");
    let mut out = Vec::new();
    for v in visits {
        let em: Mat = v.iter().map(|&c| codes[c].clone()).collect();
        let full = [Segment::full(0, v.len())];
        let vm = mha_oracle(store, "enc.code_attn", heads, scale, &em, &full);
        let vg = onto.map(|g| {
            let eg: Mat = v.iter().map(|&c| g[c].clone()).collect();
            mha_oracle(store, "enc.onto_attn", heads, scale, &eg, &full)
        });
        let mut o = Vec::new();
        for i in 0..v.len() {
            let mut pre = affine(&vm[i], &wm, None);
            let mut skip = vm[i].clone();
            if let Some(vg) = &vg {
                let wg = param(store, "enc.onto_proj.weight");
                let p = affine(&vg[i], &wg, None);
                for c in 0..pre.len() {
                    pre[c] += p[c];
                    skip[c] += vg[i][c];
                }
            }
            let mut sum = Vec::new();
            for c in 0..pre.len() {
                sum.push((pre[c] + b[c]).max(0.0) + skip[c]);
            }
            o.push(layer_norm(&sum, &gain, &nb));
        }
        out.extend(pool_oracle(store, "enc.pool", &o, v.len(), &vec![true; v.len()]));
    }
    out
}

/// One post-norm causal layer over `x`; `real` flags unpadded positions.
pub fn journey_layer_oracle(
    store: &ParamStore,
    name: &str,
    heads: usize,
    scale: AttentionScale,
    x: &Mat,
    real: &[bool],
) -> Mat {
    let seg = Segment::causal(0, real);
    let a = mha_oracle(store, &format!("{name}.attn"), heads, scale, x, &[seg]);
    let g1 = param_row(store, &format!("{name}.attn_norm.gain"));
    let b1 = param_row(store, &format!("{name}.attn_norm.bias"));
    let w_in = param(store, &format!("{name}.ffn_in.weight"));
    let b_in = param_row(store, &format!("{name}.ffn_in.bias"));
    let w_out = param(store, &format!("{name}.ffn_out.weight"));
    let b_out = param_row(store, &format!("{name}.ffn_out.bias"));
    let g2 = param_row(store, &format!("{name}.ffn_norm.gain"));
    let b2 = param_row(store, &format!("{name}.ffn_norm.bias"));
    let mut out = Vec::new();
    for t in 0..x.len() {
        let s: Vec<f64> = (0..x[t].len()).map(|c| x[t][c] + a[t][c]).collect();
        let h = layer_norm(&s, &g1, &b1);
        let f = affine(&relu(&affine(&h, &w_in, Some(&b_in))), &w_out, Some(&b_out));
        let y: Vec<f64> = (0..h.len()).map(|c| h[c] + f[c]).collect();
        out.push(layer_norm(&y, &g2, &b2));
    }
    out
}

pub fn sequence_loss_oracle(probs: &Mat, labels: &Mat, mask: &[bool]) -> f64 {
    let live = mask.iter().filter(|&&m| m).count() as f64;
    let mut total = 0.0;
    for t in 0..probs.len() {
        if !mask[t] {
            continue;
        }
        for c in 0..probs[t].len() {
            let p = probs[t][c].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += labels[t][c] * p.ln() + (1.0 - labels[t][c]) * (1.0 - p).ln();
        }
    }
    -total / live
}

pub fn head_oracle(store: &ParamStore, x: &Mat, activation: HeadActivation) -> Mat {
    let w = param(store, "head.weight");
    let b = param_row(store, "head.bias");
    x.iter()
        .map(|r| {
            let z = affine(r, &w, Some(&b));
            match activation {
                HeadActivation::Softmax => softmax(&z, &vec![true; z.len()]),
                HeadActivation::Sigmoid => z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            }
        })
        .collect()
}

/// Mean over rows of the share of positives found in the `k` highest
/// scores, by sorting every row completely (ties by lower index).
pub fn accuracy_sort_oracle(scores: &Mat, labels: &[Vec<bool>], k: usize) -> f64 {
    let mut total = 0.0;
    for (s, y) in scores.iter().zip(labels) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let pos = y.iter().filter(|&&b| b).count() as f64;
        let hit = idx.iter().take(k).filter(|&&i| y[i]).count() as f64;
        total += hit / pos;
    }
    total / scores.len() as f64
}

// ---- randomized drivers; each returns the largest discrepancy observed ----

/// Random DAG: a root, a few layers of internal nodes with one or two
/// parents each, and leaves hanging under one to three nodes.
pub fn random_dag(rng: &mut ChaCha8Rng) -> OntologyDag {
    let internal = rng.random_range(1..6);
    let leaves = rng.random_range(1..7);
    let categories = rng.random_range(1..=leaves);
    let mut edges = Vec::new();
    for n in 0..internal {
        let parents = if n == 0 { 1 } else { rng.random_range(1..3) };
        for _ in 0..parents {
            let p = rng.random_range(0..=n);
            let parent = if p == n { "R".to_string() } else { format!("N{p}") };
            edges.push((format!("N{n}"), parent));
        }
    }
    let mut decl = Vec::new();
    for l in 0..leaves {
        decl.push((format!("L{l}"), format!("leaf{l}"), l % categories));
        for _ in 0..rng.random_range(1..4) {
            edges.push((format!("L{l}"), format!("N{}", rng.random_range(0..internal))));
        }
    }
    OntologyDag::from_parts(&decl, &edges, Some("R")).unwrap()
}

pub fn check_ontology_embedding(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let dag = random_dag(&mut r);
        let d = r.random_range(1..6);
        let mut store = ParamStore::new();
        let att = OntologyAttention::new(&mut store, &dag, d, &mut r).unwrap();
        randomize(&mut store, 1.0, &mut r);
        let mut g = Graph::new();
        let (gm, alpha) = att.forward_with_weights(&mut g, &store, &dag).unwrap();
        let (want, weights) = ontology_embedding_oracle(&store, &dag);
        worst = worst.max(max_diff(&g.value(gm).to_rows(), &want));
        let alpha = g.value(alpha).to_rows();
        for leaf in 0..dag.leaf_count() {
            let set = dag.ancestors(leaf).unwrap();
            assert_eq!(set.len(), weights[leaf].len());
            for (k, node) in set.iter().enumerate() {
                worst = worst.max((alpha[leaf][k] - weights[leaf][node]).abs());
            }
        }
    }
    worst
}

fn random_segments(rows: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < rows {
        let len = rng.random_range(1..=rows - start);
        let seg = match rng.random_range(0..3) {
            0 => Segment::full(start, len),
            1 => {
                let mut real: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
                real[0] = true;
                Segment::key_padding(start, &real)
            }
            _ => {
                let mut real: Vec<bool> = (0..len).map(|_| rng.random_bool(0.8)).collect();
                real[0] = true;
                Segment::causal(start, &real)
            }
        };
        segs.push(seg);
        start += len;
    }
    segs
}

fn random_scale(rng: &mut ChaCha8Rng) -> AttentionScale {
    if rng.random_bool(0.5) {
        AttentionScale::Model
    } else {
        AttentionScale::Head
    }
}

pub fn check_multi_head_attention(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let heads = r.random_range(1..4);
        let d = heads * r.random_range(1..4);
        let rows = r.random_range(1..9);
        let scale = random_scale(&mut r);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, scale, &mut r).unwrap();
        randomize(&mut store, 1.0, &mut r);
        let x = random_mat(rows, d, 1.0, &mut r);
        let segs = random_segments(rows, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(to_tensor(&x));
        let y = mha.forward(&mut g, &store, xv, &segs, &mut Dropout::eval()).unwrap();
        worst = worst.max(max_diff(&g.value(y).to_rows(), &mha_oracle(&store, "mha", heads, scale, &x, &segs)));
    }
    worst
}

pub fn check_attention_pool(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = r.random_range(1..6);
        let width = r.random_range(1..6);
        let visits = r.random_range(1..4);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, "pool", d, &mut r).unwrap();
        randomize(&mut store, 1.0, &mut r);
        let rows = random_mat(visits * width, d, 1.0, &mut r);
        let mut real: Vec<bool> = (0..visits * width).map(|_| r.random_bool(0.7)).collect();
        for t in 0..visits {
            real[t * width] = true;
        }
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&rows));
        let (p, _) = pool.forward(&mut g, &store, x, width, &real).unwrap();
        worst = worst.max(max_diff(&g.value(p).to_rows(), &pool_oracle(&store, "pool", &rows, width, &real)));
    }
    worst
}

pub fn check_encode_visit(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let heads = r.random_range(1..3);
        let d = heads * r.random_range(1..4);
        let leaves = r.random_range(3..10);
        let width = r.random_range(1..5);
        let with_ontology = r.random_bool(0.7);
        let scale = random_scale(&mut r);
        let mut store = ParamStore::new();
        let enc = VisitEncoder::new(&mut store, d, heads, scale, with_ontology, &mut r).unwrap();
        randomize(&mut store, 1.0, &mut r);
        let codes = random_mat(leaves, d, 1.0, &mut r);
        let onto = random_mat(leaves, d, 1.0, &mut r);
        let visits: Vec<Vec<usize>> = (0..r.random_range(1..4))
            .map(|_| {
                let n = r.random_range(1..=width.min(leaves));
                let mut v: Vec<usize> = (0..leaves).collect();
                for i in 0..n {
                    let j = r.random_range(i..leaves);
                    v.swap(i, j);
                }
                v.truncate(n);
                v
            })
            .collect();
        let refs: Vec<&[usize]> = visits.iter().map(Vec::as_slice).collect();
        let batch = VisitBatch::new(&refs, width).unwrap();
        assert!(batch.code_ids().iter().filter(|&&c| c == PAD_CODE).count() == refs.len() * width - visits.iter().map(Vec::len).sum::<usize>());
        let mut g = Graph::new();
        let ct = g.constant(to_tensor(&codes));
        let ot = with_ontology.then(|| g.constant(to_tensor(&onto)));
        let y = enc.forward(&mut g, &store, &batch, ct, ot).unwrap();
        let want = encode_visit_oracle(&store, heads, scale, &visits, &codes, with_ontology.then_some(&onto));
        worst = worst.max(max_diff(&g.value(y).to_rows(), &want));
    }
    worst
}

pub fn check_journey_transformer(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let heads = r.random_range(1..3);
        let d = heads * r.random_range(1..4);
        let d_ff = r.random_range(1..9);
        let len = r.random_range(1..7);
        let scale = random_scale(&mut r);
        let mut store = ParamStore::new();
        let jt = JourneyTransformer::new(&mut store, 1, d, heads, d_ff, scale, &mut r).unwrap();
        randomize(&mut store, 1.0, &mut r);
        let x = random_mat(len, d, 1.0, &mut r);
        let real_len = r.random_range(1..=len);
        let real: Vec<bool> = (0..len).map(|t| t < real_len).collect();
        let mut g = Graph::new();
        let xv = g.constant(to_tensor(&x));
        let y = jt.forward(&mut g, &store, xv, &real, &mut Dropout::eval()).unwrap();
        let want = journey_layer_oracle(&store, "journey.layer0", heads, scale, &x, &real);
        worst = worst.max(max_diff(&g.value(y).to_rows(), &want));
    }
    worst
}

pub fn check_sequence_loss(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let steps = r.random_range(1..6);
        let labels_n = r.random_range(1..8);
        let activation = if r.random_bool(0.5) { HeadActivation::Softmax } else { HeadActivation::Sigmoid };
        let d = r.random_range(1..5);
        let mut store = ParamStore::new();
        let head = PredictionHead::new(&mut store, d, labels_n, activation, &mut r).unwrap();
        randomize(&mut store, 2.0, &mut r);
        let x = random_mat(steps, d, 1.0, &mut r);
        let labels: Mat = (0..steps)
            .map(|_| (0..labels_n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut mask: Vec<bool> = (0..steps).map(|_| r.random_bool(0.7)).collect();
        mask[0] = true;
        let mut g = Graph::new();
        let xv = g.constant(to_tensor(&x));
        let logits = head.logits(&mut g, &store, xv).unwrap();
        let probs = head.probabilities(&mut g, logits).unwrap();
        let want = head_oracle(&store, &x, activation);
        worst = worst.max(max_diff(&g.value(probs).to_rows(), &want));
        let loss = sequence_loss(&mut g, probs, &to_tensor(&labels), &mask).unwrap();
        worst = worst.max((g.value(loss).item() - sequence_loss_oracle(&want, &labels, &mask)).abs());
    }
    worst
}

/// Compares `accuracy_at_k` with the sorting oracle on random rows (with
/// deliberate ties) for every k; returns the largest gap.
pub fn check_accuracy(rows: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..rows {
        let l = r.random_range(1..25);
        let scores: Vec<f64> = (0..l).map(|_| (r.random_range(-3.0..3.0f64) * 4.0).round() / 4.0).collect();
        let mut y: Vec<bool> = (0..l).map(|_| r.random_bool(0.3)).collect();
        let at = r.random_range(0..l);
        y[at] = true;
        for k in 1..=l {
            let got = accuracy_at_k(std::slice::from_ref(&scores), std::slice::from_ref(&y), k).unwrap();
            let want = accuracy_sort_oracle(&vec![scores.clone()], std::slice::from_ref(&y), k);
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

// ---- solver checks ----

/// `dh/dt = h`.
pub struct Growth;

impl VectorField for Growth {
    fn eval(&self, _: &mut Graph, _: &ParamStore, h: Var) -> setor::Result<Var> {
        Ok(h)
    }
}

/// `|h(1) - e|` for `h(0) = 1` under `dh/dt = h`.
pub fn growth_error(method: Method, steps_per_unit: u32) -> f64 {
    let mut g = Graph::inference();
    let h0 = g.constant(Tensor::scalar(1.0));
    let cfg = SolverConfig { method, steps_per_unit, ..Default::default() };
    let out = ode_solve(&mut g, &ParamStore::new(), &Growth, h0, &[0.0, 1.0], &cfg).unwrap();
    (g.value(out[1]).item() - std::f64::consts::E).abs()
}

/// `log2(err(n) / err(2n))`.
pub fn observed_order(method: Method, steps_per_unit: u32) -> f64 {
    (growth_error(method, steps_per_unit) / growth_error(method, 2 * steps_per_unit)).log2()
}

/// Solving `t0 → t1 → t2` equals solving `t0 → t2` on a grid where both
/// share step size; returns whether the end states are bitwise equal.
pub fn flow_composes_exactly(seed: u64) -> bool {
    let mut r = rng(seed);
    let d = r.random_range(1..5);
    let mut store = ParamStore::new();
    let f = OdeFunc::new(&mut store, "f", d, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let spu = 1u32 << r.random_range(0..3);
    let step = 1.0 / spu as f64;
    let a = r.random_range(1..6) as f64 * step;
    let b = a + r.random_range(1..6) as f64 * step;
    let method = if r.random_bool(0.5) { Method::Rk4 } else { Method::Euler };
    let cfg = SolverConfig { method, steps_per_unit: spu, ..Default::default() };
    let h0 = Tensor::uniform(&[r.random_range(1..3), d], -1.0, 1.0, &mut r);
    let mut g = Graph::inference();
    let x = g.constant(h0);
    let two = solve_func(&mut g, &store, &f, x, &[0.0, a, b], &cfg).unwrap();
    let one = solve_func(&mut g, &store, &f, x, &[0.0, b], &cfg).unwrap();
    g.value(two[2]).data() == g.value(one[1]).data()
}

/// Largest relative disagreement, `|x - y| / max(1, |x|, |y|)`, between
/// adjoint and on-tape gradients of a random readout of the final state.
pub fn adjoint_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(1..5);
    let mut store = ParamStore::new();
    let f = OdeFunc::new(&mut store, "f", d, &mut r).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let rows = r.random_range(1..3);
    let h0 = Tensor::uniform(&[rows, d], -1.0, 1.0, &mut r);
    let readout = Tensor::uniform(&[rows, d], -1.0, 1.0, &mut r);
    let mut times = vec![0.0];
    for _ in 0..r.random_range(1..4) {
        let last = *times.last().unwrap();
        times.push(last + r.random_range(0.0..2.0));
    }
    let mut grads = Vec::new();
    for gradient in [GradientMode::Backprop, GradientMode::Adjoint] {
        let cfg = SolverConfig { method: Method::Rk4, steps_per_unit: 8, gradient };
        store.zero_grad();
        let mut g = Graph::new();
        let x = g.input(h0.clone());
        let hs = solve_func(&mut g, &store, &f, x, &times, &cfg).unwrap();
        let w = g.constant(readout.clone());
        let mut terms = Vec::new();
        for h in &hs[1..] {
            let p = g.mul(*h, w).unwrap();
            terms.push(g.sum(p));
        }
        let loss = g.add_all(&terms).unwrap();
        g.backward(loss, &mut store).unwrap();
        let mut all = g.grad(x).unwrap().data().to_vec();
        for t in store.grads() {
            all.extend_from_slice(t.data());
        }
        grads.push(all);
    }
    grads[0]
        .iter()
        .zip(&grads[1])
        .map(|(a, b)| (a - b).abs() / 1f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}

// ---- causality ----

/// Largest gradient magnitude that output row `t` of a two-layer journey
/// transformer sends to any input row after `t`.
pub fn journey_future_gradient(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = r.random_range(1..3);
    let d = heads * r.random_range(1..4);
    let len = r.random_range(2..7);
    let mut store = ParamStore::new();
    let jt = JourneyTransformer::new(&mut store, 2, d, heads, 2 * d, random_scale(&mut r), &mut r).unwrap();
    randomize(&mut store, 1.0, &mut r);
    let x = Tensor::uniform(&[len, d], -1.0, 1.0, &mut r);
    let mut worst = 0.0f64;
    for t in 0..len {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = jt.forward(&mut g, &store, xv, &vec![true; len], &mut Dropout::eval()).unwrap();
        let row = g.slice_rows(y, t, t + 1).unwrap();
        let w = g.constant(Tensor::uniform(&[1, d], -1.0, 1.0, &mut r));
        let p = g.mul(row, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss, &mut store).unwrap();
        let grad = g.grad(xv).unwrap();
        for later in t + 1..len {
            for v in grad.row_slice(later) {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

/// Largest change of any earlier prediction when the codes of one visit of a
/// trained-size model's journey are replaced.
pub fn future_code_perturbation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut cfg = gradcheck_config();
    cfg.seed = seed;
    cfg.model.max_journey_len = 8;
    cfg.generator.patients = 20;
    let data = Dataset::load(&cfg).unwrap();
    let (model, mut store) = build_model(&cfg, &data).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let leaves = data.ontology.leaf_count();
    let mut worst = 0.0f64;
    for j in data.journeys.iter().filter(|j| j.visits.len() >= 3) {
        let j = j.truncated(cfg.model.max_journey_len);
        let inputs = j.visits.len() - 1;
        let at = r.random_range(1..inputs);
        let mut changed: PatientJourney = j.clone();
        let n = r.random_range(1..=cfg.model.max_codes.min(leaves));
        let mut codes: Vec<usize> = (0..leaves).collect();
        for i in 0..n {
            let k = r.random_range(i..leaves);
            codes.swap(i, k);
        }
        codes.truncate(n);
        changed.visits[at].codes = codes;
        let a = model.prepare(&j, &data.grouper).unwrap();
        let b = model.prepare(&changed, &data.grouper).unwrap();
        let out = model.predict(&store, &data.ontology, &[a, b]).unwrap();
        let (la, lb) = (out[0].0.to_rows(), out[1].0.to_rows());
        assert!(max_diff(&la[at..at + 1].to_vec(), &lb[at..at + 1].to_vec()) > 0.0);
        worst = worst.max(max_diff(&la[..at].to_vec(), &lb[..at].to_vec()));
    }
    worst
}
