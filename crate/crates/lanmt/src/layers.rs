//! Transformer building blocks recorded on the autodiff tape.
//!
//! Layers hold `ParamId`s; a forward call binds current parameter values
//! into the graph, so the same structs serve training and inference.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{xavier, zeros, ones, ParamId, ParamStore};

/// Additive mask value for disallowed attention positions. Finite so the
/// softmax backward stays NaN-free.
const MASK_NEG: f64 = -1e30;

/// Forward mode: evaluation, or training with seeded dropout.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    pub(crate) fn apply_dropout(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Mode::Eval => x,
            Mode::Train { rng, dropout } => {
                if *dropout <= 0.0 {
                    return x;
                }
                let keep = 1.0 - *dropout;
                let dim = g.value(x).raw_dim();
                let mask = Array2::from_shape_fn(dim, |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                g.mul_const_mat(x, mask)
            }
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Self {
        Self {
            w: store.register(&format!("{prefix}/w"), xavier(rng, input, output)),
            b: store.register(&format!("{prefix}/b"), zeros(1, output)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(self.w, store.value(self.w).clone());
        let b = g.param(self.b, store.value(self.b).clone());
        let xw = g.matmul(x, w);
        g.add_row_broadcast(xw, b)
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(&format!("{prefix}/gamma"), ones(1, dim)),
            beta: store.register(&format!("{prefix}/beta"), zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma, store.value(self.gamma).clone());
        let beta = g.param(self.beta, store.value(self.beta).clone());
        g.layer_norm_rows(x, gamma, beta)
    }
}

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        heads: usize,
    ) -> Self {
        assert!(hidden % heads == 0, "hidden size must be divisible by heads");
        Self {
            wq: Linear::new(store, rng, &format!("{prefix}/wq"), hidden, hidden),
            wk: Linear::new(store, rng, &format!("{prefix}/wk"), hidden, hidden),
            wv: Linear::new(store, rng, &format!("{prefix}/wv"), hidden, hidden),
            wo: Linear::new(store, rng, &format!("{prefix}/wo"), hidden, hidden),
            heads,
            head_dim: hidden / heads,
        }
    }

    /// Attend from `queries` to `keys_values`; `mask` is added to the score
    /// matrix (rows = query positions, cols = key positions).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        keys_values: NodeId,
        mask: Option<&Array2<f64>>,
        mode: &mut Mode,
    ) -> NodeId {
        let q = self.wq.forward(g, store, queries);
        let k = self.wk.forward(g, store, keys_values);
        let v = self.wv.forward(g, store, keys_values);
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.slice_cols(q, start, self.head_dim);
            let kh = g.slice_cols(k, start, self.head_dim);
            let vh = g.slice_cols(v, start, self.head_dim);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = match mask {
                Some(m) => g.add_const_mat(scores, m.clone()),
                None => scores,
            };
            let probs = g.softmax_rows(scores);
            let probs = mode.apply_dropout(g, probs);
            heads.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&heads);
        self.wo.forward(g, store, merged)
    }
}

pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        ff: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(store, rng, &format!("{prefix}/lin1"), hidden, ff),
            lin2: Linear::new(store, rng, &format!("{prefix}/lin2"), ff, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.lin1.forward(g, store, x);
        let h = g.relu(h);
        self.lin2.forward(g, store, h)
    }
}

/// Post-norm encoder layer: self-attention then feed-forward.
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        ff: usize,
        heads: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{prefix}/attn"), hidden, heads),
            ffn: FeedForward::new(store, rng, &format!("{prefix}/ffn"), hidden, ff),
            ln1: LayerNorm::new(store, &format!("{prefix}/ln1"), hidden),
            ln2: LayerNorm::new(store, &format!("{prefix}/ln2"), hidden),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&Array2<f64>>,
        mode: &mut Mode,
    ) -> NodeId {
        let a = self.attn.forward(g, store, x, x, mask, mode);
        let a = mode.apply_dropout(g, a);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, store, x);
        let f = self.ffn.forward(g, store, x);
        let f = mode.apply_dropout(g, f);
        let x = g.add(x, f);
        self.ln2.forward(g, store, x)
    }
}

/// Post-norm decoder layer: self-attention, cross-attention, feed-forward.
/// The self-attention mask is the caller's choice (causal for the
/// autoregressive teacher, none for the non-autoregressive decoders).
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        ff: usize,
        heads: usize,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{prefix}/self"), hidden, heads),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{prefix}/cross"), hidden, heads),
            ffn: FeedForward::new(store, rng, &format!("{prefix}/ffn"), hidden, ff),
            ln1: LayerNorm::new(store, &format!("{prefix}/ln1"), hidden),
            ln2: LayerNorm::new(store, &format!("{prefix}/ln2"), hidden),
            ln3: LayerNorm::new(store, &format!("{prefix}/ln3"), hidden),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        memory: NodeId,
        self_mask: Option<&Array2<f64>>,
        mode: &mut Mode,
    ) -> NodeId {
        let a = self.self_attn.forward(g, store, x, x, self_mask, mode);
        let a = mode.apply_dropout(g, a);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, x, memory, None, mode);
        let c = mode.apply_dropout(g, c);
        let x = g.add(x, c);
        let x = self.ln2.forward(g, store, x);
        let f = self.ffn.forward(g, store, x);
        let f = mode.apply_dropout(g, f);
        let x = g.add(x, f);
        self.ln3.forward(g, store, x)
    }
}

pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_layers: usize,
        hidden: usize,
        ff: usize,
        heads: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{prefix}/layer{i}"), hidden, ff, heads))
            .collect();
        Self { layers }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: NodeId,
        mask: Option<&Array2<f64>>,
        mode: &mut Mode,
    ) -> NodeId {
        for layer in &self.layers {
            x = layer.forward(g, store, x, mask, mode);
        }
        x
    }
}

pub struct DecoderStack {
    layers: Vec<DecoderLayer>,
}

impl DecoderStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_layers: usize,
        hidden: usize,
        ff: usize,
        heads: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("{prefix}/layer{i}"), hidden, ff, heads))
            .collect();
        Self { layers }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: NodeId,
        memory: NodeId,
        self_mask: Option<&Array2<f64>>,
        mode: &mut Mode,
    ) -> NodeId {
        for layer in &self.layers {
            x = layer.forward(g, store, x, memory, self_mask, mode);
        }
        x
    }
}

/// Token embedding scaled by sqrt(dim) with sinusoidal positions added.
/// Clones share the underlying table parameter.
#[derive(Clone)]
pub struct Embedding {
    pub table: ParamId,
    dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let init = crate::params::gaussian_init(rng, vocab, dim, (dim as f64).powf(-0.5));
        Self {
            table: store.register(name, init),
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        pe: &Array2<f64>,
        mode: &mut Mode,
    ) -> NodeId {
        let table = g.param(self.table, store.value(self.table).clone());
        let emb = g.gather_rows(table, ids);
        let emb = g.scale(emb, (self.dim as f64).sqrt());
        let pe_slice = pe.slice(ndarray::s![..ids.len(), ..]).to_owned();
        let emb = g.add_const_mat(emb, pe_slice);
        mode.apply_dropout(g, emb)
    }
}

/// Sinusoidal positional encodings, `max_len x dim`.
pub fn sinusoidal_pe(max_len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, dim));
    for pos in 0..max_len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Additive causal mask: position i may attend to positions <= i.
pub fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { MASK_NEG } else { 0.0 })
}
