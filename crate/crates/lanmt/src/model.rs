//! The latent-variable model: prior p(z|x), approximate posterior
//! q(z|x,y), length predictor p(l_y|z), and a non-causal decoder
//! p(y|x,z,l_y), connected by a monotonic length transformation.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MAX_OFFSET;
use crate::error::{LanmtError, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{sinusoidal_pe, DecoderStack, Embedding, EncoderStack, Linear, Mode};
use crate::params::{Checkpoint, ParamId, ParamStore};
use crate::teacher::MAX_POSITIONS;

/// Additive floor keeping predicted standard deviations positive.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaNMTConfig {
    pub vocab_size: usize,
    /// Latent dimensionality D per position.
    pub latent_dim: usize,
    pub hidden: usize,
    pub ff: usize,
    pub prior_layers: usize,
    pub decoder_layers: usize,
    pub posterior_layers: usize,
    pub heads: usize,
    /// Length-offset support half-width L; offsets live in [-L, L].
    pub max_offset: usize,
    pub dropout: f64,
    /// Maximum training step M for the KL budget schedule.
    pub max_steps: usize,
    pub shared_embedding: bool,
}

impl LaNMTConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            latent_dim: 8,
            hidden: 64,
            ff: 256,
            prior_layers: 2,
            decoder_layers: 2,
            posterior_layers: 2,
            heads: 4,
            max_offset: MAX_OFFSET as usize,
            // at this scale dropout mostly starves the length head;
            // the full-size profile keeps the usual 0.1
            dropout: 0.0,
            max_steps: 6000,
            shared_embedding: true,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            latent_dim: 8,
            hidden: 512,
            ff: 2048,
            prior_layers: 6,
            decoder_layers: 6,
            posterior_layers: 3,
            heads: 8,
            max_offset: MAX_OFFSET as usize,
            dropout: 0.1,
            max_steps: 100_000,
            shared_embedding: true,
        }
    }

    pub fn offset_classes(&self) -> usize {
        2 * self.max_offset + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(LanmtError::Config("latent_dim must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(LanmtError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_steps < 2 {
            return Err(LanmtError::Config("max_steps must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-position diagonal Gaussians over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSequence {
    pub means: Array2<f64>,
    pub stds: Array2<f64>,
}

impl GaussianSequence {
    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }
}

/// A concrete latent assignment, one vector per source position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub vectors: Array2<f64>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// The prior encoder's hidden states, reused as decoder cross-attention
/// memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEncoding {
    pub hidden: Array2<f64>,
}

/// Categorical log-probabilities over length offsets delta = l_y - |x|
/// in [-L, L]; class c corresponds to offset c - L.
#[derive(Debug, Clone)]
pub struct LengthDistribution {
    pub log_probs: Vec<f64>,
    pub max_offset: usize,
}

impl LengthDistribution {
    /// Highest-probability offset; ties break toward the lowest class
    /// index (most negative offset).
    pub fn argmax_offset(&self) -> i64 {
        let mut best = 0usize;
        for (c, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = c;
            }
        }
        best as i64 - self.max_offset as i64
    }

    pub fn log_prob_of_offset(&self, offset: i64) -> Result<f64> {
        let class = offset + self.max_offset as i64;
        if class < 0 || class as usize >= self.log_probs.len() {
            return Err(LanmtError::InvalidArgument(format!(
                "offset {offset} outside [-{0}, {0}]",
                self.max_offset
            )));
        }
        Ok(self.log_probs[class as usize])
    }
}

/// z = mu + sigma * eps, elementwise.
pub fn reparameterize(g: &GaussianSequence, noise: &Array2<f64>) -> Result<LatentSequence> {
    if noise.raw_dim() != g.means.raw_dim() {
        return Err(LanmtError::ShapeMismatch(format!(
            "noise {:?} vs gaussian {:?}",
            noise.dim(),
            g.means.dim()
        )));
    }
    Ok(LatentSequence { vectors: &g.means + &(&g.stds * noise) })
}

/// Monotonic attention weights of the length transformation: entry
/// (j, k) = softmax_k( -(k - (|x|/l_y) j)^2 / (2 sigma^2) ) with both
/// positions 1-based.
pub fn length_transform_weights(src_len: usize, l_y: usize, sigma: f64) -> Result<Array2<f64>> {
    if src_len == 0 {
        return Err(LanmtError::InvalidArgument("empty latent sequence".into()));
    }
    if l_y < 1 || l_y > src_len + MAX_OFFSET as usize {
        return Err(LanmtError::InvalidArgument(format!(
            "target length {l_y} outside [1, {}]",
            src_len + MAX_OFFSET as usize
        )));
    }
    if sigma <= 0.0 {
        return Err(LanmtError::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let logits = length_transform_logit_base(src_len, l_y).mapv(|d| d / (sigma * sigma));
    Ok(softmax_rows_array(&logits))
}

/// The sigma-independent part of the transform logits:
/// -(k - (|x|/l_y) j)^2 / 2 at 1-based (j, k).
fn length_transform_logit_base(src_len: usize, l_y: usize) -> Array2<f64> {
    let ratio = src_len as f64 / l_y as f64;
    Array2::from_shape_fn((l_y, src_len), |(j, k)| {
        let d = (k + 1) as f64 - ratio * (j + 1) as f64;
        -0.5 * d * d
    })
}

fn softmax_rows_array(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Resizes a latent sequence to l_y rows via the weight matrix.
pub fn length_transform(z: &LatentSequence, l_y: usize, sigma: f64) -> Result<Array2<f64>> {
    let w = length_transform_weights(z.len(), l_y, sigma)?;
    Ok(w.dot(&z.vectors))
}

pub const LANMT_CHECKPOINT_KIND: &str = "lanmt";

pub struct LaNMTModel {
    pub config: LaNMTConfig,
    pub store: ParamStore,
    src_embed: Embedding,
    tgt_embed: Embedding,
    prior_encoder: EncoderStack,
    prior_proj: Linear,
    post_y_encoder: EncoderStack,
    post_decoder: DecoderStack,
    post_proj: Linear,
    len_proj: Linear,
    latent_proj: Linear,
    decoder: DecoderStack,
    output: Linear,
    sigma: ParamId,
    pe: Array2<f64>,
}

impl LaNMTModel {
    pub fn new(config: LaNMTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_dim;
        let src_embed = Embedding::new(&mut store, &mut rng, "embed/src", config.vocab_size, config.hidden);
        let tgt_embed = if config.shared_embedding {
            src_embed.clone()
        } else {
            Embedding::new(&mut store, &mut rng, "embed/tgt", config.vocab_size, config.hidden)
        };
        let prior_encoder = EncoderStack::new(
            &mut store, &mut rng, "prior/enc",
            config.prior_layers, config.hidden, config.ff, config.heads,
        );
        let prior_proj = Linear::new(&mut store, &mut rng, "prior/proj", config.hidden, 2 * d);
        let post_y_encoder = EncoderStack::new(
            &mut store, &mut rng, "posterior/y_enc",
            config.posterior_layers, config.hidden, config.ff, config.heads,
        );
        let post_decoder = DecoderStack::new(
            &mut store, &mut rng, "posterior/dec",
            config.posterior_layers, config.hidden, config.ff, config.heads,
        );
        let post_proj = Linear::new(&mut store, &mut rng, "posterior/proj", config.hidden, 2 * d);
        let len_proj = Linear::new(&mut store, &mut rng, "length/proj", d, config.offset_classes());
        let latent_proj = Linear::new(&mut store, &mut rng, "decoder/latent_proj", d, config.hidden);
        let decoder = DecoderStack::new(
            &mut store, &mut rng, "decoder/stack",
            config.decoder_layers, config.hidden, config.ff, config.heads,
        );
        let output = Linear::new(&mut store, &mut rng, "decoder/output", config.hidden, config.vocab_size);
        let sigma = store.register("length_transform/sigma", Array2::from_elem((1, 1), 1.0));
        let pe = sinusoidal_pe(MAX_POSITIONS, config.hidden);
        Ok(Self {
            config, store, src_embed, tgt_embed, prior_encoder, prior_proj,
            post_y_encoder, post_decoder, post_proj, len_proj, latent_proj,
            decoder, output, sigma, pe,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| LanmtError::Checkpoint(e.to_string()))?;
        Checkpoint::from_store(LANMT_CHECKPOINT_KIND, config_json, &self.store).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind(LANMT_CHECKPOINT_KIND, path)?;
        let config: LaNMTConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| LanmtError::Checkpoint(format!("bad config header: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.store.load_values(&ckpt.params)?;
        Ok(model)
    }

    /// Current length-transform scale.
    pub fn sigma(&self) -> f64 {
        self.store.value(self.sigma)[[0, 0]]
    }

    /// Clamp sigma to stay positive after an optimizer step.
    pub fn clamp_sigma(&mut self) {
        let v = &mut self.store.value_mut(self.sigma)[[0, 0]];
        if *v < STD_FLOOR {
            *v = STD_FLOOR;
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(LanmtError::InvalidArgument("empty sequence".into()));
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(LanmtError::IdOutOfVocab { id, vocab_size: self.config.vocab_size });
            }
        }
        Ok(())
    }

    /// Splits a |seq| x 2D projection into means and softplus-floored stds.
    fn gaussian_from_stats(&self, g: &mut Graph, stats: NodeId) -> (NodeId, NodeId) {
        let d = self.config.latent_dim;
        let means = g.slice_cols(stats, 0, d);
        let pre = g.slice_cols(stats, d, d);
        let sp = g.softplus(pre);
        let stds = g.add_const(sp, STD_FLOOR);
        (means, stds)
    }

    /// Prior component on the tape: (means, stds, source encoding).
    pub fn prior_graph(
        &self,
        g: &mut Graph,
        x: &[u32],
        mode: &mut Mode,
    ) -> (NodeId, NodeId, NodeId) {
        let ids: Vec<usize> = x.iter().map(|&t| t as usize).collect();
        let emb = self.src_embed.forward(g, &self.store, &ids, &self.pe, mode);
        let enc = self.prior_encoder.forward(g, &self.store, emb, None, mode);
        let stats = self.prior_proj.forward(g, &self.store, enc);
        let (means, stds) = self.gaussian_from_stats(g, stats);
        (means, stds, enc)
    }

    /// Posterior component on the tape: y is encoded with self-attention,
    /// then an unmasked decoder queries it from the x positions.
    pub fn posterior_graph(
        &self,
        g: &mut Graph,
        x: &[u32],
        y: &[u32],
        mode: &mut Mode,
    ) -> (NodeId, NodeId) {
        let y_ids: Vec<usize> = y.iter().map(|&t| t as usize).collect();
        let y_emb = self.tgt_embed.forward(g, &self.store, &y_ids, &self.pe, mode);
        let y_enc = self.post_y_encoder.forward(g, &self.store, y_emb, None, mode);
        let x_ids: Vec<usize> = x.iter().map(|&t| t as usize).collect();
        let x_emb = self.src_embed.forward(g, &self.store, &x_ids, &self.pe, mode);
        let dec = self.post_decoder.forward(g, &self.store, x_emb, y_enc, None, mode);
        let stats = self.post_proj.forward(g, &self.store, dec);
        self.gaussian_from_stats(g, stats)
    }

    /// Length predictor on the tape: mean-pool z, project, normalize.
    pub fn predict_length_graph(&self, g: &mut Graph, z: NodeId) -> NodeId {
        let pooled = g.mean_rows(z);
        let logits = self.len_proj.forward(g, &self.store, pooled);
        g.log_softmax_rows(logits)
    }

    /// Length transformation on the tape with the trainable sigma.
    pub fn length_transform_graph(&self, g: &mut Graph, z: NodeId, l_y: usize) -> Result<NodeId> {
        let src_len = g.value(z).nrows();
        if l_y < 1 || l_y > src_len + self.config.max_offset {
            return Err(LanmtError::InvalidArgument(format!(
                "target length {l_y} outside [1, {}]",
                src_len + self.config.max_offset
            )));
        }
        let base = g.input(length_transform_logit_base(src_len, l_y));
        let sigma = g.param(self.sigma, self.store.value(self.sigma).clone());
        let sig2 = g.mul(sigma, sigma);
        let one = g.input(Array2::from_elem((1, 1), 1.0));
        let inv = g.div(one, sig2);
        let logits = g.scale_by_node(base, inv);
        let w = g.softmax_rows(logits);
        Ok(g.matmul(w, z))
    }

    /// Decoder on the tape: project latents to hidden, add positions,
    /// run the unmasked decoder stack against the source encoding.
    pub fn decode_tokens_graph(
        &self,
        g: &mut Graph,
        zbar: NodeId,
        enc: NodeId,
        mode: &mut Mode,
    ) -> NodeId {
        let h = self.latent_proj.forward(g, &self.store, zbar);
        let l_y = g.value(h).nrows();
        let pe_slice = self.pe.slice(ndarray::s![..l_y, ..]).to_owned();
        let h = g.add_const_mat(h, pe_slice);
        let h = mode.apply_dropout(g, h);
        let dec = self.decoder.forward(g, &self.store, h, enc, None, mode);
        let logits = self.output.forward(g, &self.store, dec);
        g.log_softmax_rows(logits)
    }

    /// Prior distribution and reusable source encoding (evaluation path).
    pub fn prior_encode(&self, x: &[u32]) -> Result<(GaussianSequence, SourceEncoding)> {
        self.check_ids(x)?;
        let mut g = Graph::new();
        let (means, stds, enc) = self.prior_graph(&mut g, x, &mut Mode::Eval);
        Ok((
            GaussianSequence { means: g.value(means).clone(), stds: g.value(stds).clone() },
            SourceEncoding { hidden: g.value(enc).clone() },
        ))
    }

    pub fn posterior_encode(&self, x: &[u32], y: &[u32]) -> Result<GaussianSequence> {
        self.check_ids(x)?;
        self.check_ids(y)?;
        let mut g = Graph::new();
        let (means, stds) = self.posterior_graph(&mut g, x, y, &mut Mode::Eval);
        Ok(GaussianSequence { means: g.value(means).clone(), stds: g.value(stds).clone() })
    }

    pub fn predict_length(&self, z: &LatentSequence) -> Result<LengthDistribution> {
        if z.is_empty() {
            return Err(LanmtError::InvalidArgument("empty latent sequence".into()));
        }
        let mut g = Graph::new();
        let z_node = g.input(z.vectors.clone());
        let lp = self.predict_length_graph(&mut g, z_node);
        Ok(LengthDistribution {
            log_probs: g.value(lp).row(0).to_vec(),
            max_offset: self.config.max_offset,
        })
    }

    /// Token log-probabilities for transformed latents (evaluation path).
    pub fn decode_tokens(&self, zbar: &Array2<f64>, enc: &SourceEncoding) -> Result<Array2<f64>> {
        if zbar.nrows() == 0 {
            return Err(LanmtError::InvalidArgument("empty decoder input".into()));
        }
        let mut g = Graph::new();
        let z_node = g.input(zbar.clone());
        let enc_node = g.input(enc.hidden.clone());
        let lp = self.decode_tokens_graph(&mut g, z_node, enc_node, &mut Mode::Eval);
        Ok(g.value(lp).clone())
    }
}
