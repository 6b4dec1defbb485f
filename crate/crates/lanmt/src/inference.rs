//! Deterministic iterative inference with a delta posterior, and
//! parallel latent search with teacher rescoring.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{LanmtError, Result};
use crate::model::{
    length_transform, LaNMTModel, LatentSequence, SourceEncoding,
};
use crate::objective::monte_carlo_elbo;
use crate::teacher::{Hypothesis, TeacherModel};

/// Point-mass latent assignment used during inference.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPosterior {
    pub mu: LatentSequence,
}

/// One refinement step: the latent location, the chosen target length,
/// the decoded tokens, the decoder's log-probability of those tokens,
/// and both signed variants of the deterministic lowerbound's prior
/// term (the paper leaves the ELBO sign of log p(mu|x) ambiguous, and
/// it is constant in y, so both are reported without asserting either).
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub length: usize,
    pub tokens: Vec<u32>,
    pub decoder_lp: f64,
    pub prior_lp: f64,
    pub lowerbound_minus_prior: f64,
    pub lowerbound_plus_prior: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo: Option<f64>,
    #[serde(skip)]
    pub mu: Array2<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementTrace {
    pub steps: Vec<StepRecord>,
    pub converged: bool,
    pub steps_used: usize,
}

impl RefinementTrace {
    pub fn final_tokens(&self) -> &[u32] {
        &self.steps.last().expect("trace has at least step 0").tokens
    }
}

/// Initializes the delta posterior at the prior means.
pub fn init_delta(model: &LaNMTModel, x: &[u32]) -> Result<DeltaPosterior> {
    let (prior, _) = model.prior_encode(x)?;
    Ok(DeltaPosterior { mu: LatentSequence { vectors: prior.means } })
}

/// Refits the delta posterior to the approximate posterior's mean given
/// the previous target guess (the Gaussian's mode equals its mean).
pub fn fit_delta(model: &LaNMTModel, x: &[u32], y_prev: &[u32]) -> Result<DeltaPosterior> {
    let q = model.posterior_encode(x, y_prev)?;
    Ok(DeltaPosterior { mu: LatentSequence { vectors: q.means } })
}

/// Greedy parallel decode at the latent location: the length predictor
/// picks l (floored at 1), the decoder emits the tokenwise argmax.
/// Token ties break toward the lowest id.
pub fn argmax_decode(
    model: &LaNMTModel,
    mu: &LatentSequence,
    enc: &SourceEncoding,
) -> Result<(usize, Vec<u32>, f64)> {
    let dist = model.predict_length(mu)?;
    let offset = dist.argmax_offset();
    let length = (mu.len() as i64 + offset).max(1) as usize;
    let zbar = length_transform(mu, length, model.sigma())?;
    let log_probs = model.decode_tokens(&zbar, enc)?;
    let mut tokens = Vec::with_capacity(length);
    let mut decoder_lp = 0.0;
    for row in log_probs.rows() {
        let mut best = 0usize;
        for (tok, &lp) in row.iter().enumerate() {
            if lp > row[best] {
                best = tok;
            }
        }
        decoder_lp += row[best];
        tokens.push(best as u32);
    }
    Ok((length, tokens, decoder_lp))
}

/// Log-density of the prior at the delta location, summed over
/// positions and dimensions.
fn prior_log_density(model: &LaNMTModel, x: &[u32], mu: &LatentSequence) -> Result<f64> {
    let (prior, _) = model.prior_encode(x)?;
    let mut acc = 0.0;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for k in 0..mu.len() {
        for d in 0..mu.vectors.ncols() {
            let m = prior.means[[k, d]];
            let s = prior.stds[[k, d]];
            let v = mu.vectors[[k, d]];
            acc += -0.5 * ((v - m) / s).powi(2) - s.ln() - 0.5 * ln_2pi;
        }
    }
    Ok(acc)
}

/// Options for the refinement loop.
#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    /// Maximum refinement iterations T; T = 0 returns the initial guess.
    pub steps: usize,
    /// Attach a Monte Carlo ELBO estimate (K samples) to each record.
    pub elbo_samples: Option<usize>,
    pub elbo_seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { steps: 1, elbo_samples: None, elbo_seed: 0 }
    }
}

/// Algorithm: start from the prior means, decode, then alternate
/// posterior refits and decodes until the output is stable or T steps
/// have run. Fully deterministic.
pub fn deterministic_inference(
    model: &LaNMTModel,
    x: &[u32],
    opts: &InferenceOptions,
) -> Result<RefinementTrace> {
    let delta = init_delta(model, x)?;
    refine_from(model, x, delta, opts)
}

/// The shared refinement loop, starting from an arbitrary latent
/// location (prior means for the deterministic path, a prior sample in
/// latent search).
fn refine_from(
    model: &LaNMTModel,
    x: &[u32],
    start: DeltaPosterior,
    opts: &InferenceOptions,
) -> Result<RefinementTrace> {
    let (_, enc) = model.prior_encode(x)?;
    let mut steps = Vec::with_capacity(opts.steps + 1);
    let mut mu = start.mu;
    let (length, tokens, decoder_lp) = argmax_decode(model, &mu, &enc)?;
    steps.push(make_record(model, x, 0, &mu, length, tokens, decoder_lp, opts)?);

    let mut converged = false;
    let mut steps_used = 0;
    for t in 1..=opts.steps {
        let y_prev = steps.last().expect("step 0 recorded").tokens.clone();
        mu = fit_delta(model, x, &y_prev)?.mu.vectors.into();
        let (length, tokens, decoder_lp) = argmax_decode(model, &mu, &enc)?;
        let same = tokens == y_prev;
        steps.push(make_record(model, x, t, &mu, length, tokens, decoder_lp, opts)?);
        steps_used = t;
        if same {
            converged = true;
            break;
        }
    }
    Ok(RefinementTrace { steps, converged, steps_used })
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    model: &LaNMTModel,
    x: &[u32],
    step: usize,
    mu: &LatentSequence,
    length: usize,
    tokens: Vec<u32>,
    decoder_lp: f64,
    opts: &InferenceOptions,
) -> Result<StepRecord> {
    let prior_lp = prior_log_density(model, x, mu)?;
    let elbo = match opts.elbo_samples {
        Some(k) if !tokens.is_empty() => Some(monte_carlo_elbo(
            model,
            &crate::corpus::SentencePair { source: x.to_vec(), target: tokens.clone() },
            k,
            opts.elbo_seed,
        )?),
        _ => None,
    };
    Ok(StepRecord {
        step,
        length,
        tokens,
        decoder_lp,
        prior_lp,
        lowerbound_minus_prior: decoder_lp - prior_lp,
        lowerbound_plus_prior: decoder_lp + prior_lp,
        elbo,
        mu: mu.vectors.clone(),
    })
}

impl From<Array2<f64>> for LatentSequence {
    fn from(vectors: Array2<f64>) -> Self {
        Self { vectors }
    }
}

/// Draws N latent candidates from the temperature-scaled prior
/// (candidate 0 is the noiseless prior mean), refines each with the
/// full deterministic loop, deduplicates the outputs, and returns the
/// candidate the teacher scores highest. Score ties break toward the
/// lowest candidate index.
pub fn latent_search(
    model: &LaNMTModel,
    teacher: &TeacherModel,
    x: &[u32],
    n: usize,
    temperature: f64,
    opts: &InferenceOptions,
    seed: u64,
) -> Result<Hypothesis> {
    if n == 0 {
        return Err(LanmtError::InvalidArgument("candidate count must be >= 1".into()));
    }
    if temperature < 0.0 {
        return Err(LanmtError::InvalidArgument(format!(
            "temperature {temperature} must be non-negative"
        )));
    }
    let (prior, _) = model.prior_encode(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<Vec<u32>> = Vec::with_capacity(n);
    for i in 0..n {
        let mu = if i == 0 {
            prior.means.clone()
        } else {
            let noise = Array2::from_shape_fn(prior.means.raw_dim(), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            &prior.means + &(&prior.stds * &noise * temperature)
        };
        let trace = refine_from(model, x, DeltaPosterior { mu: mu.into() }, opts)?;
        let tokens = trace.final_tokens().to_vec();
        if !candidates.contains(&tokens) {
            candidates.push(tokens);
        }
    }

    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, tokens) in candidates.iter().enumerate() {
        let score = if tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            teacher.log_prob(x, tokens)?
        };
        scores.push(score);
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok(Hypothesis {
        tokens: candidates.swap_remove(best_idx),
        decoder_lp: scores[best_idx],
        teacher_lp: Some(scores[best_idx]),
        finished: true,
    })
}
