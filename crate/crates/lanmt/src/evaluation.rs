//! BLEU with repetition removal, exact match, per-sentence latency
//! benchmarking, and the per-step / candidate-count trade-off reports.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::corpus::{SentencePair, MAX_OFFSET};
use crate::error::{LanmtError, Result};
use crate::inference::{deterministic_inference, latent_search, InferenceOptions};
use crate::model::LaNMTModel;
use crate::objective::monte_carlo_elbo;
use crate::teacher::TeacherModel;

/// Collapses maximal runs of consecutive identical tokens to a single
/// occurrence. Idempotent.
pub fn remove_repetitions<T: PartialEq + Clone>(tokens: &[T]) -> Vec<T> {
    let mut out = tokens.to_vec();
    out.dedup();
    out
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU: geometric mean of 1-4-gram modified precisions
/// times brevity penalty, as a percentage. Zero precisions for n >= 2
/// get add-one smoothing; a zero unigram precision yields 0.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(LanmtError::InvalidArgument("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(LanmtError::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                total[n - 1] += count;
                matched[n - 1] += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for n in 0..4 {
        let precision = if total[n] > 0 && matched[n] > 0 {
            matched[n] as f64 / total[n] as f64
        } else if n == 0 {
            return Ok(0.0);
        } else {
            (matched[n] + 1) as f64 / (total[n] + 1) as f64
        };
        log_precision_sum += precision.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_precision_sum / 4.0).exp() * 100.0)
}

/// BLEU of the evaluation pipeline: repetitions are removed from the
/// hypotheses (never the references) before scoring.
pub fn scored_bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<f64> {
    let cleaned: Vec<Vec<T>> = hypotheses.iter().map(|h| remove_repetitions(h)).collect();
    corpus_bleu(&cleaned, references)
}

/// Fraction of hypotheses that match their reference exactly, as a
/// percentage.
pub fn exact_match<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(LanmtError::InvalidArgument("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(LanmtError::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h == r)
        .count();
    Ok(hits as f64 * 100.0 / hypotheses.len() as f64)
}

/// Times a per-sentence procedure at batch size 1. Each input is run
/// `warmup` untimed iterations, then `repeats` timed iterations whose
/// mean becomes that sentence's latency. Returns the mean and the
/// population standard deviation over sentences, in milliseconds.
pub fn latency_bench<I, F: FnMut(&I)>(
    mut procedure: F,
    inputs: &[I],
    warmup: usize,
    repeats: usize,
) -> (f64, f64) {
    assert!(repeats >= 1, "latency_bench needs repeats >= 1");
    if inputs.is_empty() {
        return (0.0, 0.0);
    }
    let mut per_sentence = Vec::with_capacity(inputs.len());
    for input in inputs {
        for _ in 0..warmup {
            procedure(input);
        }
        let mut acc = 0.0;
        for _ in 0..repeats {
            let start = Instant::now();
            procedure(input);
            acc += start.elapsed().as_secs_f64() * 1e3;
        }
        per_sentence.push(acc / repeats as f64);
    }
    let mean = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    let var = per_sentence
        .iter()
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / per_sentence.len() as f64;
    (mean, var.sqrt())
}

/// Relative speedup of a system against a baseline: baseline mean
/// latency divided by system mean latency.
pub fn speedup(system_mean_ms: f64, baseline_mean_ms: f64) -> f64 {
    baseline_mean_ms / system_mean_ms
}

#[derive(Debug, Clone, Serialize)]
pub struct PerStepRow {
    pub step: usize,
    pub mean_elbo: f64,
    pub bleu: f64,
}

/// For t = 0..=T, the mean Monte Carlo ELBO (K samples per instance)
/// and BLEU of the step-t predictions over the evaluation set. Once a
/// sentence's refinement has converged its prediction stays fixed for
/// the remaining steps.
pub fn per_step_report(
    model: &LaNMTModel,
    pairs: &[SentencePair],
    t_max: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<PerStepRow>> {
    if pairs.is_empty() {
        return Err(LanmtError::InvalidArgument("empty evaluation set".into()));
    }
    let opts = InferenceOptions { steps: t_max, ..Default::default() };
    let mut traces = Vec::with_capacity(pairs.len());
    for pair in pairs {
        traces.push(deterministic_inference(model, &pair.source, &opts)?);
    }
    let references: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    let mut rows = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let mut hyps = Vec::with_capacity(pairs.len());
        let mut elbo_sum = 0.0;
        for (i, (pair, trace)) in pairs.iter().zip(&traces).enumerate() {
            let step = t.min(trace.steps.len() - 1);
            let y_t = trace.steps[step].tokens.clone();
            // one sampling stream per instance, shared across steps so
            // step-to-step ELBO comparisons are paired
            let pair_seed = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            elbo_sum += monte_carlo_elbo(
                model,
                &SentencePair { source: pair.source.clone(), target: y_t.clone() },
                k,
                pair_seed,
            )?;
            hyps.push(y_t);
        }
        rows.push(PerStepRow {
            step: t,
            mean_elbo: elbo_sum / pairs.len() as f64,
            bleu: scored_bleu(&hyps, &references)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup: 1, repeats: 3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub n: usize,
    /// True for the T-step refinement series, false for the T = 0 one.
    pub refined: bool,
    pub bleu: f64,
    /// Relative to the teacher's beam-3 latency.
    pub speedup: f64,
    pub mean_latency_ms: f64,
}

/// Sweeps the latent-search candidate count N and reports BLEU plus
/// speedup against teacher beam-3 decoding, as two series: with
/// refinement (T steps) and without (T = 0).
#[allow(clippy::too_many_arguments)]
pub fn tradeoff_report(
    model: &LaNMTModel,
    teacher: &TeacherModel,
    pairs: &[SentencePair],
    n_values: &[usize],
    t: usize,
    temperature: f64,
    bench: &BenchOptions,
    seed: u64,
) -> Result<Vec<TradeoffRow>> {
    if pairs.is_empty() {
        return Err(LanmtError::InvalidArgument("empty evaluation set".into()));
    }
    if n_values.is_empty() {
        return Err(LanmtError::InvalidArgument("empty candidate-count list".into()));
    }
    let references: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let (teacher_mean, _) = latency_bench(
        |x: &Vec<u32>| {
            teacher
                .beam_decode(x, 3, x.len() + MAX_OFFSET as usize)
                .expect("teacher beam decode");
        },
        &sources,
        bench.warmup,
        bench.repeats,
    );

    let mut rows = Vec::with_capacity(n_values.len() * 2);
    for &n in n_values {
        for refined in [true, false] {
            let steps = if refined { t } else { 0 };
            let opts = InferenceOptions { steps, ..Default::default() };
            let mut hyps = Vec::with_capacity(pairs.len());
            for x in &sources {
                let hyp = latent_search(model, teacher, x, n, temperature, &opts, seed)?;
                hyps.push(hyp.tokens);
            }
            let (mean_ms, _) = latency_bench(
                |x: &Vec<u32>| {
                    latent_search(model, teacher, x, n, temperature, &opts, seed)
                        .expect("latent search");
                },
                &sources,
                bench.warmup,
                bench.repeats,
            );
            rows.push(TradeoffRow {
                n,
                refined,
                bleu: scored_bleu(&hyps, &references)?,
                speedup: speedup(mean_ms, teacher_mean),
                mean_latency_ms: mean_ms,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub exact_match: f64,
    pub mean_latency_ms: f64,
    pub latency_std_ms: f64,
    pub per_step: Vec<PerStepRow>,
    pub tradeoff: Vec<TradeoffRow>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.bleu) {
            return Err(LanmtError::InvalidArgument(format!(
                "BLEU {} out of [0, 100]",
                self.bleu
            )));
        }
        if self.latency_std_ms < 0.0 {
            return Err(LanmtError::InvalidArgument("negative latency std".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn per_step_csv(&self) -> String {
        let mut out = String::from("step,mean_elbo,bleu\n");
        for row in &self.per_step {
            out.push_str(&format!("{},{:.6},{:.4}\n", row.step, row.mean_elbo, row.bleu));
        }
        out
    }

    pub fn tradeoff_csv(&self) -> String {
        let mut out = String::from("n,refined,bleu,speedup,mean_latency_ms\n");
        for row in &self.tradeoff {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4}\n",
                row.n, row.refined, row.bleu, row.speedup, row.mean_latency_ms
            ));
        }
        out
    }

    /// Writes report.json plus the two CSV tables into a directory.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = std::fs::File::create(dir.join("report.json"))?;
        json.write_all(self.to_json()?.as_bytes())?;
        std::fs::write(dir.join("per_step.csv"), self.per_step_csv())?;
        std::fs::write(dir.join("tradeoff.csv"), self.tradeoff_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LaNMTConfig;
    use crate::teacher::TeacherConfig;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn remove_repetitions_collapses_adjacent_runs() {
        assert_eq!(remove_repetitions(&words("a a b a")), words("a b a"));
        assert_eq!(remove_repetitions::<u32>(&[]), Vec::<u32>::new());
        assert_eq!(remove_repetitions(&words("the the the cat")), words("the cat"));
    }

    #[test]
    fn remove_repetitions_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let len = rng.random_range(0..12);
            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..4)).collect();
            let once = remove_repetitions(&tokens);
            let twice = remove_repetitions(&once);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn bleu_identical_corpora_score_100() {
        let refs = vec![words("a b c"), words("d e f g")];
        let bleu = corpus_bleu(&refs, &refs).unwrap();
        assert!((bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_oracle() {
        // hyp "a b c d" vs ref "a b c d e": all precisions 1,
        // BP = exp(1 - 5/4), BLEU = 77.8800...
        let hyp = vec![words("a b c d")];
        let reference = vec![words("a b c d e")];
        let bleu = corpus_bleu(&hyp, &reference).unwrap();
        assert!((bleu - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
        assert!((bleu - 77.88).abs() < 0.01);
    }

    #[test]
    fn bleu_add_one_smoothing_oracle() {
        // hyp "a c" vs ref "a b": p1 = 1/2, p2 smoothed to 1/2,
        // p3 = p4 = 1 (no trigrams), BP = 1 -> 0.25^(1/4) = 70.7107
        let hyp = vec![words("a c")];
        let reference = vec![words("a b")];
        let bleu = corpus_bleu(&hyp, &reference).unwrap();
        assert!((bleu - 100.0 * 0.25f64.powf(0.25)).abs() < 1e-9);
    }

    #[test]
    fn bleu_zero_unigram_precision_scores_zero() {
        let hyp = vec![words("x y")];
        let reference = vec![words("a b")];
        assert_eq!(corpus_bleu(&hyp, &reference).unwrap(), 0.0);
    }

    #[test]
    fn bleu_errors() {
        let empty: Vec<Vec<u32>> = vec![];
        assert!(corpus_bleu(&empty, &empty).is_err());
        let hyp = vec![vec![1u32]];
        let refs = vec![vec![1u32], vec![2u32]];
        assert!(corpus_bleu(&hyp, &refs).is_err());
    }

    #[test]
    fn bleu_is_permutation_invariant() {
        let hyps = vec![words("a b c"), words("d d e"), words("f g")];
        let refs = vec![words("a b x"), words("d e e"), words("f g h")];
        let base = corpus_bleu(&hyps, &refs).unwrap();
        let perm = [2usize, 0, 1];
        let hyps_p: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        assert_eq!(base, corpus_bleu(&hyps_p, &refs_p).unwrap());
    }

    #[test]
    fn scored_bleu_removes_repetitions_before_scoring() {
        // sentinel: the duplicated token drops before scoring, so the
        // pipeline score beats the raw score and equals the clean one
        let hyp = vec![words("a a b")];
        let reference = vec![words("a b")];
        let raw = corpus_bleu(&hyp, &reference).unwrap();
        let piped = scored_bleu(&hyp, &reference).unwrap();
        let clean = corpus_bleu(&[words("a b")], &reference).unwrap();
        assert_eq!(piped, clean);
        assert!(piped > raw);
    }

    #[test]
    fn exact_match_counts_perfect_rows() {
        let hyps = vec![vec![1u32, 2], vec![3], vec![4, 5]];
        let refs = vec![vec![1u32, 2], vec![3, 3], vec![4, 5]];
        let em = exact_match(&hyps, &refs).unwrap();
        assert!((em - 200.0 / 3.0).abs() < 1e-9);
        assert!(exact_match::<u32>(&[], &[]).is_err());
    }

    #[test]
    fn latency_bench_times_a_sleeping_stub() {
        let inputs = vec![(), (), ()];
        let (mean, _) = latency_bench(
            |_| std::thread::sleep(std::time::Duration::from_millis(10)),
            &inputs,
            1,
            2,
        );
        assert!((10.0..13.0).contains(&mean), "mean {mean}ms outside [10, 13]");
    }

    #[test]
    fn latency_bench_constant_stub_has_small_std() {
        let inputs = vec![0u32; 5];
        let (_, std) = latency_bench(
            |_| std::thread::sleep(std::time::Duration::from_millis(2)),
            &inputs,
            1,
            2,
        );
        assert!(std < 2.0, "std {std}ms too large");
    }

    #[test]
    fn speedup_of_identical_latencies_is_one() {
        assert_eq!(speedup(12.5, 12.5), 1.0);
        assert_eq!(speedup(5.0, 10.0), 2.0);
    }

    fn tiny_model(seed: u64) -> LaNMTModel {
        let config = LaNMTConfig {
            vocab_size: 10,
            latent_dim: 4,
            hidden: 16,
            ff: 32,
            prior_layers: 1,
            decoder_layers: 1,
            posterior_layers: 1,
            heads: 2,
            max_offset: 50,
            dropout: 0.0,
            max_steps: 100,
            shared_embedding: true,
        };
        LaNMTModel::new(config, seed).unwrap()
    }

    fn tiny_teacher(seed: u64) -> TeacherModel {
        let config = TeacherConfig {
            vocab_size: 10,
            hidden: 16,
            ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            dropout: 0.0,
            max_steps: 0,
            label_smoothing: 0.1,
            shared_embedding: true,
            length_normalize_beam: false,
        };
        TeacherModel::new(config, seed).unwrap()
    }

    fn tiny_pairs() -> Vec<SentencePair> {
        vec![
            SentencePair { source: vec![4, 5, 6], target: vec![5, 6, 7] },
            SentencePair { source: vec![7, 8], target: vec![8, 9] },
        ]
    }

    #[test]
    fn per_step_report_has_t_plus_one_rows() {
        let model = tiny_model(21);
        let pairs = tiny_pairs();
        let rows = per_step_report(&model, &pairs, 2, 2, 7).unwrap();
        assert_eq!(rows.len(), 3);
        for (t, row) in rows.iter().enumerate() {
            assert_eq!(row.step, t);
            assert!(row.mean_elbo.is_finite());
            assert!((0.0..=100.0).contains(&row.bleu));
        }
    }

    #[test]
    fn per_step_row_zero_is_single_pass_quality() {
        let model = tiny_model(22);
        let pairs = tiny_pairs();
        let rows = per_step_report(&model, &pairs, 1, 2, 7).unwrap();
        let opts = InferenceOptions { steps: 0, ..Default::default() };
        let hyps: Vec<Vec<u32>> = pairs
            .iter()
            .map(|p| {
                deterministic_inference(&model, &p.source, &opts)
                    .unwrap()
                    .final_tokens()
                    .to_vec()
            })
            .collect();
        let refs: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
        let expected = scored_bleu(&hyps, &refs).unwrap();
        assert_eq!(rows[0].bleu, expected);
    }

    #[test]
    fn tradeoff_report_matches_requested_candidate_counts() {
        let model = tiny_model(23);
        let teacher = tiny_teacher(24);
        let pairs = tiny_pairs();
        let bench = BenchOptions { warmup: 0, repeats: 1 };
        let rows =
            tradeoff_report(&model, &teacher, &pairs, &[1, 3], 1, 0.5, &bench, 11).unwrap();
        assert_eq!(rows.len(), 4);
        let ns: Vec<(usize, bool)> = rows.iter().map(|r| (r.n, r.refined)).collect();
        assert_eq!(ns, vec![(1, true), (1, false), (3, true), (3, false)]);
        for row in &rows {
            assert!((0.0..=100.0).contains(&row.bleu));
            assert!(row.mean_latency_ms > 0.0);
            assert!(row.speedup > 0.0);
        }
    }

    #[test]
    fn report_emission_round_trips() {
        let report = EvalReport {
            bleu: 42.5,
            exact_match: 10.0,
            mean_latency_ms: 3.25,
            latency_std_ms: 0.5,
            per_step: vec![
                PerStepRow { step: 0, mean_elbo: -12.0, bleu: 40.0 },
                PerStepRow { step: 1, mean_elbo: -10.0, bleu: 41.0 },
            ],
            tradeoff: vec![TradeoffRow {
                n: 10,
                refined: true,
                bleu: 43.0,
                speedup: 5.5,
                mean_latency_ms: 2.0,
            }],
        };
        report.validate().unwrap();
        let json = report.to_json().unwrap();
        assert!(json.contains("\"bleu\""));
        assert!(json.contains("\"tradeoff\""));
        let csv = report.per_step_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("step,mean_elbo,bleu"));
        let tcsv = report.tradeoff_csv();
        assert_eq!(tcsv.lines().count(), 2);

        let dir = tempfile::tempdir().unwrap();
        report.write_dir(dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("per_step.csv").exists());
        assert!(dir.path().join("tradeoff.csv").exists());

        let bad = EvalReport { bleu: 101.0, ..report };
        assert!(bad.validate().is_err());
    }
}
