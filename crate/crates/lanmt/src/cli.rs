//! Command-line pipeline: synthetic data generation, teacher training,
//! sequence-level distillation, NAR training, translation, evaluation,
//! and the per-step / trade-off reports.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Manifest};
use crate::corpus::{
    generate_synthetic, read_parallel_corpus, write_parallel_corpus, RawPair, SentencePair,
    Vocab, MAX_OFFSET,
};
use crate::error::{LanmtError, Result};
use crate::evaluation::{
    exact_match, latency_bench, per_step_report, scored_bleu, tradeoff_report, BenchOptions,
    EvalReport,
};
use crate::inference::{deterministic_inference, latent_search, InferenceOptions};
use crate::model::LaNMTModel;
use crate::objective::train_lanmt;
use crate::teacher::{distill_corpus, train_teacher, TeacherModel};
use crate::{chart, teacher};

#[derive(Parser)]
#[command(
    name = "lanmt",
    version,
    about = "Latent-variable non-autoregressive translation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a starter configuration file
    InitConfig {
        /// Profile: desk or paper
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Where to write the TOML file
        #[arg(long)]
        path: PathBuf,
        /// Output directory recorded in the config
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Generate the synthetic parallel corpus and vocabulary
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 6000)]
        train_size: usize,
        #[arg(long, default_value_t = 1000)]
        eval_size: usize,
    },
    /// Train the autoregressive teacher
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Re-decode the training set with the teacher (distillation)
    Distill {
        #[command(flatten)]
        common: Common,
        /// Beam size (default: teacher.beam_size from the config)
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Train the latent-variable non-autoregressive model
    TrainNar {
        #[command(flatten)]
        common: Common,
        /// Train on raw targets instead of teacher decodes
        #[arg(long)]
        no_distill: bool,
    },
    /// Translate a file of whitespace-tokenized source lines
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Refinement iterations T (default: inference.steps)
        #[arg(long)]
        steps: Option<usize>,
        /// Latent-search candidates N; 1 skips the teacher entirely
        #[arg(long, default_value_t = 1)]
        candidates: usize,
        /// Prior sampling temperature (default: inference.temperature)
        #[arg(long)]
        temperature: Option<f64>,
        /// Use the checkpoint trained with --no-distill
        #[arg(long)]
        no_distill: bool,
    },
    /// Score the held-out set and benchmark per-sentence latency
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Refinement iterations T (default: inference.steps)
        #[arg(long)]
        steps: Option<usize>,
        /// Use the checkpoint trained with --no-distill
        #[arg(long)]
        no_distill: bool,
    },
    /// Emit the per-step and candidate-count trade-off artifacts
    Report {
        #[command(flatten)]
        common: Common,
        /// Refinement iterations T (default: inference.steps)
        #[arg(long)]
        steps: Option<usize>,
        /// Prior sampling temperature (default: inference.temperature)
        #[arg(long)]
        temperature: Option<f64>,
        /// Use the checkpoint trained with --no-distill
        #[arg(long)]
        no_distill: bool,
    },
}

struct Ctx {
    config: ExperimentConfig,
    seed: u64,
}

fn load_ctx(common: &Common) -> Result<Ctx> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        config.paths.output_dir = dir.clone();
    }
    let seed = common.seed.unwrap_or(config.seed);
    Ok(Ctx { config, seed })
}

pub fn teacher_ckpt_path(config: &ExperimentConfig) -> PathBuf {
    config.paths.output_dir.join("teacher.ckpt")
}

pub fn distilled_path(config: &ExperimentConfig) -> PathBuf {
    config.paths.output_dir.join("distilled.tsv")
}

pub fn nar_ckpt_path(config: &ExperimentConfig, no_distill: bool) -> PathBuf {
    let name = if no_distill { "nar-nodistill.ckpt" } else { "nar.ckpt" };
    config.paths.output_dir.join(name)
}

fn load_vocab(config: &ExperimentConfig) -> Result<Vocab> {
    ExperimentConfig::require_artifact(&config.paths.vocab, "vocabulary", "gen-data")?;
    Vocab::load(&config.paths.vocab)
}

fn load_train_pairs(config: &ExperimentConfig, vocab: &Vocab) -> Result<Vec<SentencePair>> {
    ExperimentConfig::require_artifact(&config.paths.train_corpus, "training corpus", "gen-data")?;
    let raw = read_parallel_corpus(&config.paths.train_corpus)?;
    Ok(vocab.encode_pairs(&raw))
}

fn load_eval_pairs(config: &ExperimentConfig, vocab: &Vocab) -> Result<Vec<SentencePair>> {
    ExperimentConfig::require_artifact(
        &config.paths.eval_corpus,
        "evaluation corpus",
        "gen-data",
    )?;
    let raw = read_parallel_corpus(&config.paths.eval_corpus)?;
    let mut pairs = vocab.encode_pairs(&raw);
    let limit = config.evaluation.limit;
    if limit > 0 && pairs.len() > limit {
        pairs.truncate(limit);
    }
    Ok(pairs)
}

fn load_teacher(config: &ExperimentConfig) -> Result<TeacherModel> {
    let path = teacher_ckpt_path(config);
    ExperimentConfig::require_artifact(&path, "teacher checkpoint", "train-teacher")?;
    TeacherModel::load(&path)
}

fn load_nar(config: &ExperimentConfig, no_distill: bool) -> Result<LaNMTModel> {
    let path = nar_ckpt_path(config, no_distill);
    let command = if no_distill { "train-nar --no-distill" } else { "train-nar" };
    ExperimentConfig::require_artifact(&path, "NAR checkpoint", command)?;
    LaNMTModel::load(&path)
}

fn finish(command: &str, ctx: &Ctx, started: Instant) -> Result<()> {
    let manifest = Manifest::new(command, &ctx.config, ctx.seed, started.elapsed().as_secs_f64())?;
    let path = manifest.write(&ctx.config.paths.output_dir)?;
    log::info!("{command}: manifest at {}", path.display());
    Ok(())
}

fn cmd_init_config(profile: &str, path: &Path, output_dir: &Path) -> Result<()> {
    let config = match profile {
        "desk" => ExperimentConfig::desk(output_dir),
        "paper" => ExperimentConfig::paper(output_dir),
        other => {
            return Err(LanmtError::Config(format!(
                "unknown profile `{other}`; expected desk or paper"
            )))
        }
    };
    config.save(path)?;
    println!("wrote {profile} profile to {}", path.display());
    Ok(())
}

fn cmd_gen_data(ctx: &Ctx, train_size: usize, eval_size: usize) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let mut task = config.task.clone().ok_or_else(|| {
        LanmtError::Config("gen-data needs a [task] section in the config".into())
    })?;
    task.seed = ctx.seed;
    let train = generate_synthetic(&task, train_size)?;

    // held-out pairs: fresh stream, sources never seen in training,
    // references canonicalized so scoring has a unique answer
    let mut eval_task = task.clone();
    eval_task.seed = task.seed.wrapping_add(0x517c_c1b7_2722_0a95);
    let candidates = generate_synthetic(&eval_task, eval_size * 2)?;
    let train_sources: HashSet<&[String]> =
        train.iter().map(|p| p.source.as_slice()).collect();
    let eval: Vec<RawPair> = candidates
        .into_iter()
        .filter(|p| !train_sources.contains(p.source.as_slice()))
        .take(eval_size)
        .map(|p| RawPair { target: task.canonical_target(&p.source), source: p.source })
        .collect();
    if eval.len() < eval_size {
        log::warn!(
            "gen-data: only {} of {} held-out pairs survived the overlap filter",
            eval.len(),
            eval_size
        );
    }

    let vocab = Vocab::build(&train, 1)?;
    std::fs::create_dir_all(&config.paths.output_dir)?;
    write_parallel_corpus(&train, &config.paths.train_corpus)?;
    write_parallel_corpus(&eval, &config.paths.eval_corpus)?;
    vocab.save(&config.paths.vocab)?;
    println!(
        "gen-data: {} train pairs, {} eval pairs, vocab size {}",
        train.len(),
        eval.len(),
        vocab.size()
    );
    finish("gen-data", ctx, started)
}

fn cmd_train_teacher(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let vocab = load_vocab(config)?;
    let pairs = load_train_pairs(config, &vocab)?;
    let teacher_config = config.teacher_config(vocab.size());
    teacher_config.validate()?;
    let (model, losses) = train_teacher(&pairs, &teacher_config, &config.train_options(), ctx.seed)?;

    std::fs::create_dir_all(&config.paths.output_dir)?;
    model.save(&teacher_ckpt_path(config))?;
    let mut metrics = std::fs::File::create(config.paths.output_dir.join("teacher-metrics.jsonl"))?;
    for (i, loss) in losses.iter().enumerate() {
        writeln!(metrics, "{{\"step\":{},\"loss\":{loss}}}", i + 1)?;
    }
    println!(
        "train-teacher: {} steps, final per-token loss {:.4}, checkpoint at {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        teacher_ckpt_path(config).display()
    );
    finish("train-teacher", ctx, started)
}

fn cmd_distill(ctx: &Ctx, beam: Option<usize>) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let vocab = load_vocab(config)?;
    let pairs = load_train_pairs(config, &vocab)?;
    let model = load_teacher(config)?;
    let beam = beam.unwrap_or(config.teacher.beam_size);
    let max_src = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
    let max_len = (max_src + MAX_OFFSET as usize).min(teacher::MAX_POSITIONS - 2);
    let outcome = distill_corpus(&model, &pairs, beam, max_len)?;

    let mut raw = Vec::with_capacity(outcome.pairs.len());
    for pair in &outcome.pairs {
        raw.push(RawPair {
            source: vocab.decode(&pair.source)?,
            target: vocab.decode(&pair.target)?,
        });
    }
    write_parallel_corpus(&raw, &distilled_path(config))?;
    println!(
        "distill: beam {beam}, {} pairs written, {} dropped ({} empty, {} unfinished, {} out of length window)",
        raw.len(),
        outcome.dropped(),
        outcome.dropped_empty,
        outcome.dropped_unfinished,
        outcome.dropped_offset
    );
    finish("distill", ctx, started)
}

fn cmd_train_nar(ctx: &Ctx, no_distill: bool) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let vocab = load_vocab(config)?;
    let pairs = if no_distill {
        load_train_pairs(config, &vocab)?
    } else {
        let path = distilled_path(config);
        ExperimentConfig::require_artifact(&path, "distilled corpus", "distill")?;
        let raw = read_parallel_corpus(&path)?;
        vocab.encode_pairs(&raw)
    };
    let lanmt_config = config.lanmt_config(vocab.size());
    lanmt_config.validate()?;

    std::fs::create_dir_all(&config.paths.output_dir)?;
    let metrics_name =
        if no_distill { "nar-nodistill-metrics.jsonl" } else { "nar-metrics.jsonl" };
    let mut metrics = std::fs::File::create(config.paths.output_dir.join(metrics_name))?;
    let (model, rows) = train_lanmt(
        &pairs,
        &lanmt_config,
        &config.train_options(),
        ctx.seed,
        Some(&mut metrics),
    )?;
    let ckpt = nar_ckpt_path(config, no_distill);
    model.save(&ckpt)?;
    if let Some(last) = rows.last() {
        println!(
            "train-nar: {} steps, loss {:.4}, raw KL/token {:.4}, checkpoint at {}",
            last.step,
            last.loss,
            last.kl_raw,
            ckpt.display()
        );
    }
    let command = if no_distill { "train-nar-nodistill" } else { "train-nar" };
    finish(command, ctx, started)
}

#[allow(clippy::too_many_arguments)]
fn cmd_translate(
    ctx: &Ctx,
    input: &Path,
    output: &Path,
    steps: Option<usize>,
    candidates: usize,
    temperature: Option<f64>,
    no_distill: bool,
) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let vocab = load_vocab(config)?;
    let model = load_nar(config, no_distill)?;
    let teacher = if candidates > 1 { Some(load_teacher(config)?) } else { None };
    let steps = steps.unwrap_or(config.inference.steps);
    let temperature = temperature.unwrap_or(config.inference.temperature);
    let opts = InferenceOptions { steps, ..Default::default() };

    let text = std::fs::read_to_string(input)?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            lines.push(String::new());
            continue;
        }
        let x = vocab.encode(&tokens);
        let ids = match &teacher {
            Some(teacher) => {
                // one sampling stream per line so outputs don't depend
                // on which other lines are in the file
                let line_seed =
                    config.inference.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                latent_search(&model, teacher, &x, candidates, temperature, &opts, line_seed)?
                    .tokens
            }
            None => deterministic_inference(&model, &x, &opts)?.final_tokens().to_vec(),
        };
        lines.push(vocab.decode(&ids)?.join(" "));
    }
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(output, text)?;
    println!("translate: {} lines -> {}", lines.len(), output.display());
    finish("translate", ctx, started)
}

struct CoreMetrics {
    bleu: f64,
    exact: f64,
    mean_latency_ms: f64,
    latency_std_ms: f64,
}

/// Decodes the held-out set once for quality metrics, then times the
/// same procedure per sentence for latency.
fn nar_core_metrics(
    model: &LaNMTModel,
    pairs: &[SentencePair],
    steps: usize,
    bench: &BenchOptions,
) -> Result<CoreMetrics> {
    let opts = InferenceOptions { steps, ..Default::default() };
    let mut hyps = Vec::with_capacity(pairs.len());
    for pair in pairs {
        hyps.push(deterministic_inference(model, &pair.source, &opts)?.final_tokens().to_vec());
    }
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    let bleu = scored_bleu(&hyps, &refs)?;
    let exact = exact_match(&hyps, &refs)?;
    let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let (mean_latency_ms, latency_std_ms) = latency_bench(
        |x: &Vec<u32>| {
            deterministic_inference(model, x, &opts).expect("decode");
        },
        &sources,
        bench.warmup,
        bench.repeats,
    );
    Ok(CoreMetrics { bleu, exact, mean_latency_ms, latency_std_ms })
}

fn cmd_evaluate(ctx: &Ctx, steps: Option<usize>, no_distill: bool) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let vocab = load_vocab(config)?;
    let pairs = load_eval_pairs(config, &vocab)?;
    let model = load_nar(config, no_distill)?;
    let steps = steps.unwrap_or(config.inference.steps);
    let bench = BenchOptions {
        warmup: config.evaluation.bench_warmup,
        repeats: config.evaluation.bench_repeats,
    };
    let core = nar_core_metrics(&model, &pairs, steps, &bench)?;
    let report = EvalReport {
        bleu: core.bleu,
        exact_match: core.exact,
        mean_latency_ms: core.mean_latency_ms,
        latency_std_ms: core.latency_std_ms,
        per_step: vec![],
        tradeoff: vec![],
    };
    report.validate()?;
    let dir = config.paths.output_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    println!(
        "evaluate: {} pairs, T={steps}: BLEU {:.2}, exact match {:.2}%, latency {:.2} ms (std {:.2})",
        pairs.len(),
        core.bleu,
        core.exact,
        core.mean_latency_ms,
        core.latency_std_ms
    );
    finish("evaluate", ctx, started)
}

fn cmd_report(
    ctx: &Ctx,
    steps: Option<usize>,
    temperature: Option<f64>,
    no_distill: bool,
) -> Result<()> {
    let started = Instant::now();
    let config = &ctx.config;
    let vocab = load_vocab(config)?;
    let pairs = load_eval_pairs(config, &vocab)?;
    let model = load_nar(config, no_distill)?;
    let teacher = load_teacher(config)?;
    let steps = steps.unwrap_or(config.inference.steps);
    let temperature = temperature.unwrap_or(config.inference.temperature);
    let bench = BenchOptions {
        warmup: config.evaluation.bench_warmup,
        repeats: config.evaluation.bench_repeats,
    };

    let core = nar_core_metrics(&model, &pairs, steps, &bench)?;
    let per_step = per_step_report(
        &model,
        &pairs,
        steps,
        config.evaluation.elbo_samples,
        config.inference.seed,
    )?;
    let tradeoff = tradeoff_report(
        &model,
        &teacher,
        &pairs,
        &config.evaluation.tradeoff_candidates,
        steps,
        temperature,
        &bench,
        config.inference.seed,
    )?;
    let report = EvalReport {
        bleu: core.bleu,
        exact_match: core.exact,
        mean_latency_ms: core.mean_latency_ms,
        latency_std_ms: core.latency_std_ms,
        per_step,
        tradeoff,
    };
    report.validate()?;
    let dir = config.paths.output_dir.join("report");
    report.write_dir(&dir)?;
    if config.evaluation.charts {
        chart::elbo_vs_step_chart(&report.per_step)
            .write_svg(&dir.join("charts/elbo_vs_step.svg"))?;
        chart::bleu_vs_step_chart(&report.per_step)
            .write_svg(&dir.join("charts/bleu_vs_step.svg"))?;
        chart::bleu_vs_speedup_chart(&report.tradeoff)
            .write_svg(&dir.join("charts/bleu_vs_speedup.svg"))?;
    }
    println!("report: artifacts under {}", dir.display());
    for row in &report.per_step {
        println!("  step {}: mean ELBO {:.3}, BLEU {:.2}", row.step, row.mean_elbo, row.bleu);
    }
    for row in &report.tradeoff {
        println!(
            "  N={} {}: BLEU {:.2}, speedup {:.2}x",
            row.n,
            if row.refined { "refined" } else { "one-shot" },
            row.bleu,
            row.speedup
        );
    }
    finish("report", ctx, started)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::InitConfig { profile, path, output_dir } => {
            cmd_init_config(&profile, &path, &output_dir)
        }
        Command::GenData { common, train_size, eval_size } => {
            cmd_gen_data(&load_ctx(&common)?, train_size, eval_size)
        }
        Command::TrainTeacher { common } => cmd_train_teacher(&load_ctx(&common)?),
        Command::Distill { common, beam } => cmd_distill(&load_ctx(&common)?, beam),
        Command::TrainNar { common, no_distill } => {
            cmd_train_nar(&load_ctx(&common)?, no_distill)
        }
        Command::Translate { common, input, output, steps, candidates, temperature, no_distill } => {
            cmd_translate(
                &load_ctx(&common)?,
                &input,
                &output,
                steps,
                candidates,
                temperature,
                no_distill,
            )
        }
        Command::Evaluate { common, steps, no_distill } => {
            cmd_evaluate(&load_ctx(&common)?, steps, no_distill)
        }
        Command::Report { common, steps, temperature, no_distill } => {
            cmd_report(&load_ctx(&common)?, steps, temperature, no_distill)
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        let cases: Vec<Vec<&str>> = vec![
            vec!["lanmt", "init-config", "--path", "c.toml", "--output-dir", "out"],
            vec!["lanmt", "gen-data", "--config", "c.toml", "--train-size", "100"],
            vec!["lanmt", "train-teacher", "--config", "c.toml", "--seed", "7"],
            vec!["lanmt", "distill", "--config", "c.toml", "--beam", "2"],
            vec!["lanmt", "train-nar", "--config", "c.toml", "--no-distill"],
            vec![
                "lanmt", "translate", "--config", "c.toml", "--input", "in.txt", "--output",
                "out.txt", "--steps", "0", "--candidates", "5", "--temperature", "0.5",
            ],
            vec!["lanmt", "evaluate", "--config", "c.toml", "--output-dir", "elsewhere"],
            vec!["lanmt", "report", "--config", "c.toml", "--steps", "2"],
        ];
        for args in cases {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }

    #[test]
    fn rejects_unknown_flags() {
        assert!(Cli::try_parse_from(["lanmt", "evaluate", "--config", "c", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["lanmt", "unknown-command"]).is_err());
    }

    #[test]
    fn checkpoint_paths_depend_on_distill_flag() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::desk(dir.path());
        assert!(nar_ckpt_path(&config, false).ends_with("nar.ckpt"));
        assert!(nar_ckpt_path(&config, true).ends_with("nar-nodistill.ckpt"));
        assert!(teacher_ckpt_path(&config).ends_with("teacher.ckpt"));
        assert!(distilled_path(&config).ends_with("distilled.tsv"));
    }
}
