//! Single entrypoint binding the pipelines: data generation, the three
//! training stages, inference, trace analysis, and the end-to-end
//! reproduce recipe.
//!
//! Every run resolves its configuration (TOML file plus flag overrides),
//! writes a frozen JSON snapshot into its output directory before doing any
//! work, and exits 0 on success. Usage errors exit 2, missing files exit 3,
//! everything else exits 1 with a machine-readable JSON error on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use latentlab::analysis;
use latentlab::ckpt;
use latentlab::infer::{self, DecodeConfig, EvalMode, StopRule};
use latentlab::model::{init_params, ModelConfig};
use latentlab::reproduce::{run_desk, Preset};
use latentlab::synthdata::{
    generate_corpus, read_jsonl, split_corpus, write_jsonl, GenSpec, Tokenizer, ValueRange,
};
use latentlab::training::{read_labels, train_cot_sft, train_stage1, train_stage2, TrainConfig};

#[derive(Parser)]
#[command(
    name = "latentlab",
    version,
    about = "Latent-reasoning training lab for tiny transformers"
)]
struct Cli {
    /// Worker threads for data-parallel sections (1 = strictly sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Root for relative output directories (env: LATENTLAB_OUT).
    #[arg(long, global = true, env = "LATENTLAB_OUT")]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic reasoning corpus (train/test JSONL plus manifest).
    GenData(GenDataArgs),
    /// Train the explicit chain-of-thought baseline.
    TrainCot(TrainCotArgs),
    /// Train latent-token generation (encoder-decoder, alternating schedule).
    TrainStage1(TrainStage1Args),
    /// Train autonomous latent generation from cached labels.
    TrainStage2(TrainStage2Args),
    /// Run inference over a dataset, writing traces and an eval summary.
    Infer(InferArgs),
    /// Trace metrics and diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Distribution diagnostics for a checkpoint (alias of `analyze prelim`).
    Prelim(PrelimArgs),
    /// Run the full pipeline for a preset and print the criteria report.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct CommonTrain {
    /// TOML config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output run directory (config snapshot, metrics, checkpoints).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    alpha_temperature: Option<f64>,
    /// Ablation: feed hidden states instead of soft embeddings.
    #[arg(long, default_value_t = false)]
    hidden_state: bool,
    /// Ablation: plain causal attention in the encoder.
    #[arg(long, default_value_t = false)]
    no_ltim: bool,
    /// Ablation: answer-only supervision in stage 1.
    #[arg(long, default_value_t = false)]
    no_ltsum: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl CommonTrain {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            None => TrainConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).map_err(|e| anyhow!("bad config: {e}"))?
            }
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.r {
            cfg.r = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = Some(v);
        }
        if let Some(v) = self.alpha_temperature {
            cfg.alpha_temperature = v;
        }
        if self.hidden_state {
            cfg.hidden_state = true;
        }
        if self.no_ltim {
            cfg.no_ltim = true;
        }
        if self.no_ltsum {
            cfg.no_ltsum = true;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total problems before the split.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Step-count range, e.g. 2..5.
    #[arg(long, default_value = "2..5")]
    steps: String,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    /// Also build a multi-chain corpus with up to this many chains each.
    #[arg(long)]
    multichain: Option<usize>,
    /// Problems in the multi-chain corpus.
    #[arg(long, default_value_t = 200)]
    multichain_n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCotArgs {
    #[arg(long)]
    data: PathBuf,
    /// Steps of explicit next-token training.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Model shape for fresh initialization.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    max_seq: usize,
    /// Resume from a saved training state directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: CommonTrain,
}

#[derive(Args)]
struct TrainStage1Args {
    #[arg(long)]
    data: PathBuf,
    /// Explicit-baseline checkpoint to initialize encoder and decoder.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    phase_a: Option<usize>,
    #[arg(long)]
    phase_b: Option<usize>,
    #[arg(long)]
    phase_c: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Conditioning steps sampled per update (0 = full objective).
    #[arg(long)]
    passes: Option<usize>,
    #[command(flatten)]
    common: CommonTrain,
}

#[derive(Args)]
struct TrainStage2Args {
    #[arg(long)]
    data: PathBuf,
    /// Latent label cache produced by stage 1.
    #[arg(long)]
    labels: PathBuf,
    /// Stage-1 decoder checkpoint.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Resume from a saved training state directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: CommonTrain,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long, default_value_t = 48)]
    latent_budget: usize,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = false)]
    greedy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    max_explicit: usize,
    /// Threshold stop rule on the collapse token instead of argmax.
    #[arg(long)]
    stop_threshold: Option<f64>,
    /// Hidden-state feedback (for checkpoints trained under that ablation).
    #[arg(long, default_value_t = false)]
    hidden_state: bool,
    #[arg(long)]
    top_k: Option<usize>,
}

impl DecodeArgs {
    fn resolve(&self) -> DecodeConfig {
        DecodeConfig {
            latent_budget: self.latent_budget,
            stop_rule: match self.stop_threshold {
                None => StopRule::ArgmaxClose,
                Some(t) => StopRule::Threshold(t),
            },
            temperature: self.temperature,
            top_p: self.top_p,
            greedy: self.greedy,
            seed: self.seed,
            max_explicit_len: self.max_explicit,
            top_k: self.top_k,
            latent_mode: if self.hidden_state {
                latentlab::latent::LatentMode::HiddenState
            } else {
                latentlab::latent::LatentMode::SoftEmbedding
            },
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// latent | explicit
    #[arg(long, default_value = "latent")]
    mode: String,
    /// Extra decode seeds for a mean ± CI evaluation summary.
    #[arg(long, value_delimiter = ',')]
    eval_seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Effective compression rate over a trace file.
    Ecr(EcrArgs),
    /// Path posterior (N_eff, Top-2) over a multi-chain corpus.
    Neff(NeffArgs),
    /// Hidden-state vs embedding diagnostics for a checkpoint.
    Prelim(PrelimArgs),
}

#[derive(Args)]
struct EcrArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NeffArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    multichain: PathBuf,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PrelimArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReproduceArgs {
    /// desk | smoke
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    latentlab::par::set_threads(cli.threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let missing = err
                .downcast_ref::<std::io::Error>()
                .map(|e| e.kind() == std::io::ErrorKind::NotFound)
                .unwrap_or(false)
                || err
                    .downcast_ref::<latentlab::Error>()
                    .map(|e| {
                        matches!(e, latentlab::Error::Io(io)
                                 if io.kind() == std::io::ErrorKind::NotFound)
                    })
                    .unwrap_or(false);
            eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
            if missing {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn resolve_out(root: &Option<PathBuf>, out: &Path) -> PathBuf {
    match (root, out.is_absolute()) {
        (Some(root), false) => root.join(out),
        _ => out.to_path_buf(),
    }
}

/// Write the resolved configuration snapshot before any work happens.
fn snapshot(dir: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn parse_steps(spec: &str) -> anyhow::Result<(usize, usize)> {
    let (lo, hi) =
        spec.split_once("..").ok_or_else(|| anyhow!("steps must look like 2..5"))?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let out = resolve_out(&cli.out_root, &args.out);
            let (steps_min, steps_max) = parse_steps(&args.steps)?;
            snapshot(
                &out,
                serde_json::json!({
                    "command": "gen-data", "seed": args.seed, "n": args.n,
                    "steps": [steps_min, steps_max], "test_frac": args.test_frac,
                    "multichain": args.multichain, "multichain_n": args.multichain_n,
                }),
            )?;
            let (problems, stats) = generate_corpus(&GenSpec {
                n: args.n,
                steps_min,
                steps_max,
                range: ValueRange::default(),
                seed: args.seed,
                multichain: None,
            })?;
            let (train, test) = split_corpus(&problems, args.test_frac, args.seed ^ 0x5);
            write_jsonl(&out.join("train.jsonl"), &train)?;
            write_jsonl(&out.join("test.jsonl"), &test)?;
            let mut manifest = serde_json::json!({
                "train": {"file": "train.jsonl", "n": train.len()},
                "test": {"file": "test.jsonl", "n": test.len()},
                "stats": stats,
            });
            if let Some(m) = args.multichain {
                let (mc, mc_stats) = generate_corpus(&GenSpec {
                    n: args.multichain_n,
                    steps_min,
                    steps_max: steps_max.min(4),
                    range: ValueRange::default(),
                    seed: args.seed ^ 0x77,
                    multichain: Some(m),
                })?;
                write_jsonl(&out.join("multichain.jsonl"), &mc)?;
                manifest["multichain"] = serde_json::json!({
                    "file": "multichain.jsonl", "n": mc.len(), "stats": mc_stats,
                });
            }
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            Ok(())
        }

        Command::TrainCot(args) => {
            let out = resolve_out(&cli.out_root, &args.common.out);
            let mut cfg = args.common.resolve()?;
            if let Some(v) = args.steps {
                cfg.cot_steps = v;
            }
            if let Some(v) = args.lr {
                cfg.lr_cot = v;
            }
            let tok = Tokenizer::default();
            let model = ModelConfig {
                n_layers: args.layers,
                n_heads: args.heads,
                d_model: args.d_model,
                vocab: tok.vocab_size(),
                max_seq: args.max_seq,
            };
            snapshot(
                &out,
                serde_json::json!({"command": "train-cot", "train": cfg, "model": model,
                                   "data": args.data, "resume": args.resume}),
            )?;
            let problems = read_jsonl(&args.data)?;
            let init = init_params(model, cfg.seed ^ 0x100)?;
            let outcome =
                train_cot_sft(&cfg, &problems, &tok, init, Some(&out), args.resume.as_deref())?;
            println!(
                "{}",
                serde_json::json!({"final_loss": outcome.final_loss, "steps": cfg.cot_steps,
                                    "model_dir": out.join("model")})
            );
            Ok(())
        }

        Command::TrainStage1(args) => {
            let out = resolve_out(&cli.out_root, &args.common.out);
            let mut cfg = args.common.resolve()?;
            if let Some(v) = args.phase_a {
                cfg.phase_a_steps = v;
            }
            if let Some(v) = args.phase_b {
                cfg.phase_b_steps = v;
            }
            if let Some(v) = args.phase_c {
                cfg.phase_c_steps = v;
            }
            if let Some(v) = args.lr {
                cfg.lr_stage1 = v;
            }
            if let Some(v) = args.passes {
                cfg.stage1_passes = v;
            }
            snapshot(
                &out,
                serde_json::json!({"command": "train-stage1", "train": cfg,
                                   "data": args.data, "init": args.init}),
            )?;
            let tok = Tokenizer::default();
            let problems = read_jsonl(&args.data)?;
            let init = ckpt::load_model(&args.init)?;
            let outcome = train_stage1(&cfg, &problems, &tok, &init, Some(&out))?;
            println!(
                "{}",
                serde_json::json!({
                    "loss_after_phase_a": outcome.loss_after_phase_a,
                    "loss_after_joint": outcome.loss_after_joint,
                    "encoder_dir": out.join("encoder"),
                    "decoder_dir": out.join("decoder"),
                    "labels": out.join("labels.jsonl"),
                })
            );
            Ok(())
        }

        Command::TrainStage2(args) => {
            let out = resolve_out(&cli.out_root, &args.common.out);
            let mut cfg = args.common.resolve()?;
            if let Some(v) = args.steps {
                cfg.stage2_steps = v;
            }
            if let Some(v) = args.lr {
                cfg.lr_stage2 = v;
            }
            snapshot(
                &out,
                serde_json::json!({"command": "train-stage2", "train": cfg, "data": args.data,
                                   "labels": args.labels, "init": args.init}),
            )?;
            let tok = Tokenizer::default();
            let problems = read_jsonl(&args.data)?;
            let labels = read_labels(&args.labels)?;
            let init = ckpt::load_model(&args.init)?;
            let outcome = train_stage2(
                &cfg,
                &problems,
                &labels,
                &tok,
                init,
                Some(&out),
                args.resume.as_deref(),
            )?;
            println!(
                "{}",
                serde_json::json!({"final_loss": outcome.final_loss,
                                    "model_dir": out.join("model")})
            );
            Ok(())
        }

        Command::Infer(args) => {
            let params = ckpt::load_model(&args.checkpoint)?;
            let problems = read_jsonl(&args.dataset)?;
            let tok = Tokenizer::default();
            let decode = args.decode.resolve();
            let mode = match args.mode.as_str() {
                "latent" => EvalMode::Latent,
                "explicit" => EvalMode::Explicit,
                other => return Err(anyhow!("unknown mode {other:?}")),
            };
            if let Some(out) = &args.out {
                let out = resolve_out(&cli.out_root, out);
                snapshot(
                    &out,
                    serde_json::json!({"command": "infer", "decode": decode, "mode": args.mode,
                                       "checkpoint": args.checkpoint, "dataset": args.dataset}),
                )?;
            }
            let (summary, traces) = infer::batch_eval(&params, &problems, &tok, &decode, mode)?;
            if let Some(path) = &args.trace_out {
                infer::write_traces(
                    path,
                    &decode,
                    &params.fingerprint(),
                    params.config.vocab,
                    &traces,
                )?;
            }
            let mut result = serde_json::json!({ "summary": summary });
            if !args.eval_seeds.is_empty() {
                let (per_seed, em, ll) = infer::eval_multi_seed(
                    &params,
                    &problems,
                    &tok,
                    &decode,
                    mode,
                    &args.eval_seeds,
                )?;
                result["per_seed"] = serde_json::to_value(per_seed)?;
                result["exact_match"] =
                    serde_json::json!({"mean": em.mean, "ci95_half_width": em.ci_half_width});
                result["latent_len"] =
                    serde_json::json!({"mean": ll.mean, "ci95_half_width": ll.ci_half_width});
            }
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }

        Command::Analyze(AnalyzeCmd::Ecr(args)) => {
            let tok = Tokenizer::default();
            let (vocab, traces) = infer::read_traces(&args.trace)?;
            let problems = read_jsonl(&args.dataset)?;
            let by_id: std::collections::HashMap<&str, &latentlab::synthdata::Problem> =
                problems.iter().map(|p| (p.id.as_str(), p)).collect();
            let mut rows = Vec::new();
            let mut values = Vec::new();
            for t in &traces {
                let Some(p) = by_id.get(t.id.as_str()) else { continue };
                if t.latent_len == 0 {
                    rows.push((t.id.clone(), 0.0));
                    values.push(0.0);
                    continue;
                }
                let chain = tok.tokenize(&p.chain)?;
                let e = analysis::ecr_at_k(&t.latent_probs(vocab), &chain, args.r, args.k)?;
                rows.push((t.id.clone(), e));
                values.push(e);
            }
            if let Some(out) = &args.out {
                analysis::write_ecr_csv(out, &rows)?;
            }
            let above_1 = values.iter().filter(|&&v| v > 1.0).count();
            println!(
                "{}",
                serde_json::json!({
                    "n": values.len(),
                    "k": args.k,
                    "r": args.r,
                    "mean": values.iter().sum::<f64>() / values.len().max(1) as f64,
                    "median": analysis::median(&values),
                    "frac_above_1": above_1 as f64 / values.len().max(1) as f64,
                })
            );
            Ok(())
        }

        Command::Analyze(AnalyzeCmd::Neff(args)) => {
            let tok = Tokenizer::default();
            let (vocab, traces) = infer::read_traces(&args.trace)?;
            let problems = read_jsonl(&args.multichain)?;
            let by_id: std::collections::HashMap<&str, &latentlab::synthdata::Problem> =
                problems.iter().map(|p| (p.id.as_str(), p)).collect();
            let k = args.k.min(vocab);
            let mut rows = Vec::new();
            for t in &traces {
                let Some(p) = by_id.get(t.id.as_str()) else { continue };
                let Some(chains) = &p.alt_chains else { continue };
                if t.latent_len == 0 || chains.len() < 2 {
                    continue;
                }
                let chains: Vec<Vec<u32>> =
                    chains.iter().map(|c| tok.tokenize(c)).collect::<latentlab::Result<_>>()?;
                let pp = analysis::path_posterior(
                    &t.latent_probs(vocab),
                    &chains,
                    args.r,
                    k,
                    args.tau,
                    args.eps,
                )?;
                rows.push((t.id.clone(), pp.n_eff, pp.top2));
            }
            if let Some(out) = &args.out {
                analysis::write_neff_csv(out, &rows)?;
            }
            let neffs: Vec<f64> = rows.iter().map(|(_, n, _)| *n).collect();
            let top2s: Vec<f64> = rows.iter().map(|(_, _, t)| *t).collect();
            println!(
                "{}",
                serde_json::json!({
                    "n": rows.len(),
                    "k": k,
                    "tau": args.tau,
                    "median_n_eff": analysis::median(&neffs),
                    "mean_n_eff": neffs.iter().sum::<f64>() / neffs.len().max(1) as f64,
                    "mean_top2": top2s.iter().sum::<f64>() / top2s.len().max(1) as f64,
                })
            );
            Ok(())
        }

        Command::Analyze(AnalyzeCmd::Prelim(args)) | Command::Prelim(args) => {
            let out = resolve_out(&cli.out_root, &args.out_dir);
            snapshot(
                &out,
                serde_json::json!({"command": "prelim", "checkpoint": args.checkpoint,
                                   "corpus": args.corpus, "seed": args.seed}),
            )?;
            let params = ckpt::load_model(&args.checkpoint)?;
            let problems = read_jsonl(&args.corpus)?;
            let tok = Tokenizer::default();
            let (report, scatter) =
                analysis::hidden_vs_embedding_report(&params, &problems, &tok, args.seed)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            analysis::write_scatter_csv(&out.join("scatter.csv"), &scatter)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }

        Command::Reproduce(args) => {
            let out = resolve_out(&cli.out_root, &args.out);
            let preset = match args.preset.as_str() {
                "desk" => Preset::desk(),
                "smoke" => Preset::smoke(),
                other => return Err(anyhow!("unknown preset {other:?}")),
            };
            snapshot(&out, serde_json::to_value(&preset)?)?;
            let report = run_desk(&preset, &out)?;
            report.print();
            println!("report written to {}", out.join("report.json").display());
            Ok(())
        }
    }
}
