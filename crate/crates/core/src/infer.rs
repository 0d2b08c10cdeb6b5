//! Latent-mode autoregressive generation with full trace recording.
//!
//! After the question and `<think>`, the model loops in latent mode: the
//! next-step distribution q_t is computed, and unless the stop rule fires
//! the expectation E·q_t is fed back as the next input (never a sample, so
//! latent generation is deterministic given parameters). When q_t collapses
//! onto `</think>` the loop emits the marker and switches to explicit
//! decoding with temperature + nucleus sampling until end-of-sequence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{soft_embed, LatentMode};
use crate::model::{forward, ModelParams, PosEntry, SequenceInput};
use crate::num::prob::{softmax_with_temperature, ProbVector};
use crate::par::par_map;
use crate::segmask::{causal_mask, Markers};
use crate::synthdata::{Problem, Tokenizer};

/// When the latent loop hands control back to explicit decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// Collapse when `</think>` is the argmax of q_t (the default; matches
    /// how the collapse token is supervised in stage 2).
    ArgmaxClose,
    /// Collapse when q_t[`</think>`] exceeds the threshold.
    Threshold(f64),
}

/// Decoding hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Latent step budget T_max.
    pub latent_budget: usize,
    pub stop_rule: StopRule,
    /// Explicit-mode sampling temperature.
    pub temperature: f64,
    /// Nucleus threshold in (0, 1].
    pub top_p: f64,
    /// Argmax decoding for explicit mode instead of sampling.
    pub greedy: bool,
    pub seed: u64,
    pub max_explicit_len: usize,
    /// Optional top-k pruning of the fed-back mixture.
    pub top_k: Option<usize>,
    pub latent_mode: LatentMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            latent_budget: 48,
            stop_rule: StopRule::ArgmaxClose,
            temperature: 0.6,
            top_p: 0.95,
            greedy: false,
            seed: 0,
            max_explicit_len: 64,
            top_k: None,
            latent_mode: LatentMode::SoftEmbedding,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_budget < 1 {
            return Err(Error::invalid("latent budget must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid("nucleus threshold must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Does q_t collapse onto the close marker?
pub fn stop_rule(q: &ProbVector, rule: StopRule, close_id: u32) -> bool {
    match rule {
        StopRule::ArgmaxClose => q.argmax() == close_id as usize,
        StopRule::Threshold(theta) => q.as_slice()[close_id as usize] > theta,
    }
}

// ---- trace -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Latent,
    Explicit,
}

/// Full or truncated probability storage. Full vectors are kept whenever
/// V ≤ 256 (always true at desk scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopKStore {
    pub ids: Vec<u32>,
    pub ps: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub mode: StepMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub topk: Option<TopKStore>,
}

impl TraceStep {
    fn new(step: usize, mode: StepMode, probs: Vec<f64>) -> Self {
        if probs.len() <= 256 {
            TraceStep { step, mode, probs: Some(probs), topk: None }
        } else {
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(128);
            let ps: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
            let residual = 1.0 - ps.iter().sum::<f64>();
            TraceStep {
                step,
                mode,
                probs: None,
                topk: Some(TopKStore {
                    ids: idx.into_iter().map(|i| i as u32).collect(),
                    ps,
                    residual,
                }),
            }
        }
    }

    /// Stored distribution as a dense vector over the vocabulary.
    pub fn dense_probs(&self, vocab: usize) -> Vec<f64> {
        match (&self.probs, &self.topk) {
            (Some(p), _) => p.clone(),
            (None, Some(t)) => {
                let mut out = vec![0.0; vocab];
                for (&i, &p) in t.ids.iter().zip(&t.ps) {
                    out[i as usize] = p;
                }
                out
            }
            _ => vec![0.0; vocab],
        }
    }
}

/// Per-step record of one generation: latent steps first, then explicit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub id: String,
    pub steps: Vec<TraceStep>,
    pub answer_tokens: Vec<u32>,
    pub answer_text: String,
    pub latent_len: usize,
    pub explicit_len: usize,
    /// Latent budget ran out before the stop rule fired (forced collapse).
    pub truncated: bool,
}

impl ReasoningTrace {
    /// The latent-step distributions p_1..p_T as dense vectors.
    pub fn latent_probs(&self, vocab: usize) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .filter(|s| s.mode == StepMode::Latent)
            .map(|s| s.dense_probs(vocab))
            .collect()
    }
}

// ---- the generation loop -----------------------------------------------------

/// One position of generated context.
#[derive(Debug, Clone)]
pub enum FeedItem {
    Token(u32),
    Dense(Vec<f64>),
}

/// Autoregressive model surface the generation loop drives. Implemented by
/// [`LatentModel`] for real parameters and by test stubs.
pub trait LatentLm {
    fn vocab(&self) -> usize;
    /// Longest context the model accepts; generation stops short of it.
    fn context_limit(&self) -> usize {
        usize::MAX
    }
    /// Full forward over the context; returns (last hidden state, last logits).
    fn step(&self, seq: &[FeedItem]) -> Result<(Vec<f64>, Vec<f64>)>;
    /// Feedback vector for latent mode: (recorded mixture α, next input z).
    fn feedback(&self, hidden: &[f64], logits: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Real-parameter implementation (no KV cache; sequences are short).
pub struct LatentModel<'a> {
    pub params: &'a ModelParams,
    pub top_k: Option<usize>,
    pub mode: LatentMode,
}

impl LatentLm for LatentModel<'_> {
    fn vocab(&self) -> usize {
        self.params.config.vocab
    }

    fn context_limit(&self) -> usize {
        self.params.config.max_seq
    }

    fn step(&self, seq: &[FeedItem]) -> Result<(Vec<f64>, Vec<f64>)> {
        let entries: Vec<PosEntry> = seq
            .iter()
            .map(|f| match f {
                FeedItem::Token(t) => PosEntry::TokenId(*t),
                FeedItem::Dense(v) => PosEntry::DenseVector(v.clone()),
            })
            .collect();
        let input = SequenceInput { entries };
        let mask = causal_mask(input.len());
        let (hidden, logits) = forward(self.params, &input, &mask)?;
        let d = self.params.config.d_model;
        let v = self.params.config.vocab;
        let last = input.len() - 1;
        Ok((
            hidden.data()[last * d..(last + 1) * d].to_vec(),
            logits.data()[last * v..(last + 1) * v].to_vec(),
        ))
    }

    /// The fed-back vector is the deterministic expectation E·q (temperature
    /// 1: the stage-2 labels already carry any training temperature), or the
    /// raw hidden state under the hidden-state ablation.
    fn feedback(&self, hidden: &[f64], _logits: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let lt = soft_embed(hidden, self.params, 1.0, self.top_k)?;
        let alpha = lt.alpha.as_slice().to_vec();
        let z = match self.mode {
            LatentMode::SoftEmbedding => lt.z,
            LatentMode::HiddenState => hidden.to_vec(),
        };
        Ok((alpha, z))
    }
}

/// Generate a full reasoning trace for a question.
pub fn generate(
    model: &impl LatentLm,
    id: &str,
    question: &[u32],
    markers: Markers,
    cfg: &DecodeConfig,
) -> Result<ReasoningTrace> {
    cfg.validate()?;
    let mut seq: Vec<FeedItem> = question.iter().map(|&t| FeedItem::Token(t)).collect();
    seq.push(FeedItem::Token(markers.think_open));

    // Leave room for the close marker and at least one explicit step.
    let limit = model.context_limit();
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut truncated = true;
    let mut latent_len = 0;
    for t in 0..cfg.latent_budget {
        if seq.len() + 2 > limit {
            break;
        }
        let (hidden, logits) = model.step(&seq)?;
        let q = softmax_with_temperature(&logits, 1.0)?;
        if stop_rule(&q, cfg.stop_rule, markers.think_close) {
            truncated = false;
            break;
        }
        let (alpha, z) = model.feedback(&hidden, &logits)?;
        steps.push(TraceStep::new(t + 1, StepMode::Latent, alpha));
        seq.push(FeedItem::Dense(z));
        latent_len = t + 1;
    }
    // Collapse: emit the close marker and decode the answer explicitly.
    seq.push(FeedItem::Token(markers.think_close));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut answer_tokens = Vec::new();
    let mut explicit_len = 0;
    for k in 0..cfg.max_explicit_len {
        if seq.len() >= limit {
            break;
        }
        let (_, logits) = model.step(&seq)?;
        let p = softmax_with_temperature(&logits, cfg.temperature)?;
        let tok = if cfg.greedy {
            p.argmax() as u32
        } else {
            sample_nucleus(p.as_slice(), cfg.top_p, &mut rng)
        };
        steps.push(TraceStep::new(latent_len + k + 1, StepMode::Explicit, p.into_vec()));
        explicit_len = k + 1;
        if tok == markers.eos {
            break;
        }
        answer_tokens.push(tok);
        seq.push(FeedItem::Token(tok));
    }
    Ok(ReasoningTrace {
        id: id.to_string(),
        steps,
        answer_tokens,
        answer_text: String::new(),
        latent_len,
        explicit_len,
        truncated,
    })
}

/// Sample from the smallest prefix of the sorted distribution whose mass
/// reaches `top_p`, renormalized. Ties and rounding follow the sorted order
/// (descending probability, ascending id).
pub fn sample_nucleus(probs: &[f64], top_p: f64, rng: &mut ChaCha8Rng) -> u32 {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        mass += probs[i];
        kept = k + 1;
        if mass >= top_p {
            break;
        }
    }
    let draw: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &idx[..kept] {
        acc += probs[i];
        if draw < acc {
            return i as u32;
        }
    }
    idx[kept - 1] as u32
}

// ---- batch evaluation ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Latent reasoning then explicit answer.
    Latent,
    /// Explicit chain-of-thought baseline: the model decodes the chain
    /// itself, then the answer; #L counts the chain tokens.
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub exact_match: f64,
    pub mean_latent_len: f64,
    pub mean_answer_len: f64,
}

/// Explicit-baseline generation: the model produces `[chain, </think>,
/// answer, <eos>]` after the question; the chain token count is recorded as
/// the latent length stand-in.
fn generate_explicit(
    model: &impl LatentLm,
    id: &str,
    question: &[u32],
    markers: Markers,
    cfg: &DecodeConfig,
) -> Result<ReasoningTrace> {
    cfg.validate()?;
    let mut seq: Vec<FeedItem> = question.iter().map(|&t| FeedItem::Token(t)).collect();
    seq.push(FeedItem::Token(markers.think_open));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = Vec::new();
    let mut chain_len = 0usize;
    let mut in_chain = true;
    let mut answer_tokens = Vec::new();
    let mut explicit_len = 0usize;
    let cap = cfg.max_explicit_len + cfg.latent_budget;
    let limit = model.context_limit();
    let mut truncated = true;
    for k in 0..cap {
        if seq.len() >= limit {
            break;
        }
        let (_, logits) = model.step(&seq)?;
        let p = softmax_with_temperature(&logits, cfg.temperature)?;
        let tok = if cfg.greedy {
            p.argmax() as u32
        } else {
            sample_nucleus(p.as_slice(), cfg.top_p, &mut rng)
        };
        steps.push(TraceStep::new(k + 1, StepMode::Explicit, p.into_vec()));
        if in_chain {
            if tok == markers.think_close {
                in_chain = false;
            } else {
                chain_len += 1;
            }
        } else {
            explicit_len += 1;
            if tok == markers.eos {
                truncated = false;
                break;
            }
            answer_tokens.push(tok);
        }
        seq.push(FeedItem::Token(tok));
    }
    Ok(ReasoningTrace {
        id: id.to_string(),
        steps,
        answer_tokens,
        answer_text: String::new(),
        latent_len: chain_len,
        explicit_len,
        truncated,
    })
}

/// Evaluate exact-match accuracy, mean latent length (#L) and mean answer
/// length over a test set. Answers are compared as trimmed strings after
/// detokenization.
pub fn batch_eval(
    params: &ModelParams,
    problems: &[Problem],
    tok: &Tokenizer,
    cfg: &DecodeConfig,
    mode: EvalMode,
) -> Result<(EvalSummary, Vec<ReasoningTrace>)> {
    if problems.is_empty() {
        return Err(Error::invalid("test set must be nonempty"));
    }
    let model = LatentModel { params, top_k: cfg.top_k, mode: cfg.latent_mode };
    let markers = tok.markers();
    let traces: Vec<Result<ReasoningTrace>> = par_map(problems, |p| {
        let question = tok.tokenize(&p.question)?;
        let mut cfg_i = cfg.clone();
        cfg_i.seed = cfg.seed ^ fnv_str(&p.id);
        let mut trace = match mode {
            EvalMode::Latent => generate(&model, &p.id, &question, markers, &cfg_i)?,
            EvalMode::Explicit => generate_explicit(&model, &p.id, &question, markers, &cfg_i)?,
        };
        trace.answer_text = tok.detokenize(&trace.answer_tokens)?.trim().to_string();
        Ok(trace)
    });
    let traces: Vec<ReasoningTrace> = traces.into_iter().collect::<Result<_>>()?;
    let n = traces.len();
    let hits = traces
        .iter()
        .zip(problems)
        .filter(|(t, p)| t.answer_text == p.answer.trim())
        .count();
    let summary = EvalSummary {
        n,
        exact_match: hits as f64 / n as f64,
        mean_latent_len: traces.iter().map(|t| t.latent_len as f64).sum::<f64>() / n as f64,
        mean_answer_len: traces.iter().map(|t| t.answer_tokens.len() as f64).sum::<f64>()
            / n as f64,
    };
    Ok((summary, traces))
}

fn fnv_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Mean ± half-width of the 95% confidence interval over repeated runs
/// (Student's t for small samples).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci_half_width: f64,
    pub values: Vec<f64>,
}

pub fn mean_ci(values: &[f64]) -> MeanCi {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return MeanCi { mean, ci_half_width: 0.0, values: values.to_vec() };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let t = T_CRIT_975.get(n - 2).copied().unwrap_or(1.96);
    MeanCi { mean, ci_half_width: t * (var / n as f64).sqrt(), values: values.to_vec() }
}

/// Two-sided 97.5% Student-t critical values for df = 1..=30.
const T_CRIT_975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
    2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
    2.052, 2.048, 2.045, 2.042,
];

/// Repeat an evaluation over several decode seeds; reports per-seed
/// summaries plus mean ± 95% CI for exact match and #L.
pub fn eval_multi_seed(
    params: &ModelParams,
    problems: &[Problem],
    tok: &Tokenizer,
    cfg: &DecodeConfig,
    mode: EvalMode,
    seeds: &[u64],
) -> Result<(Vec<EvalSummary>, MeanCi, MeanCi)> {
    let mut summaries = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let (summary, _) = batch_eval(params, problems, tok, &c, mode)?;
        summaries.push(summary);
    }
    let em: Vec<f64> = summaries.iter().map(|s| s.exact_match).collect();
    let ll: Vec<f64> = summaries.iter().map(|s| s.mean_latent_len).collect();
    Ok((summaries, mean_ci(&em), mean_ci(&ll)))
}

// ---- trace files -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceHeader {
    r#type: String,
    config: DecodeConfig,
    checkpoint: String,
    vocab: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceStepLine {
    r#type: String,
    id: String,
    #[serde(flatten)]
    step: TraceStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceResultLine {
    r#type: String,
    id: String,
    answer: String,
    latent_len: usize,
    explicit_len: usize,
    truncated: bool,
}

/// Write traces as JSON Lines: a header with the decode config and
/// checkpoint fingerprint, then one record per step plus a result record
/// per example.
pub fn write_traces(
    path: &Path,
    cfg: &DecodeConfig,
    checkpoint: &str,
    vocab: usize,
    traces: &[ReasoningTrace],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header =
        TraceHeader { r#type: "header".into(), config: cfg.clone(), checkpoint: checkpoint.into(), vocab };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in traces {
        for s in &t.steps {
            let line =
                TraceStepLine { r#type: "step".into(), id: t.id.clone(), step: s.clone() };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        let line = TraceResultLine {
            r#type: "result".into(),
            id: t.id.clone(),
            answer: t.answer_text.clone(),
            latent_len: t.latent_len,
            explicit_len: t.explicit_len,
            truncated: t.truncated,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace file back into per-example traces (vocab from the header).
pub fn read_traces(path: &Path) -> Result<(usize, Vec<ReasoningTrace>)> {
    let r = BufReader::new(File::open(path)?);
    let mut vocab = 0usize;
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, ReasoningTrace> =
        std::collections::HashMap::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        match v["type"].as_str() {
            Some("header") => {
                vocab = v["vocab"].as_u64().unwrap_or(0) as usize;
            }
            Some("step") => {
                let s: TraceStepLine = serde_json::from_str(&line)?;
                let e = by_id.entry(s.id.clone()).or_insert_with(|| {
                    order.push(s.id.clone());
                    ReasoningTrace {
                        id: s.id.clone(),
                        steps: Vec::new(),
                        answer_tokens: Vec::new(),
                        answer_text: String::new(),
                        latent_len: 0,
                        explicit_len: 0,
                        truncated: false,
                    }
                });
                e.steps.push(s.step);
            }
            Some("result") => {
                let rl: TraceResultLine = serde_json::from_str(&line)?;
                let e = by_id.entry(rl.id.clone()).or_insert_with(|| {
                    order.push(rl.id.clone());
                    ReasoningTrace {
                        id: rl.id.clone(),
                        steps: Vec::new(),
                        answer_tokens: Vec::new(),
                        answer_text: String::new(),
                        latent_len: 0,
                        explicit_len: 0,
                        truncated: false,
                    }
                });
                e.answer_text = rl.answer;
                e.latent_len = rl.latent_len;
                e.explicit_len = rl.explicit_len;
                e.truncated = rl.truncated;
            }
            _ => return Err(Error::Malformed(format!("unknown trace record: {line}"))),
        }
    }
    let traces = order.into_iter().map(|id| by_id.remove(&id).expect("present")).collect();
    Ok((vocab, traces))
}
