//! The three training stages with checkpointing and deterministic resume.
//!
//! Stage 0 is an explicit chain-of-thought baseline (next-token training on
//! the full chain). Stage 1 generates latent tokens: an encoder copy of the
//! base model reads the chain under the induction mask, its slot states are
//! projected to soft embeddings, and a masked decoder must reconstruct each
//! chain suffix from them; encoder and decoder alternate in an EM-style
//! schedule before a joint phase. Stage 2 discards the encoder and trains
//! the decoder to produce the cached latent tokens autonomously (KL on
//! latent slots, CE on explicit slots).
//!
//! The vocabulary embedding is frozen from stage 1 on; everything mixes
//! through it, so it has to stay put.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::{self, Dtype};
use crate::error::{Error, Result};
use crate::latent::{
    soft_embed_on_tape, stage1_sup_loss_on_tape, stage2_auto_loss_on_tape, LatentMode,
    SlotAssignment,
};
use crate::model::{forward_bound, BindMode, ModelConfig, ModelParams, TapeInput};
use crate::num::prob::ProbVector;
use crate::num::tape::{Tape, Var};
use crate::par::par_map;
use crate::segmask::{causal_mask, mask_ablation_variant, stage2_layout, AttentionMask, Role, SegmentedExample};
use crate::synthdata::{Problem, Tokenizer};

// ---- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Compression ratio: explicit chain tokens summarized per latent token.
    pub r: usize,
    /// Weight of the KL term on latent slots.
    pub lambda: f64,
    /// Weight of the CE term on explicit slots.
    pub beta: f64,
    pub lr_cot: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cot_steps: usize,
    pub phase_a_steps: usize,
    pub phase_b_steps: usize,
    pub phase_c_steps: usize,
    pub stage2_steps: usize,
    pub seed: u64,
    /// Temperature applied when projecting slot states onto the simplex.
    pub alpha_temperature: f64,
    /// Optional top-k pruning of α (renormalized); None keeps the full mix.
    pub top_k: Option<usize>,
    /// Conditioning steps sampled per example per stage-1 update;
    /// 0 evaluates the full double sum every step.
    pub stage1_passes: usize,
    /// Ablation: feed raw hidden states instead of soft embeddings.
    pub hidden_state: bool,
    /// Ablation: encoder uses plain causal attention.
    pub no_ltim: bool,
    /// Ablation: drop suffix supervision; only the answer is decoded from
    /// the latent tokens in stage 1.
    pub no_ltsum: bool,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r: 2,
            lambda: 1.0,
            beta: 1.0,
            lr_cot: 1e-3,
            lr_stage1: 7e-4,
            lr_stage2: 5e-4,
            weight_decay: 0.01,
            batch_size: 32,
            cot_steps: 400,
            phase_a_steps: 120,
            phase_b_steps: 120,
            phase_c_steps: 240,
            stage2_steps: 400,
            seed: 0,
            alpha_temperature: 1.0,
            top_k: None,
            stage1_passes: 2,
            hidden_state: false,
            no_ltim: false,
            no_ltsum: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::invalid("compression ratio must be >= 1"));
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.alpha_temperature > 0.0) {
            return Err(Error::invalid("alpha temperature must be positive"));
        }
        Ok(())
    }

    pub fn latent_mode(&self) -> LatentMode {
        if self.hidden_state {
            LatentMode::HiddenState
        } else {
            LatentMode::SoftEmbedding
        }
    }
}

/// EM schedule phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    EncoderOnly,
    DecoderOnly,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::EncoderOnly => "encoder",
            Phase::DecoderOnly => "decoder",
            Phase::Joint => "joint",
        }
    }
}

/// Alternating-schedule state: which component trains at a given step.
#[derive(Debug, Clone, Copy)]
pub struct EmState {
    pub phase: Phase,
    pub step: usize,
}

impl EmState {
    /// Phase for a global stage-1 step under the configured budgets.
    pub fn at(cfg: &TrainConfig, step: usize) -> EmState {
        let phase = if step < cfg.phase_a_steps {
            Phase::EncoderOnly
        } else if step < cfg.phase_a_steps + cfg.phase_b_steps {
            Phase::DecoderOnly
        } else {
            Phase::Joint
        };
        EmState { phase, step }
    }
}

/// FNV-1a over parameter bits; used by the frozen-phase immutability checks.
pub fn params_checksum(params: &ModelParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, _, t) in params.tensors() {
        for v in t.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}

// ---- optimizer --------------------------------------------------------------

/// Adam with decoupled weight decay and bias correction. Deterministic:
/// no internal randomness, fixed iteration order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Steps skipped because a gradient was non-finite.
    pub anomaly_count: u64,
}

impl AdamW {
    pub fn new(sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            anomaly_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i] = None` freezes tensor i for this step
    /// (no update, no decay, moments untouched). Returns false and skips
    /// the whole step when any gradient entry is non-finite.
    pub fn apply(&mut self, tensors: &mut [&mut Vec<f64>], grads: &[Option<Vec<f64>>]) -> bool {
        assert_eq!(tensors.len(), grads.len(), "optimizer arity mismatch");
        for g in grads.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                self.anomaly_count += 1;
                return false;
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let theta = &mut *tensors[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * theta[j]);
            }
        }
        true
    }

    fn moment_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("m.{i}"), vec![m.len()], m.as_slice()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("v.{i}"), vec![v.len()], v.as_slice()));
        }
        out
    }

    fn restore_moments(
        &mut self,
        mut take: impl FnMut(&str) -> Result<Vec<f64>>,
        step: u64,
        anomalies: u64,
    ) -> Result<()> {
        for (i, m) in self.m.iter_mut().enumerate() {
            *m = take(&format!("m.{i}"))?;
        }
        for (i, v) in self.v.iter_mut().enumerate() {
            *v = take(&format!("v.{i}"))?;
        }
        self.step = step;
        self.anomaly_count = anomalies;
        Ok(())
    }
}

/// Step the optimizer over a model's canonical tensor list.
fn apply_to_model(opt: &mut AdamW, params: &mut ModelParams, grads: &[Option<Vec<f64>>]) -> bool {
    let names = params.tensor_names();
    // Collect mutable references in canonical order.
    let mut ptrs: Vec<*mut Vec<f64>> = Vec::with_capacity(names.len());
    for name in &names {
        ptrs.push(params.tensor_mut(name).expect("canonical name") as *mut Vec<f64>);
    }
    // Names are distinct tensors, so the pointers do not alias.
    let mut refs: Vec<&mut Vec<f64>> = ptrs.into_iter().map(|p| unsafe { &mut *p }).collect();
    opt.apply(&mut refs[..], grads)
}

// ---- run directory ----------------------------------------------------------

/// Appends `step,phase,loss,kl,ce` rows to `metrics.csv` under the run dir.
pub struct TrainLogger {
    writer: Option<BufWriter<File>>,
}

impl TrainLogger {
    pub fn new(run_dir: Option<&Path>) -> Result<Self> {
        let writer = match run_dir {
            None => None,
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("metrics.csv");
                let fresh = !path.exists();
                let mut w =
                    BufWriter::new(File::options().create(true).append(true).open(&path)?);
                if fresh {
                    writeln!(w, "step,phase,loss,kl,ce")?;
                }
                Some(w)
            }
        };
        Ok(TrainLogger { writer })
    }

    pub fn log(&mut self, step: usize, phase: &str, loss: f64, kl: Option<f64>, ce: Option<f64>) {
        if let Some(w) = self.writer.as_mut() {
            let kl = kl.map(|v| format!("{v:.9}")).unwrap_or_default();
            let ce = ce.map(|v| format!("{v:.9}")).unwrap_or_default();
            let _ = writeln!(w, "{step},{phase},{loss:.9},{kl},{ce}");
            let _ = w.flush();
        }
    }
}

// ---- batching ----------------------------------------------------------------

/// Deterministic example indices for a global step: shuffled epochs, the
/// last batch of an epoch may be short.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let bpe = n.div_ceil(batch);
    let epoch = step / bpe;
    let j = step % bpe;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37)));
    perm[(j * batch)..(((j + 1) * batch).min(n))].to_vec()
}

/// Order-preserving mean of per-example gradients (deterministic reduction).
fn reduce_grads(per_example: Vec<(f64, Vec<Option<Vec<f64>>>)>) -> (f64, Vec<Option<Vec<f64>>>) {
    let scale = 1.0 / per_example.len() as f64;
    let mut iter = per_example.into_iter();
    let (first_loss, mut acc) = iter.next().expect("nonempty batch");
    let mut loss = first_loss;
    for (l, grads) in iter {
        loss += l;
        for (a, g) in acc.iter_mut().zip(grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        *x += *y;
                    }
                }
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    for a in acc.iter_mut().flatten() {
        for x in a.iter_mut() {
            *x *= scale;
        }
    }
    (loss * scale, acc)
}

// ---- stage items ---------------------------------------------------------------

/// Tokenized explicit-chain training sequence.
#[derive(Debug, Clone)]
pub struct CotItem {
    pub id: String,
    /// `[Q.., <think>, chain.., </think>, answer..]`
    pub tokens: Vec<u32>,
    pub question_len: usize,
    pub eos: u32,
}

pub fn build_cot_item(p: &Problem, tok: &Tokenizer) -> Result<CotItem> {
    let mut tokens = tok.tokenize(&p.question)?;
    let question_len = tokens.len();
    tokens.push(tok.think_open());
    tokens.extend(tok.tokenize(&p.chain)?);
    tokens.push(tok.think_close());
    tokens.extend(tok.tokenize(&p.answer)?);
    Ok(CotItem { id: p.id.clone(), tokens, question_len, eos: tok.eos() })
}

/// Next-token supervision from the <think> position onward; question
/// positions carry no loss. The final answer token predicts end-of-sequence.
fn cot_items_for(item: &CotItem) -> Vec<(usize, usize, f64)> {
    let l = item.tokens.len();
    let n_terms = l - item.question_len;
    let w = 1.0 / n_terms as f64;
    let mut out = Vec::with_capacity(n_terms);
    for p in item.question_len..l {
        let target = if p + 1 < l { item.tokens[p + 1] } else { item.eos };
        out.push((p, target as usize, w));
    }
    out
}

/// Mean next-token NLL and parameter gradients for one explicit example.
pub fn cot_loss_and_grads(
    params: &ModelParams,
    item: &CotItem,
    want_grads: bool,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = if want_grads { Tape::new() } else { Tape::new_inference() };
    let bound = params.bind(
        &mut tape,
        if want_grads {
            BindMode::Trainable { freeze_embeddings: false }
        } else {
            BindMode::Frozen
        },
    );
    let inputs: Vec<TapeInput> = item.tokens.iter().map(|&t| TapeInput::Token(t)).collect();
    let mask = causal_mask(inputs.len());
    let out = forward_bound(&mut tape, &bound, &inputs, &mask)?;
    let loss = tape.cross_entropy_terms(out.logits, &cot_items_for(item));
    let value = tape.scalar(loss);
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    let mut gs = tape.backward(loss);
    let grads = ModelParams::grad_vars(&bound).into_iter().map(|v| gs.take(v)).collect();
    Ok((value, grads))
}

/// Segmented example prepared for stage 1.
#[derive(Debug, Clone)]
pub struct Stage1Item {
    pub id: String,
    pub example: SegmentedExample,
    pub enc_tokens: Vec<u32>,
    pub enc_mask: AttentionMask,
    pub slot_positions: Vec<usize>,
}

impl Stage1Item {
    pub fn from_example(id: String, example: SegmentedExample, cfg: &TrainConfig) -> Result<Self> {
        let layout = example.encoder_layout();
        let enc_mask = if cfg.no_ltim {
            mask_ablation_variant(&layout)
        } else {
            crate::segmask::build_ltim(&layout)?
        };
        let slot_positions = layout.positions(|r| matches!(r, Role::LatentSlot { .. }));
        let enc_tokens = example.encoder_tokens();
        Ok(Stage1Item { id, example, enc_tokens, enc_mask, slot_positions })
    }
}

pub fn build_stage1_item(p: &Problem, tok: &Tokenizer, cfg: &TrainConfig) -> Result<Stage1Item> {
    let question = tok.tokenize(&p.question)?;
    let chain = tok.tokenize(&p.chain)?;
    let answer = tok.tokenize(&p.answer)?;
    let example = SegmentedExample::new(question, &chain, answer, tok.markers(), cfg.r)?;
    Stage1Item::from_example(p.id.clone(), example, cfg)
}

/// Encoder pass producing the latent vectors (soft embeddings or, under the
/// ablation, raw hidden states) plus the α vars used as stage-2 labels.
fn encode_latents(
    tape: &mut Tape,
    enc_bound: &crate::model::BoundModel,
    item: &Stage1Item,
    cfg: &TrainConfig,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let inputs: Vec<TapeInput> = item.enc_tokens.iter().map(|&t| TapeInput::Token(t)).collect();
    let out = forward_bound(tape, enc_bound, &inputs, &item.enc_mask)?;
    let mut zs = Vec::with_capacity(item.slot_positions.len());
    let mut alphas = Vec::with_capacity(item.slot_positions.len());
    for &pos in &item.slot_positions {
        let h = tape.gather_rows(out.hidden, &[pos]);
        let (alpha, z) = soft_embed_on_tape(tape, enc_bound, h, cfg.alpha_temperature, cfg.top_k);
        alphas.push(alpha);
        zs.push(match cfg.latent_mode() {
            LatentMode::SoftEmbedding => z,
            LatentMode::HiddenState => h,
        });
    }
    Ok((zs, alphas))
}

/// Stage-1 loss for one example on a fresh tape.
///
/// `passes` selects the conditioning steps (empty = all N). Under the
/// no-suffix-supervision ablation the example decodes only `</think>` and
/// the answer from the latent tokens through a plain causal mask.
pub fn stage1_example_loss(
    encoder: &ModelParams,
    decoder: &ModelParams,
    item: &Stage1Item,
    cfg: &TrainConfig,
    passes: &[usize],
    mode: (BindMode, BindMode),
) -> Result<(f64, Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>)> {
    let want_grads =
        !matches!(mode, (BindMode::Frozen, BindMode::Frozen));
    let mut tape = if want_grads { Tape::new() } else { Tape::new_inference() };
    let enc_bound = encoder.bind(&mut tape, mode.0);
    let dec_bound = decoder.bind(&mut tape, mode.1);
    let (zs, _alphas) = encode_latents(&mut tape, &enc_bound, item, cfg)?;

    let loss = if cfg.no_ltsum {
        // [Q, <think>, z_1..z_N, </think>, answer..] under causal attention;
        // only the collapse token and the answer are supervised.
        let ex = &item.example;
        let n = ex.n_segments();
        let layout = stage2_layout(ex.question.len(), n, ex.answer.len());
        let mut inputs: Vec<TapeInput> = Vec::with_capacity(layout.len());
        for pos in 0..layout.len() {
            inputs.push(match layout.role(pos) {
                Role::Question => TapeInput::Token(ex.question[pos]),
                Role::ThinkOpen => TapeInput::Token(ex.markers.think_open),
                Role::LatentSlot { seg } => TapeInput::Dense(zs[seg - 1]),
                Role::ThinkClose => TapeInput::Token(ex.markers.think_close),
                Role::Answer { off } => TapeInput::Token(ex.answer[off]),
                Role::Explicit { .. } => unreachable!("stage-2 layout has no explicit segments"),
            });
        }
        let mask = causal_mask(layout.len());
        let out = forward_bound(&mut tape, &dec_bound, &inputs, &mask)?;
        let close_pos = ex.question.len() + 1 + n;
        // (predicting position, target token): z_N predicts </think>, then
        // the answer autoregressively.
        let mut targets: Vec<(usize, usize)> =
            vec![(close_pos - 1, ex.markers.think_close as usize)];
        for (off, &a) in ex.answer.iter().enumerate() {
            targets.push((close_pos + off, a as usize));
        }
        let w = 1.0 / targets.len() as f64;
        let items: Vec<(usize, usize, f64)> =
            targets.into_iter().map(|(p, t)| (p, t, w)).collect();
        tape.cross_entropy_terms(out.logits, &items)
    } else {
        let all: Vec<usize>;
        let passes = if passes.is_empty() {
            all = (1..=item.example.n_segments()).collect();
            &all[..]
        } else {
            passes
        };
        stage1_sup_loss_on_tape(&mut tape, &dec_bound, &item.example, &zs, passes)?
    };

    let value = tape.scalar(loss);
    if !want_grads {
        return Ok((value, Vec::new(), Vec::new()));
    }
    let mut gs = tape.backward(loss);
    let enc_grads = ModelParams::grad_vars(&enc_bound).into_iter().map(|v| gs.take(v)).collect();
    let dec_grads = ModelParams::grad_vars(&dec_bound).into_iter().map(|v| gs.take(v)).collect();
    Ok((value, enc_grads, dec_grads))
}

/// Exact stage-1 objective (all conditioning steps) on a sample of items.
pub fn eval_stage1_loss(
    encoder: &ModelParams,
    decoder: &ModelParams,
    items: &[Stage1Item],
    cfg: &TrainConfig,
) -> Result<f64> {
    let losses = par_map(items, |item| {
        stage1_example_loss(encoder, decoder, item, cfg, &[], (BindMode::Frozen, BindMode::Frozen))
            .map(|(l, _, _)| l)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / items.len() as f64)
}

/// Cached stage-2 labels for one example: the per-slot α vectors (plus the
/// raw slot hidden states under the hidden-state ablation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentLabels {
    pub id: String,
    pub alphas: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hiddens: Option<Vec<Vec<f64>>>,
}

pub fn write_labels(path: &Path, labels: &[LatentLabels]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LatentLabels>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Extract final latent labels for every item with the trained encoder.
pub fn extract_labels(
    encoder: &ModelParams,
    items: &[Stage1Item],
    cfg: &TrainConfig,
) -> Result<Vec<LatentLabels>> {
    let results = par_map(items, |item| -> Result<LatentLabels> {
        let mut tape = Tape::new_inference();
        let bound = encoder.bind(&mut tape, BindMode::Frozen);
        let (zs, alphas) = encode_latents(&mut tape, &bound, item, cfg)?;
        let alphas: Vec<Vec<f64>> =
            alphas.iter().map(|&a| tape.value(a).to_vec()).collect();
        let hiddens = match cfg.latent_mode() {
            LatentMode::SoftEmbedding => None,
            LatentMode::HiddenState => {
                Some(zs.iter().map(|&z| tape.value(z).to_vec()).collect())
            }
        };
        Ok(LatentLabels { id: item.id.clone(), alphas, hiddens })
    });
    results.into_iter().collect()
}

/// Stage-2 training sequence with teacher latent inputs and slot labels.
#[derive(Debug, Clone)]
pub struct Stage2Item {
    pub id: String,
    /// Token at each position; None marks a latent slot.
    pub tokens: Vec<Option<u32>>,
    /// Teacher vectors fed at the latent slots.
    pub zs: Vec<Vec<f64>>,
    pub assignment: SlotAssignment,
    pub answer_text: String,
}

/// Assemble the stage-2 sequence `[Q, <think>, z_1..z_N, </think>, answer]`.
///
/// Supervision follows the standard shift: the position holding z_t is
/// trained toward the label of slot t+1 (KL); z_1 is predicted from the
/// <think> position; the slot before `</think>` and all answer positions
/// are CE-supervised, with the final answer token predicting
/// end-of-sequence.
pub fn build_stage2_item(
    p: &Problem,
    labels: &LatentLabels,
    params: &ModelParams,
    tok: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<Stage2Item> {
    Stage2Item::from_parts(
        p.id.clone(),
        tok.tokenize(&p.question)?,
        tok.tokenize(&p.answer)?,
        p.answer.clone(),
        labels,
        params,
        tok.markers(),
        cfg,
    )
}

impl Stage2Item {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        id: String,
        question: Vec<u32>,
        answer: Vec<u32>,
        answer_text: String,
        labels: &LatentLabels,
        params: &ModelParams,
        markers: crate::segmask::Markers,
        cfg: &TrainConfig,
    ) -> Result<Stage2Item> {
        let n = labels.alphas.len();
        if n == 0 {
            return Err(Error::invalid("example carries no latent labels"));
        }
        if answer.is_empty() {
            return Err(Error::invalid("answer must be nonempty"));
        }
        let q_len = question.len();
        let layout = stage2_layout(q_len, n, answer.len());

        let zs: Vec<Vec<f64>> = match (&labels.hiddens, cfg.latent_mode()) {
            (Some(h), LatentMode::HiddenState) => h.clone(),
            (None, LatentMode::SoftEmbedding) => labels
                .alphas
                .iter()
                .map(|a| {
                    let alpha = ProbVector::new(a.clone())?;
                    Ok(crate::latent::LatentToken::from_alpha(alpha, params)?.z)
                })
                .collect::<Result<_>>()?,
            _ => {
                return Err(Error::invalid(
                    "latent labels do not match the configured latent mode",
                ))
            }
        };

        let mut tokens: Vec<Option<u32>> = Vec::with_capacity(layout.len());
        for pos in 0..layout.len() {
            tokens.push(match layout.role(pos) {
                Role::Question => Some(question[pos]),
                Role::ThinkOpen => Some(markers.think_open),
                Role::LatentSlot { .. } => None,
                Role::ThinkClose => Some(markers.think_close),
                Role::Answer { off } => Some(answer[off]),
                Role::Explicit { .. } => unreachable!(),
            });
        }

        let think_pos = q_len;
        let slot_pos = |t: usize| think_pos + 1 + t; // t in 0..n
        let close_pos = think_pos + 1 + n;

        let mut latent = Vec::with_capacity(n);
        latent.push((think_pos, ProbVector::new(labels.alphas[0].clone())?));
        for t in 1..n {
            latent.push((slot_pos(t - 1), ProbVector::new(labels.alphas[t].clone())?));
        }
        let mut explicit = Vec::with_capacity(2 + answer.len());
        explicit.push((slot_pos(n - 1), markers.think_close));
        explicit.push((close_pos, answer[0]));
        for off in 0..answer.len() {
            let target = if off + 1 < answer.len() { answer[off + 1] } else { markers.eos };
            explicit.push((close_pos + 1 + off, target));
        }

        Ok(Stage2Item {
            id,
            tokens,
            zs,
            assignment: SlotAssignment { latent, explicit },
            answer_text,
        })
    }
}

/// Stage-2 loss (and gradients) for one example on a fresh tape.
pub fn stage2_example_loss(
    params: &ModelParams,
    item: &Stage2Item,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(f64, f64, f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = if want_grads { Tape::new() } else { Tape::new_inference() };
    let bound = params.bind(
        &mut tape,
        if want_grads {
            BindMode::Trainable { freeze_embeddings: true }
        } else {
            BindMode::Frozen
        },
    );
    let mut zi = 0usize;
    let mut inputs: Vec<TapeInput> = Vec::with_capacity(item.tokens.len());
    for t in &item.tokens {
        inputs.push(match t {
            Some(tok) => TapeInput::Token(*tok),
            None => {
                let z = tape.constant(item.zs[zi].clone(), 1, params.config.d_model);
                zi += 1;
                TapeInput::Dense(z)
            }
        });
    }
    let mask = causal_mask(inputs.len());
    let out = forward_bound(&mut tape, &bound, &inputs, &mask)?;
    let kl_only = stage2_auto_loss_on_tape(&mut tape, out.logits, &item.assignment, 1.0, 0.0)?;
    let ce_only = stage2_auto_loss_on_tape(&mut tape, out.logits, &item.assignment, 0.0, 1.0)?;
    let loss =
        tape.weighted_sum(&[(kl_only, cfg.lambda), (ce_only, cfg.beta)]);
    let (value, kl, ce) = (tape.scalar(loss), tape.scalar(kl_only), tape.scalar(ce_only));
    if !want_grads {
        return Ok((value, kl, ce, Vec::new()));
    }
    let mut gs = tape.backward(loss);
    let grads = ModelParams::grad_vars(&bound).into_iter().map(|v| gs.take(v)).collect();
    Ok((value, kl, ce, grads))
}

// ---- train state (checkpoint + resume) --------------------------------------

fn tensor_sizes(params: &ModelParams) -> Vec<usize> {
    params.tensors().iter().map(|(_, _, t)| t.len()).collect()
}

fn save_train_state(
    dir: &Path,
    stage: &str,
    step: usize,
    models: &[(&str, &ModelParams)],
    opts: &[(&str, &AdamW)],
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (tag, params) in models {
        for (name, shape, data) in params.tensors() {
            tensors.push((format!("{tag}.{name}"), shape, data.to_vec()));
        }
    }
    for (tag, opt) in opts {
        for (name, shape, data) in opt.moment_tensors() {
            tensors.push((format!("{tag}.{name}"), shape, data.to_vec()));
        }
    }
    let refs: Vec<(String, Vec<usize>, &[f64])> =
        tensors.iter().map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice())).collect();
    let extra = serde_json::json!({
        "kind": "train-state",
        "stage": stage,
        "step": step,
        "opt": opts
            .iter()
            .map(|(tag, o)| {
                (tag.to_string(), serde_json::json!({
                    "step": o.step_count(),
                    "anomalies": o.anomaly_count,
                    "lr": o.lr,
                    "weight_decay": o.weight_decay,
                }))
            })
            .collect::<serde_json::Map<String, serde_json::Value>>(),
    });
    // f64 storage so a resumed run replays the exact trajectory.
    ckpt::save_named(dir, models[0].1.config, models[0].1.seed, &refs, Dtype::F64, extra)
}

struct LoadedState {
    step: usize,
    tensors: HashMap<String, Vec<f64>>,
    extra: serde_json::Value,
    config: ModelConfig,
    seed: u64,
}

fn load_train_state(dir: &Path, stage: &str) -> Result<LoadedState> {
    let (manifest, tensors) = ckpt::load_named(dir)?;
    let extra = manifest.extra.clone();
    if extra["kind"] != "train-state" || extra["stage"] != stage {
        return Err(Error::Malformed(format!(
            "{} does not hold a {stage} train state",
            dir.display()
        )));
    }
    let step = extra["step"]
        .as_u64()
        .ok_or_else(|| Error::Malformed("missing step in train state".into()))? as usize;
    Ok(LoadedState { step, tensors, extra, config: manifest.config, seed: manifest.seed })
}

fn model_from_state(state: &LoadedState, tag: &str) -> Result<ModelParams> {
    ModelParams::from_named_tensors(state.config, state.seed, |name, _| {
        state
            .tensors
            .get(&format!("{tag}.{name}"))
            .cloned()
            .ok_or_else(|| Error::Malformed(format!("state missing {tag}.{name}")))
    })
}

fn opt_from_state(state: &LoadedState, tag: &str, params: &ModelParams) -> Result<AdamW> {
    let meta = &state.extra["opt"][tag];
    let lr = meta["lr"].as_f64().ok_or_else(|| Error::Malformed("missing lr".into()))?;
    let wd = meta["weight_decay"].as_f64().unwrap_or(0.0);
    let step = meta["step"].as_u64().unwrap_or(0);
    let anomalies = meta["anomalies"].as_u64().unwrap_or(0);
    let mut opt = AdamW::new(&tensor_sizes(params), lr, wd);
    opt.restore_moments(
        |name| {
            state
                .tensors
                .get(&format!("{tag}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Malformed(format!("state missing {tag}.{name}")))
        },
        step,
        anomalies,
    )?;
    Ok(opt)
}

// ---- stage drivers -----------------------------------------------------------

pub struct TrainOutcome {
    pub params: ModelParams,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Explicit chain-of-thought baseline: causal next-token training on
/// `[Q, <think>, T, </think>, answer]` with the loss masked on the question.
pub fn train_cot_sft(
    cfg: &TrainConfig,
    problems: &[Problem],
    tok: &Tokenizer,
    init: ModelParams,
    run_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if problems.is_empty() {
        return Err(Error::invalid("dataset must be nonempty"));
    }
    let items: Vec<CotItem> =
        problems.iter().map(|p| build_cot_item(p, tok)).collect::<Result<_>>()?;

    let (mut params, mut opt, start_step) = match resume_from {
        None => {
            let opt = AdamW::new(&tensor_sizes(&init), cfg.lr_cot, cfg.weight_decay);
            (init, opt, 0)
        }
        Some(dir) => {
            let state = load_train_state(dir, "cot")?;
            let params = model_from_state(&state, "model")?;
            let opt = opt_from_state(&state, "model", &params)?;
            (params, opt, state.step)
        }
    };

    let mut logger = TrainLogger::new(run_dir)?;
    let mut losses = Vec::new();
    let mut last = f64::NAN;
    for step in start_step..cfg.cot_steps {
        let idx = batch_indices(items.len(), cfg.batch_size, step, cfg.seed);
        let batch: Vec<&CotItem> = idx.iter().map(|&i| &items[i]).collect();
        let per: Vec<(f64, Vec<Option<Vec<f64>>>)> = par_map(&batch, |item| {
            cot_loss_and_grads(&params, item, true).expect("forward failed")
        });
        let (loss, grads) = reduce_grads(per);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("explicit training loss {loss} at step {step}")));
        }
        apply_to_model(&mut opt, &mut params, &grads);
        logger.log(step, "cot", loss, None, None);
        losses.push(loss);
        last = loss;
        if let (Some(dir), true) = (run_dir, cfg.checkpoint_every > 0) {
            if (step + 1) % cfg.checkpoint_every == 0 {
                save_train_state(
                    &dir.join(format!("state-{:06}", step + 1)),
                    "cot",
                    step + 1,
                    &[("model", &params)],
                    &[("model", &opt)],
                )?;
            }
        }
    }
    if let Some(dir) = run_dir {
        ckpt::save_model(&dir.join("model"), &params, Dtype::F32)?;
    }
    Ok(TrainOutcome { params, final_loss: last, losses })
}

/// Save a mid-run explicit-stage state by hand (used by resume tests).
pub fn save_cot_state(
    dir: &Path,
    step: usize,
    params: &ModelParams,
    opt: &AdamW,
) -> Result<()> {
    save_train_state(dir, "cot", step, &[("model", params)], &[("model", opt)])
}

pub struct Stage1Outcome {
    pub encoder: ModelParams,
    pub decoder: ModelParams,
    pub labels: Vec<LatentLabels>,
    /// Exact objective on a fixed evaluation sample after phase A and at the
    /// end of the joint phase.
    pub loss_after_phase_a: f64,
    pub loss_after_joint: f64,
}

/// Latent-token generation with the alternating schedule: encoder-only,
/// then decoder-only, then joint, all minimizing the supervised decoding
/// objective. The encoder starts as a copy of the explicit baseline.
pub fn train_stage1(
    cfg: &TrainConfig,
    problems: &[Problem],
    tok: &Tokenizer,
    init: &ModelParams,
    run_dir: Option<&Path>,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let total = cfg.phase_a_steps + cfg.phase_b_steps + cfg.phase_c_steps;
    if total == 0 {
        return Err(Error::invalid("all stage-1 phase budgets are zero"));
    }
    if problems.is_empty() {
        return Err(Error::invalid("dataset must be nonempty"));
    }
    let items: Vec<Stage1Item> =
        problems.iter().map(|p| build_stage1_item(p, tok, cfg)).collect::<Result<_>>()?;

    let mut encoder = init.clone();
    let mut decoder = init.clone();
    let mut opt_enc = AdamW::new(&tensor_sizes(&encoder), cfg.lr_stage1, cfg.weight_decay);
    let mut opt_dec = AdamW::new(&tensor_sizes(&decoder), cfg.lr_stage1, cfg.weight_decay);

    let eval_sample: Vec<Stage1Item> =
        items.iter().take(64.min(items.len())).cloned().collect();

    let mut logger = TrainLogger::new(run_dir)?;
    let mut loss_after_phase_a = f64::NAN;
    for step in 0..total {
        let em = EmState::at(cfg, step);
        let (enc_mode, dec_mode) = match em.phase {
            Phase::EncoderOnly => {
                (BindMode::Trainable { freeze_embeddings: true }, BindMode::Frozen)
            }
            Phase::DecoderOnly => {
                (BindMode::Frozen, BindMode::Trainable { freeze_embeddings: true })
            }
            Phase::Joint => (
                BindMode::Trainable { freeze_embeddings: true },
                BindMode::Trainable { freeze_embeddings: true },
            ),
        };
        let idx = batch_indices(items.len(), cfg.batch_size, step, cfg.seed ^ 0xA11CE);
        let batch: Vec<(usize, &Stage1Item)> = idx.iter().map(|&i| (i, &items[i])).collect();
        let per: Vec<(f64, Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>)> =
            par_map(&batch, |(i, item)| {
                let passes = sample_passes(item.example.n_segments(), cfg, step, *i);
                stage1_example_loss(&encoder, &decoder, item, cfg, &passes, (enc_mode, dec_mode))
                    .expect("stage-1 forward failed")
            });
        // Deterministic in-order reduction over both gradient sets.
        let scale = 1.0 / per.len() as f64;
        let mut loss = 0.0;
        let mut enc_acc: Vec<Option<Vec<f64>>> = Vec::new();
        let mut dec_acc: Vec<Option<Vec<f64>>> = Vec::new();
        for (l, eg, dg) in per {
            loss += l;
            accumulate(&mut enc_acc, eg);
            accumulate(&mut dec_acc, dg);
        }
        loss *= scale;
        scale_grads(&mut enc_acc, scale);
        scale_grads(&mut dec_acc, scale);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("stage-1 loss {loss} at step {step}")));
        }
        if !enc_acc.is_empty() {
            apply_to_model(&mut opt_enc, &mut encoder, &enc_acc);
        }
        if !dec_acc.is_empty() {
            apply_to_model(&mut opt_dec, &mut decoder, &dec_acc);
        }
        logger.log(step, em.phase.name(), loss, None, None);

        if step + 1 == cfg.phase_a_steps {
            loss_after_phase_a = eval_stage1_loss(&encoder, &decoder, &eval_sample, cfg)?;
        }
        if let (Some(dir), true) = (run_dir, cfg.checkpoint_every > 0) {
            if (step + 1) % cfg.checkpoint_every == 0 {
                save_train_state(
                    &dir.join(format!("state-{:06}", step + 1)),
                    "stage1",
                    step + 1,
                    &[("enc", &encoder), ("dec", &decoder)],
                    &[("enc", &opt_enc), ("dec", &opt_dec)],
                )?;
            }
        }
    }
    let loss_after_joint = eval_stage1_loss(&encoder, &decoder, &eval_sample, cfg)?;
    if cfg.phase_a_steps == 0 {
        loss_after_phase_a = loss_after_joint;
    }

    let labels = extract_labels(&encoder, &items, cfg)?;
    if let Some(dir) = run_dir {
        ckpt::save_model(&dir.join("encoder"), &encoder, Dtype::F32)?;
        ckpt::save_model(&dir.join("decoder"), &decoder, Dtype::F32)?;
        write_labels(&dir.join("labels.jsonl"), &labels)?;
    }
    Ok(Stage1Outcome { encoder, decoder, labels, loss_after_phase_a, loss_after_joint })
}

fn sample_passes(n: usize, cfg: &TrainConfig, step: usize, example_idx: usize) -> Vec<usize> {
    if cfg.stage1_passes == 0 || cfg.stage1_passes >= n {
        return (1..=n).collect();
    }
    let mut all: Vec<usize> = (1..=n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9) ^ (example_idx as u64) << 32,
    );
    all.shuffle(&mut rng);
    all.truncate(cfg.stage1_passes);
    all.sort_unstable();
    all
}

fn accumulate(acc: &mut Vec<Option<Vec<f64>>>, grads: Vec<Option<Vec<f64>>>) {
    if grads.is_empty() {
        return;
    }
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    *x += *y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn scale_grads(acc: &mut [Option<Vec<f64>>], scale: f64) {
    for a in acc.iter_mut().flatten() {
        for x in a.iter_mut() {
            *x *= scale;
        }
    }
}

/// Autonomous latent generation: teacher latents as inputs, KL toward the
/// cached α sequence on latent slots, CE on the collapse token and answer.
pub fn train_stage2(
    cfg: &TrainConfig,
    problems: &[Problem],
    labels: &[LatentLabels],
    tok: &Tokenizer,
    init: ModelParams,
    run_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if problems.is_empty() {
        return Err(Error::invalid("dataset must be nonempty"));
    }
    let by_id: HashMap<&str, &LatentLabels> =
        labels.iter().map(|l| (l.id.as_str(), l)).collect();
    let items: Vec<Stage2Item> = problems
        .iter()
        .map(|p| {
            let l = by_id
                .get(p.id.as_str())
                .ok_or_else(|| Error::invalid(format!("missing latent labels for {}", p.id)))?;
            build_stage2_item(p, l, &init, tok, cfg)
        })
        .collect::<Result<_>>()?;

    let (mut params, mut opt, start_step) = match resume_from {
        None => {
            let opt = AdamW::new(&tensor_sizes(&init), cfg.lr_stage2, cfg.weight_decay);
            (init, opt, 0)
        }
        Some(dir) => {
            let state = load_train_state(dir, "stage2")?;
            let params = model_from_state(&state, "model")?;
            let opt = opt_from_state(&state, "model", &params)?;
            (params, opt, state.step)
        }
    };

    let mut logger = TrainLogger::new(run_dir)?;
    let mut losses = Vec::new();
    let mut last = f64::NAN;
    for step in start_step..cfg.stage2_steps {
        let idx = batch_indices(items.len(), cfg.batch_size, step, cfg.seed ^ 0xBEE5);
        let batch: Vec<&Stage2Item> = idx.iter().map(|&i| &items[i]).collect();
        let per: Vec<(f64, f64, f64, Vec<Option<Vec<f64>>>)> = par_map(&batch, |item| {
            stage2_example_loss(&params, item, cfg, true).expect("stage-2 forward failed")
        });
        let scale = 1.0 / per.len() as f64;
        let (mut loss, mut kl, mut ce) = (0.0, 0.0, 0.0);
        let mut acc: Vec<Option<Vec<f64>>> = Vec::new();
        for (l, k, c, g) in per {
            loss += l;
            kl += k;
            ce += c;
            accumulate(&mut acc, g);
        }
        loss *= scale;
        kl *= scale;
        ce *= scale;
        scale_grads(&mut acc, scale);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("stage-2 loss {loss} at step {step}")));
        }
        apply_to_model(&mut opt, &mut params, &acc);
        logger.log(step, "stage2", loss, Some(kl), Some(ce));
        losses.push(loss);
        last = loss;
        if let (Some(dir), true) = (run_dir, cfg.checkpoint_every > 0) {
            if (step + 1) % cfg.checkpoint_every == 0 {
                save_train_state(
                    &dir.join(format!("state-{:06}", step + 1)),
                    "stage2",
                    step + 1,
                    &[("model", &params)],
                    &[("model", &opt)],
                )?;
            }
        }
    }
    if let Some(dir) = run_dir {
        ckpt::save_model(&dir.join("model"), &params, Dtype::F32)?;
    }
    Ok(TrainOutcome { params, final_loss: last, losses })
}

/// Resume an explicit-stage run from a saved state directory.
pub fn resume_cot(
    cfg: &TrainConfig,
    problems: &[Problem],
    tok: &Tokenizer,
    state_dir: &Path,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    // The initial parameters are ignored on resume; pass a placeholder that
    // matches the checkpoint config.
    let state = load_train_state(state_dir, "cot")?;
    let placeholder = model_from_state(&state, "model")?;
    train_cot_sft(cfg, problems, tok, placeholder, run_dir, Some(state_dir))
}
