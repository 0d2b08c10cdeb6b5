//! Decoder-only transformer with a tied input embedding and output head.
//!
//! Per-position input is either a token id or a dense embedding-space
//! vector; the attention mask is supplied by the caller. Dense inputs bypass
//! only the embedding lookup — position embeddings and all downstream
//! processing are identical to token inputs, so vectors on the embedding
//! manifold are treated exactly like tokens.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;
use crate::segmask::AttentionMask;

const INIT_STD: f64 = 0.02;
const RMS_EPS: f64 = 1e-6;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.vocab == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by head count {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        FFN_MULT * self.d_model
    }

    /// Closed-form parameter count:
    /// V·d (embedding, tied with the head)
    /// + max_seq·d (positions)
    /// + n_layers·(4·d² attention + 2·d·f feed-forward + 2·d norm gains)
    /// + d (final norm gain), with f = 4·d.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_width();
        self.vocab * d + self.max_seq * d + self.n_layers * (4 * d * d + 2 * d * f + 2 * d) + d
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub wq: Arc<Vec<f64>>,
    pub wk: Arc<Vec<f64>>,
    pub wv: Arc<Vec<f64>>,
    pub wo: Arc<Vec<f64>>,
    pub w_in: Arc<Vec<f64>>,
    pub w_out: Arc<Vec<f64>>,
    pub attn_gain: Arc<Vec<f64>>,
    pub ffn_gain: Arc<Vec<f64>>,
}

/// Model parameters. The output head is the transpose view of the embedding
/// matrix (weight tying): logits are always computed from the same storage
/// that the embedding lookup reads.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub(crate) tok_embed: Arc<Vec<f64>>, // V×d, row v = e_v
    pub(crate) pos_embed: Arc<Vec<f64>>, // max_seq×d
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) final_gain: Arc<Vec<f64>>, // 1×d
}

/// Deterministic small-scale initialization: N(0, 0.02²) weights, unit norm
/// gains. Bit-identical for equal seeds.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut gauss = |n: usize| -> Arc<Vec<f64>> {
        Arc::new((0..n).map(|_| normal.sample(&mut rng)).collect())
    };
    let d = config.d_model;
    let f = config.ffn_width();
    let tok_embed = gauss(config.vocab * d);
    let pos_embed = gauss(config.max_seq * d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            wq: gauss(d * d),
            wk: gauss(d * d),
            wv: gauss(d * d),
            wo: gauss(d * d),
            w_in: gauss(d * f),
            w_out: gauss(f * d),
            attn_gain: Arc::new(vec![1.0; d]),
            ffn_gain: Arc::new(vec![1.0; d]),
        });
    }
    Ok(ModelParams {
        config,
        seed,
        tok_embed,
        pos_embed,
        layers,
        final_gain: Arc::new(vec![1.0; d]),
    })
}

/// All-zero parameters; useful as a stub that predicts the uniform
/// distribution everywhere.
pub fn zero_params(config: ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let f = config.ffn_width();
    let z = |n: usize| Arc::new(vec![0.0; n]);
    Ok(ModelParams {
        config,
        seed: 0,
        tok_embed: z(config.vocab * d),
        pos_embed: z(config.max_seq * d),
        layers: (0..config.n_layers)
            .map(|_| LayerParams {
                wq: z(d * d),
                wk: z(d * d),
                wv: z(d * d),
                wo: z(d * d),
                w_in: z(d * f),
                w_out: z(f * d),
                attn_gain: Arc::new(vec![1.0; d]),
                ffn_gain: Arc::new(vec![1.0; d]),
            })
            .collect(),
        final_gain: Arc::new(vec![1.0; d]),
    })
}

impl ModelParams {
    /// Canonical (name, shape, storage) listing; update order, checkpoints
    /// and gradient maps all follow this order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &Arc<Vec<f64>>)> {
        let d = self.config.d_model;
        let f = self.config.ffn_width();
        let mut out: Vec<(String, Vec<usize>, &Arc<Vec<f64>>)> = vec![
            ("tok_embed".into(), vec![self.config.vocab, d], &self.tok_embed),
            ("pos_embed".into(), vec![self.config.max_seq, d], &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_gain"), vec![1, d], &l.attn_gain));
            out.push((format!("layers.{i}.wq"), vec![d, d], &l.wq));
            out.push((format!("layers.{i}.wk"), vec![d, d], &l.wk));
            out.push((format!("layers.{i}.wv"), vec![d, d], &l.wv));
            out.push((format!("layers.{i}.wo"), vec![d, d], &l.wo));
            out.push((format!("layers.{i}.ffn_gain"), vec![1, d], &l.ffn_gain));
            out.push((format!("layers.{i}.w_in"), vec![d, f], &l.w_in));
            out.push((format!("layers.{i}.w_out"), vec![f, d], &l.w_out));
        }
        out.push(("final_gain".into(), vec![1, d], &self.final_gain));
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Arc<Vec<f64>>> {
        self.tensors().into_iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    /// Mutable access to one tensor's storage (clones on write if shared).
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let d = self.config.d_model;
        let _ = d;
        let slot: &mut Arc<Vec<f64>> = match name {
            "tok_embed" => &mut self.tok_embed,
            "pos_embed" => &mut self.pos_embed,
            "final_gain" => &mut self.final_gain,
            _ => {
                let mut parts = name.splitn(3, '.');
                if parts.next() != Some("layers") {
                    return None;
                }
                let idx: usize = parts.next()?.parse().ok()?;
                let field = parts.next()?;
                let layer = self.layers.get_mut(idx)?;
                match field {
                    "wq" => &mut layer.wq,
                    "wk" => &mut layer.wk,
                    "wv" => &mut layer.wv,
                    "wo" => &mut layer.wo,
                    "w_in" => &mut layer.w_in,
                    "w_out" => &mut layer.w_out,
                    "attn_gain" => &mut layer.attn_gain,
                    "ffn_gain" => &mut layer.ffn_gain,
                    _ => return None,
                }
            }
        };
        Some(Arc::make_mut(slot))
    }

    /// Rebuild parameters from named tensors (checkpoint loading).
    pub fn from_named_tensors(
        config: ModelConfig,
        seed: u64,
        mut take: impl FnMut(&str, usize) -> Result<Vec<f64>>,
    ) -> Result<ModelParams> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width();
        let mut grab = |name: &str, numel: usize| -> Result<Arc<Vec<f64>>> {
            let data = take(name, numel)?;
            if data.len() != numel {
                return Err(Error::Malformed(format!(
                    "tensor {name} has {} elements, expected {numel}",
                    data.len()
                )));
            }
            Ok(Arc::new(data))
        };
        let tok_embed = grab("tok_embed", config.vocab * d)?;
        let pos_embed = grab("pos_embed", config.max_seq * d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerParams {
                attn_gain: grab(&format!("layers.{i}.attn_gain"), d)?,
                wq: grab(&format!("layers.{i}.wq"), d * d)?,
                wk: grab(&format!("layers.{i}.wk"), d * d)?,
                wv: grab(&format!("layers.{i}.wv"), d * d)?,
                wo: grab(&format!("layers.{i}.wo"), d * d)?,
                ffn_gain: grab(&format!("layers.{i}.ffn_gain"), d)?,
                w_in: grab(&format!("layers.{i}.w_in"), d * f)?,
                w_out: grab(&format!("layers.{i}.w_out"), f * d)?,
            });
        }
        let final_gain = grab("final_gain", d)?;
        Ok(ModelParams { config, seed, tok_embed, pos_embed, layers, final_gain })
    }

    /// The embedding row of token `v` (also the head row under tying).
    pub fn embedding_row(&self, v: usize) -> &[f64] {
        let d = self.config.d_model;
        &self.tok_embed[v * d..(v + 1) * d]
    }

    pub fn embedding_matrix(&self) -> &Arc<Vec<f64>> {
        &self.tok_embed
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// FNV-1a fingerprint over the config and all tensor bits, used to tag
    /// traces with the checkpoint they came from.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        eat(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        for (_, _, t) in self.tensors() {
            for v in t.iter() {
                eat(&v.to_le_bytes());
            }
        }
        format!("{h:016x}")
    }
}

/// How parameters participate in a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// No gradients recorded for any tensor.
    Frozen,
    /// Gradients for every tensor except, optionally, the vocabulary
    /// embedding (which stays frozen during latent training).
    Trainable { freeze_embeddings: bool },
}

/// Tape handles for one model's parameters.
pub struct BoundModel {
    pub config: ModelConfig,
    pub tok_embed: Var,
    pos_embed: Var,
    layers: Vec<BoundLayer>,
    final_gain: Var,
}

struct BoundLayer {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w_in: Var,
    w_out: Var,
    attn_gain: Var,
    ffn_gain: Var,
}

impl ModelParams {
    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> BoundModel {
        let (train, freeze_embed) = match mode {
            BindMode::Frozen => (false, true),
            BindMode::Trainable { freeze_embeddings } => (true, freeze_embeddings),
        };
        let d = self.config.d_model;
        let f = self.config.ffn_width();
        let tok = tape.param(
            Arc::clone(&self.tok_embed),
            self.config.vocab,
            d,
            train && !freeze_embed,
        );
        let pos = tape.param(Arc::clone(&self.pos_embed), self.config.max_seq, d, train);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: tape.param(Arc::clone(&l.wq), d, d, train),
                wk: tape.param(Arc::clone(&l.wk), d, d, train),
                wv: tape.param(Arc::clone(&l.wv), d, d, train),
                wo: tape.param(Arc::clone(&l.wo), d, d, train),
                w_in: tape.param(Arc::clone(&l.w_in), d, f, train),
                w_out: tape.param(Arc::clone(&l.w_out), f, d, train),
                attn_gain: tape.param(Arc::clone(&l.attn_gain), 1, d, train),
                ffn_gain: tape.param(Arc::clone(&l.ffn_gain), 1, d, train),
            })
            .collect();
        let final_gain = tape.param(Arc::clone(&self.final_gain), 1, d, train);
        BoundModel { config: self.config, tok_embed: tok, pos_embed: pos, layers, final_gain }
    }

    /// Gradient vars in the same order as [`ModelParams::tensors`].
    pub fn grad_vars(bound: &BoundModel) -> Vec<Var> {
        let mut out = vec![bound.tok_embed, bound.pos_embed];
        for l in &bound.layers {
            out.extend([l.attn_gain, l.wq, l.wk, l.wv, l.wo, l.ffn_gain, l.w_in, l.w_out]);
        }
        out.push(bound.final_gain);
        out
    }
}

/// One position of input to the model on a tape: a vocabulary token or an
/// existing tape value (a 1×d dense vector such as a latent token).
#[derive(Debug, Clone, Copy)]
pub enum TapeInput {
    Token(u32),
    Dense(Var),
}

/// Per-position model input at the data level.
#[derive(Debug, Clone)]
pub enum PosEntry {
    TokenId(u32),
    DenseVector(Vec<f64>),
}

/// A sequence of mixed token/dense inputs.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub entries: Vec<PosEntry>,
}

impl SequenceInput {
    pub fn from_tokens(tokens: &[u32]) -> Self {
        SequenceInput { entries: tokens.iter().map(|&t| PosEntry::TokenId(t)).collect() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Final-layer hidden states and tied-head logits.
pub struct ForwardOut {
    pub hidden: Var,
    pub logits: Var,
}

/// Run the transformer over tape inputs under an arbitrary mask.
///
/// `hidden` is the final normalized layer output and `logits[t]` is exactly
/// `Eᵀ·hidden[t]`; blocked positions contribute zero attention weight.
pub fn forward_bound(
    tape: &mut Tape,
    model: &BoundModel,
    inputs: &[TapeInput],
    mask: &AttentionMask,
) -> Result<ForwardOut> {
    let cfg = &model.config;
    let len = inputs.len();
    if len == 0 {
        return Err(Error::invalid("empty input sequence"));
    }
    if len > cfg.max_seq {
        return Err(Error::Capacity(format!("sequence {len} exceeds context {}", cfg.max_seq)));
    }
    if mask.len() != len {
        return Err(Error::invalid(format!(
            "mask length {} does not match input length {len}",
            mask.len()
        )));
    }

    // Embed: consecutive token runs as single gathers, dense rows verbatim.
    let mut parts: Vec<Var> = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    for inp in inputs {
        match *inp {
            TapeInput::Token(t) => {
                if t as usize >= cfg.vocab {
                    return Err(Error::invalid(format!("token id {t} out of vocabulary")));
                }
                run.push(t as usize);
            }
            TapeInput::Dense(v) => {
                if !run.is_empty() {
                    parts.push(tape.gather_rows(model.tok_embed, &run));
                    run.clear();
                }
                let (r, c) = tape.dims(v);
                if (r, c) != (1, cfg.d_model) {
                    return Err(Error::invalid(format!(
                        "dense input must be 1x{}, got {r}x{c}",
                        cfg.d_model
                    )));
                }
                parts.push(v);
            }
        }
    }
    if !run.is_empty() {
        parts.push(tape.gather_rows(model.tok_embed, &run));
    }
    let embedded = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };

    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(model.pos_embed, &positions);
    let mut x = tape.add(embedded, pos);

    for layer in &model.layers {
        let normed = tape.rmsnorm(x, layer.attn_gain, RMS_EPS);
        let q = tape.matmul(normed, layer.wq);
        let k = tape.matmul(normed, layer.wk);
        let v = tape.matmul(normed, layer.wv);
        let ctx = tape.attention(q, k, v, mask.as_slice(), cfg.n_heads);
        let proj = tape.matmul(ctx, layer.wo);
        x = tape.add(x, proj);

        let normed2 = tape.rmsnorm(x, layer.ffn_gain, RMS_EPS);
        let up = tape.matmul(normed2, layer.w_in);
        let act = tape.gelu(up);
        let down = tape.matmul(act, layer.w_out);
        x = tape.add(x, down);
    }

    let hidden = tape.rmsnorm(x, model.final_gain, RMS_EPS);
    let logits = tape.matmul_bt(hidden, model.tok_embed);
    Ok(ForwardOut { hidden, logits })
}

/// Pure inference forward: returns (hidden L×d, logits L×V) tensors.
pub fn forward(
    params: &ModelParams,
    input: &SequenceInput,
    mask: &AttentionMask,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new_inference();
    let bound = params.bind(&mut tape, BindMode::Frozen);
    let inputs: Vec<TapeInput> = input
        .entries
        .iter()
        .map(|e| match e {
            PosEntry::TokenId(t) => TapeInput::Token(*t),
            PosEntry::DenseVector(v) => {
                TapeInput::Dense(tape.constant(v.clone(), 1, params.config.d_model))
            }
        })
        .collect();
    let out = forward_bound(&mut tape, &bound, &inputs, mask)?;
    let len = input.len();
    let hidden = Tensor::new(vec![len, params.config.d_model], tape.value(out.hidden).to_vec())?;
    let logits = Tensor::new(vec![len, params.config.vocab], tape.value(out.logits).to_vec())?;
    Ok((hidden, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmask::causal_mask;

    fn tiny_config() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, vocab: 11, max_seq: 24 }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = init_params(cfg, 7).unwrap();
        let b = init_params(cfg, 7).unwrap();
        for ((_, _, ta), (_, _, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ta.as_slice(), tb.as_slice());
        }
        let c = init_params(cfg, 8).unwrap();
        assert_ne!(a.tok_embed.as_slice(), c.tok_embed.as_slice());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig { n_layers: 2, n_heads: 4, d_model: 64, vocab: 50, max_seq: 32 };
        let params = init_params(cfg, 0).unwrap();
        // Hand count: 50*64 + 32*64 + 2*(4*64*64 + 2*64*256 + 2*64) + 64
        let expect = 50 * 64 + 32 * 64 + 2 * (4 * 64 * 64 + 2 * 64 * 256 + 2 * 64) + 64;
        assert_eq!(cfg.param_count(), expect);
        assert_eq!(params.param_count(), expect);
    }

    #[test]
    fn single_token_forward_shapes() {
        let cfg = tiny_config();
        let params = init_params(cfg, 1).unwrap();
        let input = SequenceInput::from_tokens(&[3]);
        let (hidden, logits) = forward(&params, &input, &causal_mask(1)).unwrap();
        assert_eq!(hidden.shape(), &[1, cfg.d_model]);
        assert_eq!(logits.shape(), &[1, cfg.vocab]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tied_head_is_exact() {
        let cfg = tiny_config();
        let params = init_params(cfg, 2).unwrap();
        let input = SequenceInput::from_tokens(&[1, 2, 3, 4]);
        let (hidden, logits) = forward(&params, &input, &causal_mask(4)).unwrap();
        let d = cfg.d_model;
        for t in 0..4 {
            for v in 0..cfg.vocab {
                let dot: f64 = (0..d)
                    .map(|j| hidden.data()[t * d + j] * params.embedding_row(v)[j])
                    .sum();
                // Same storage, same product; only summation order may differ
                // from the naive loop.
                let got = logits.data()[t * cfg.vocab + v];
                assert!((got - dot).abs() <= 1e-12 * (1.0 + dot.abs()), "{got} vs {dot}");
            }
        }
    }

    #[test]
    fn writing_embedding_changes_head_output() {
        let cfg = tiny_config();
        let mut params = init_params(cfg, 3).unwrap();
        let input = SequenceInput::from_tokens(&[0]);
        let (_, before) = forward(&params, &input, &causal_mask(1)).unwrap();
        // Bump one embedding entry of a token that is not the input, so only
        // the head projection changes.
        params.tensor_mut("tok_embed").unwrap()[5 * cfg.d_model] += 1.0;
        let (_, after) = forward(&params, &input, &causal_mask(1)).unwrap();
        assert_ne!(before.data()[5], after.data()[5]);
    }

    #[test]
    fn prefix_rows_unaffected_by_later_mask_edits() {
        let cfg = tiny_config();
        let params = init_params(cfg, 4).unwrap();
        let input = SequenceInput::from_tokens(&[1, 2, 3, 4, 5]);
        let full = causal_mask(5);
        let mut blocked = full.as_slice().to_vec();
        blocked[3 * 5 + 1] = false; // block 3 -> 1
        let blocked = AttentionMask::new(blocked, 5).unwrap();
        let (ha, la) = forward(&params, &input, &full).unwrap();
        let (hb, lb) = forward(&params, &input, &blocked).unwrap();
        let d = cfg.d_model;
        assert_eq!(&ha.data()[..3 * d], &hb.data()[..3 * d], "prefix hidden states");
        assert_eq!(&la.data()[..3 * cfg.vocab], &lb.data()[..3 * cfg.vocab]);
        assert_ne!(&ha.data()[3 * d..4 * d], &hb.data()[3 * d..4 * d]);
    }

    #[test]
    fn perturbing_blocked_position_leaves_row_unchanged() {
        let cfg = tiny_config();
        let params = init_params(cfg, 5).unwrap();
        // Mask where position 3 cannot see position 1, and nothing that 3
        // sees can see 1 either (0 sees only itself; 2 blocked from 1 too).
        let len = 4;
        let mut allow = vec![false; len * len];
        for i in 0..len {
            allow[i * len + i] = true;
        }
        allow[len + 0] = true; // 1 -> 0
        allow[2 * len + 0] = true; // 2 -> 0
        allow[3 * len + 0] = true; // 3 -> 0
        allow[3 * len + 2] = true; // 3 -> 2
        let mask = AttentionMask::new(allow, len).unwrap();

        let base = SequenceInput::from_tokens(&[1, 2, 3, 4]);
        let (ha, _) = forward(&params, &base, &mask).unwrap();
        let perturbed = SequenceInput::from_tokens(&[1, 9, 3, 4]);
        let (hb, _) = forward(&params, &perturbed, &mask).unwrap();
        let d = cfg.d_model;
        assert_eq!(&ha.data()[3 * d..4 * d], &hb.data()[3 * d..4 * d], "blocked input leaked");
        assert_ne!(&ha.data()[d..2 * d], &hb.data()[d..2 * d]);
    }

    #[test]
    fn dense_input_equals_token_lookup() {
        let cfg = tiny_config();
        let params = init_params(cfg, 6).unwrap();
        let tok = SequenceInput::from_tokens(&[2, 7, 1]);
        let mut entries = tok.entries.clone();
        entries[1] = PosEntry::DenseVector(params.embedding_row(7).to_vec());
        let dense = SequenceInput { entries };
        let mask = causal_mask(3);
        let (ha, la) = forward(&params, &tok, &mask).unwrap();
        let (hb, lb) = forward(&params, &dense, &mask).unwrap();
        assert_eq!(ha.data(), hb.data());
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn input_validation_errors() {
        let cfg = tiny_config();
        let params = init_params(cfg, 0).unwrap();
        let too_long = SequenceInput::from_tokens(&vec![1; cfg.max_seq + 1]);
        assert!(matches!(
            forward(&params, &too_long, &causal_mask(cfg.max_seq + 1)),
            Err(Error::Capacity(_))
        ));
        let input = SequenceInput::from_tokens(&[1, 2]);
        assert!(forward(&params, &input, &causal_mask(3)).is_err());
        let bad_token = SequenceInput::from_tokens(&[99]);
        assert!(forward(&params, &bad_token, &causal_mask(1)).is_err());
    }
}
