//! Soft-embedding latent tokens and the two training objectives.
//!
//! A latent token is a point in the convex hull of the vocabulary
//! embeddings: its mixture weights α come from projecting a hidden state
//! onto the vocabulary simplex through the tied head, and its vector is
//! z = Σ_v α_v e_v. Stage 1 scores latent tokens by how well a masked
//! decoder reconstructs the suffix of the reasoning chain from them;
//! stage 2 distills them into the decoder with a KL term on latent slots
//! and a CE term on explicit slots.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{forward_bound, BindMode, BoundModel, ModelParams, TapeInput};
use crate::num::prob::{cross_entropy, kl_divergence, softmax_with_temperature, ProbVector};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;
use crate::segmask::{build_ltsum, supervision_pairs, Role, SegmentedExample};

/// How the fed-back latent vector is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LatentMode {
    /// z = E·α — the soft-embedding construction.
    SoftEmbedding,
    /// Ablation: feed the raw hidden state (α is still recorded for labels).
    HiddenState,
}

/// An (α, z) pair with z in the embedding column space: z = E·α.
#[derive(Debug, Clone)]
pub struct LatentToken {
    pub alpha: ProbVector,
    pub z: Vec<f64>,
}

impl LatentToken {
    /// Build the mixture vector z = Σ_v α_v e_v for a given α.
    pub fn from_alpha(alpha: ProbVector, params: &ModelParams) -> Result<Self> {
        if alpha.len() != params.config.vocab {
            return Err(Error::invalid("alpha length must equal vocabulary size"));
        }
        let d = params.config.d_model;
        let mut z = vec![0.0; d];
        for (v, &a) in alpha.as_slice().iter().enumerate() {
            if a != 0.0 {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += a * params.embedding_row(v)[j];
                }
            }
        }
        Ok(LatentToken { alpha, z })
    }

    /// Relative reconstruction residual ‖z − E·α‖ / ‖z‖.
    pub fn reconstruction_residual(&self, params: &ModelParams) -> f64 {
        let rebuilt = LatentToken::from_alpha(self.alpha.clone(), params).expect("same vocab");
        let norm: f64 = self.z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 =
            self.z.iter().zip(&rebuilt.z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if norm == 0.0 {
            err
        } else {
            err / norm
        }
    }
}

/// Project a hidden state onto the vocabulary simplex through the tied head
/// and mix the embeddings: ℓ = Eᵀh, α = softmax(ℓ/T), z = E·α. With
/// `top_k`, all but the k largest entries of α are zeroed and the rest
/// renormalized.
pub fn soft_embed(
    h: &[f64],
    params: &ModelParams,
    temperature: f64,
    top_k: Option<usize>,
) -> Result<LatentToken> {
    let cfg = &params.config;
    if h.len() != cfg.d_model {
        return Err(Error::invalid("hidden state width mismatch"));
    }
    let logits: Vec<f64> =
        (0..cfg.vocab).map(|v| dot(params.embedding_row(v), h)).collect();
    let alpha = softmax_with_temperature(&logits, temperature)?;
    let alpha = match top_k {
        None => alpha,
        Some(k) => prune_top_k(&alpha, k)?,
    };
    LatentToken::from_alpha(alpha, params)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Zero all but the k largest entries and renormalize. Ties at the k-th
/// value keep the lower token id. `k = len` is an exact no-op.
pub fn prune_top_k(alpha: &ProbVector, k: usize) -> Result<ProbVector> {
    let v = alpha.len();
    if k < 1 || k > v {
        return Err(Error::invalid(format!("top-k {k} out of range [1, {v}]")));
    }
    if k == v {
        return Ok(alpha.clone());
    }
    let p = alpha.as_slice();
    let mut idx: Vec<usize> = (0..v).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let kept = &idx[..k];
    let sum: f64 = kept.iter().map(|&j| p[j]).sum();
    let mut out = vec![0.0; v];
    for &j in kept {
        out[j] = p[j] / sum;
    }
    ProbVector::new(out)
}

/// Tape version of [`soft_embed`]: differentiable through h (the embedding
/// matrix participates as bound, typically frozen).
pub fn soft_embed_on_tape(
    tape: &mut Tape,
    model: &BoundModel,
    h_row: Var,
    temperature: f64,
    top_k: Option<usize>,
) -> (Var, Var) {
    let logits = tape.matmul_bt(h_row, model.tok_embed);
    let mut alpha = tape.softmax_rows(logits, temperature);
    if let Some(k) = top_k {
        alpha = tape.topk_renorm(alpha, k);
    }
    let z = tape.matmul(alpha, model.tok_embed);
    (alpha, z)
}

// ---- stage-1 supervised decoding loss --------------------------------------

/// Decoder-layout inputs for a segmented example with latent vectors at the
/// slot positions.
pub fn decoder_inputs(example: &SegmentedExample, zs: &[Var]) -> Result<Vec<TapeInput>> {
    if zs.len() != example.n_segments() {
        return Err(Error::invalid(format!(
            "latent count {} does not match segment count {}",
            zs.len(),
            example.n_segments()
        )));
    }
    let layout = example.decoder_layout();
    let mut out = Vec::with_capacity(layout.len());
    for pos in 0..layout.len() {
        let role = layout.role(pos);
        let inp = match role {
            Role::Question => TapeInput::Token(example.question[pos]),
            Role::LatentSlot { seg } => TapeInput::Dense(zs[seg - 1]),
            _ => TapeInput::Token(example.decoder_token_at(role).expect("token role")),
        };
        out.push(inp);
    }
    Ok(out)
}

/// Supervised decoding objective on a tape, restricted to the given
/// conditioning steps (1-based). Runs one masked decoder pass per step and
/// averages the per-step mean negative log-likelihood of the suffix tokens.
pub fn stage1_sup_loss_on_tape(
    tape: &mut Tape,
    decoder: &BoundModel,
    example: &SegmentedExample,
    zs: &[Var],
    passes: &[usize],
) -> Result<Var> {
    if passes.is_empty() {
        return Err(Error::invalid("need at least one conditioning step"));
    }
    let layout = example.decoder_layout();
    let inputs = decoder_inputs(example, zs)?;
    let mut per_pass: Vec<(Var, f64)> = Vec::with_capacity(passes.len());
    for &i in passes {
        let mask = build_ltsum(&layout, i)?;
        let out = forward_bound(tape, decoder, &inputs, &mask)?;
        let pairs = supervision_pairs(&layout, i)?;
        let w = 1.0 / pairs.len() as f64;
        let items: Vec<(usize, usize, f64)> = pairs
            .iter()
            .map(|&(pred, tgt)| {
                let token = example
                    .decoder_token_at(layout.role(tgt))
                    .expect("supervised positions hold tokens");
                (pred, token as usize, w)
            })
            .collect();
        let pass_loss = tape.cross_entropy_terms(out.logits, &items);
        per_pass.push((pass_loss, 1.0 / passes.len() as f64));
    }
    Ok(tape.weighted_sum(&per_pass))
}

/// Supervised decoding objective, full double sum over all N conditioning
/// steps, evaluated without gradients.
pub fn stage1_sup_loss(
    latents: &[LatentToken],
    example: &SegmentedExample,
    decoder: &ModelParams,
) -> Result<f64> {
    let n = example.n_segments();
    if latents.len() != n {
        return Err(Error::invalid(format!(
            "latent count {} does not match segment count {n}",
            latents.len()
        )));
    }
    let mut tape = Tape::new_inference();
    let bound = decoder.bind(&mut tape, BindMode::Frozen);
    let zs: Vec<Var> = latents
        .iter()
        .map(|lt| tape.constant(lt.z.clone(), 1, decoder.config.d_model))
        .collect();
    let passes: Vec<usize> = (1..=n).collect();
    let loss = stage1_sup_loss_on_tape(&mut tape, &bound, example, &zs, &passes)?;
    Ok(tape.scalar(loss))
}

// ---- stage-2 autonomous-generation loss ------------------------------------

/// Index sets and labels over a stage-2 sequence: soft labels p_t for latent
/// slots, hard labels y_t for explicit slots.
#[derive(Debug, Clone)]
pub struct SlotAssignment {
    pub latent: Vec<(usize, ProbVector)>,
    pub explicit: Vec<(usize, u32)>,
}

impl SlotAssignment {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.latent.is_empty() || self.explicit.is_empty() {
            return Err(Error::invalid(
                "slot assignment needs at least one latent and one explicit position",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &(pos, _) in self.latent.iter() {
            if pos >= seq_len {
                return Err(Error::invalid(format!("latent slot {pos} out of range {seq_len}")));
            }
            if !seen.insert(pos) {
                return Err(Error::invalid(format!("position {pos} assigned twice")));
            }
        }
        for &(pos, _) in self.explicit.iter() {
            if pos >= seq_len {
                return Err(Error::invalid(format!("explicit slot {pos} out of range {seq_len}")));
            }
            if !seen.insert(pos) {
                return Err(Error::invalid(format!("position {pos} assigned twice")));
            }
        }
        Ok(())
    }
}

/// λ · mean_{t ∈ S_lat} KL(p_t ‖ q_t) + β · mean_{t ∈ S_exp} (−log q_t[y_t])
/// with q_t = softmax(logits[t]).
pub fn stage2_auto_loss(
    logits: &Tensor,
    assignment: &SlotAssignment,
    lambda: f64,
    beta: f64,
) -> Result<f64> {
    if lambda < 0.0 || beta < 0.0 {
        return Err(Error::invalid("loss weights must be nonnegative"));
    }
    let [rows, cols] = logits.shape() else {
        return Err(Error::invalid("logits must be 2-D"));
    };
    let (rows, cols) = (*rows, *cols);
    assignment.validate(rows)?;
    let row = |t: usize| &logits.data()[t * cols..(t + 1) * cols];

    let mut kl_part = 0.0;
    for (pos, p) in &assignment.latent {
        let q = softmax_with_temperature(row(*pos), 1.0)?;
        kl_part += kl_divergence(p, &q)?;
    }
    kl_part /= assignment.latent.len() as f64;

    let mut ce_part = 0.0;
    for &(pos, y) in &assignment.explicit {
        let q = softmax_with_temperature(row(pos), 1.0)?;
        ce_part += cross_entropy(&q, y as usize)?;
    }
    ce_part /= assignment.explicit.len() as f64;

    Ok(lambda * kl_part + beta * ce_part)
}

/// Tape version of [`stage2_auto_loss`] for training.
pub fn stage2_auto_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    assignment: &SlotAssignment,
    lambda: f64,
    beta: f64,
) -> Result<Var> {
    let (rows, _) = tape.dims(logits);
    assignment.validate(rows)?;
    let wk = lambda / assignment.latent.len() as f64;
    let kl_items: Vec<(usize, Arc<Vec<f64>>, f64)> = assignment
        .latent
        .iter()
        .map(|(pos, p)| (*pos, Arc::new(p.as_slice().to_vec()), wk))
        .collect();
    let kl = tape.kl_terms(logits, &kl_items);
    let wc = beta / assignment.explicit.len() as f64;
    let ce_items: Vec<(usize, usize, f64)> =
        assignment.explicit.iter().map(|&(pos, y)| (pos, y as usize, wc)).collect();
    let ce = tape.cross_entropy_terms(logits, &ce_items);
    Ok(tape.weighted_sum(&[(kl, 1.0), (ce, 1.0)]))
}

/// Temperature transform for distillation: the teacher is sharpened or
/// flattened by exponent 1/T and renormalized, the student softmax runs at
/// temperature T, and the loss contribution is scaled by T².
pub fn distillation_temperature_transform(
    p: &ProbVector,
    q_logits: &[f64],
    temperature: f64,
) -> Result<(ProbVector, ProbVector, f64)> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let powed: Vec<f64> = p.as_slice().iter().map(|&x| x.powf(1.0 / temperature)).collect();
    let sum: f64 = powed.iter().sum();
    let p_t = ProbVector::new(powed.into_iter().map(|x| x / sum).collect())?;
    let q_t = softmax_with_temperature(q_logits, temperature)?;
    Ok((p_t, q_t, temperature * temperature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, zero_params, ModelConfig};
    use crate::segmask::Markers;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn markers() -> Markers {
        Markers { think_open: 2, think_close: 3, slot: 4, eos: 1, pad: 0 }
    }

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 12, vocab: 9, max_seq: 32 }
    }

    #[test]
    fn top_k_pruning_arithmetic() {
        let alpha = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let pruned = prune_top_k(&alpha, 2).unwrap();
        close(pruned.as_slice()[0], 0.625, 1e-12);
        close(pruned.as_slice()[1], 0.375, 1e-12);
        close(pruned.as_slice()[2], 0.0, 1e-12);
        // k = V is an exact no-op.
        assert_eq!(prune_top_k(&alpha, 3).unwrap().as_slice(), alpha.as_slice());
        assert!(prune_top_k(&alpha, 0).is_err());
        assert!(prune_top_k(&alpha, 4).is_err());
    }

    #[test]
    fn soft_embed_top1_is_vertex() {
        let params = init_params(tiny(), 3).unwrap();
        let h: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let lt = soft_embed(&h, &params, 1.0, Some(1)).unwrap();
        let v = lt.alpha.argmax();
        close(lt.alpha.as_slice()[v], 1.0, 1e-12);
        assert_eq!(lt.z, params.embedding_row(v).to_vec());
    }

    #[test]
    fn identity_embedding_passes_alpha_through() {
        // d = V with E = I: z must equal α.
        let cfg = ModelConfig { n_layers: 1, n_heads: 1, d_model: 3, vocab: 3, max_seq: 8 };
        let mut params = zero_params(cfg).unwrap();
        let e = params.tensor_mut("tok_embed").unwrap();
        for i in 0..3 {
            e[i * 3 + i] = 1.0;
        }
        let alpha = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let lt = LatentToken::from_alpha(alpha, &params).unwrap();
        close(lt.z[0], 0.5, 1e-12);
        close(lt.z[1], 0.3, 1e-12);
        close(lt.z[2], 0.2, 1e-12);
    }

    #[test]
    fn soft_embed_matches_tied_head_softmax() {
        let params = init_params(tiny(), 5).unwrap();
        let h: Vec<f64> = (0..12).map(|i| (i as f64 * 0.21).cos()).collect();
        let lt = soft_embed(&h, &params, 0.7, None).unwrap();
        let logits: Vec<f64> = (0..9)
            .map(|v| params.embedding_row(v).iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect();
        let expect = softmax_with_temperature(&logits, 0.7).unwrap();
        for (a, b) in lt.alpha.as_slice().iter().zip(expect.as_slice()) {
            close(*a, *b, 1e-12);
        }
        assert!(lt.reconstruction_residual(&params) < 1e-6);
    }

    #[test]
    fn convex_hull_membership_per_dimension() {
        let params = init_params(tiny(), 9).unwrap();
        let d = params.config.d_model;
        for s in 0..20u64 {
            let h: Vec<f64> = (0..d).map(|i| ((i as u64 + 31 * s) as f64 * 0.61).sin()).collect();
            let lt = soft_embed(&h, &params, 1.0, None).unwrap();
            for j in 0..d {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in 0..params.config.vocab {
                    lo = lo.min(params.embedding_row(v)[j]);
                    hi = hi.max(params.embedding_row(v)[j]);
                }
                assert!(lt.z[j] >= lo - 1e-12 && lt.z[j] <= hi + 1e-12);
            }
        }
    }

    fn toy_example() -> SegmentedExample {
        // question "56" -> tokens within vocab 9; chain of 3 tokens, r=2.
        SegmentedExample::new(vec![5, 6], &[7, 8, 6], vec![8], markers(), 2).unwrap()
    }

    #[test]
    fn stage1_loss_is_log_v_for_uniform_decoder() {
        let params = zero_params(tiny()).unwrap();
        let ex = toy_example();
        let n = ex.n_segments();
        let alpha = ProbVector::uniform(9);
        let latents: Vec<LatentToken> = (0..n)
            .map(|_| LatentToken::from_alpha(alpha.clone(), &params).unwrap())
            .collect();
        let loss = stage1_sup_loss(&latents, &ex, &params).unwrap();
        close(loss, (9.0_f64).ln(), 1e-9);
    }

    #[test]
    fn stage1_loss_latent_count_mismatch() {
        let params = zero_params(tiny()).unwrap();
        let ex = toy_example();
        let alpha = ProbVector::uniform(9);
        let one = vec![LatentToken::from_alpha(alpha, &params).unwrap()];
        assert!(stage1_sup_loss(&one, &ex, &params).is_err());
    }

    #[test]
    fn stage1_loss_matches_independent_double_sum() {
        // Brute-force oracle: enumerate (i, t) pairs by hand, computing each
        // −log q from its own forward pass and its own indexing.
        let params = init_params(tiny(), 17).unwrap();
        let ex = toy_example();
        let n = ex.n_segments();
        let latents: Vec<LatentToken> = (0..n)
            .map(|k| {
                let h: Vec<f64> = (0..12).map(|i| ((i + k) as f64 * 0.4).sin()).collect();
                soft_embed(&h, &params, 1.0, None).unwrap()
            })
            .collect();
        let got = stage1_sup_loss(&latents, &ex, &params).unwrap();

        // Oracle path: independent assembly (forward per (i), softmax per t).
        let layout = ex.decoder_layout();
        let mut total = 0.0;
        for i in 1..=n {
            let mask = build_ltsum(&layout, i).unwrap();
            let mut tape = Tape::new_inference();
            let bound = params.bind(&mut tape, BindMode::Frozen);
            let zs: Vec<Var> =
                latents.iter().map(|lt| tape.constant(lt.z.clone(), 1, 12)).collect();
            let inputs = decoder_inputs(&ex, &zs).unwrap();
            let out = forward_bound(&mut tape, &bound, &inputs, &mask).unwrap();
            let logits = tape.value(out.logits);
            let pairs = supervision_pairs(&layout, i).unwrap();
            let mut sum_i = 0.0;
            for (pred, tgt) in &pairs {
                let row = &logits[pred * 9..(pred + 1) * 9];
                let q = softmax_with_temperature(row, 1.0).unwrap();
                let y = ex.decoder_token_at(layout.role(*tgt)).unwrap();
                sum_i += cross_entropy(&q, y as usize).unwrap();
            }
            total += sum_i / pairs.len() as f64;
        }
        total /= n as f64;
        close(got, total, 1e-9);
    }

    fn assignment_v2() -> SlotAssignment {
        SlotAssignment {
            latent: vec![(0, ProbVector::new(vec![1.0, 0.0]).unwrap())],
            explicit: vec![(1, 1)],
        }
    }

    #[test]
    fn stage2_loss_direct_evaluation() {
        // Latent slot: p=[1,0] vs q=[0.5,0.5] -> KL = ln 2.
        // Explicit slot: essentially one-hot correct -> CE ~ 0.
        let logits = Tensor::new(vec![2, 2], vec![0.0, 0.0, 60.0, 0.0]).unwrap();
        let asn = SlotAssignment {
            latent: vec![(0, ProbVector::new(vec![1.0, 0.0]).unwrap())],
            explicit: vec![(1, 0)],
        };
        let loss = stage2_auto_loss(&logits, &asn, 1.0, 1.0).unwrap();
        close(loss, 2.0_f64.ln(), 1e-9);
    }

    #[test]
    fn stage2_loss_zero_when_predictions_match() {
        // q_t = p_t on the latent slot (logits = ln p) and one-hot correct
        // explicit slot.
        let p: Vec<f64> = vec![0.7, 0.2, 0.1];
        let mut data = p.iter().map(|x| x.ln()).collect::<Vec<_>>();
        data.extend([0.0, 80.0, 0.0]);
        let logits = Tensor::new(vec![2, 3], data).unwrap();
        let asn = SlotAssignment {
            latent: vec![(0, ProbVector::new(p).unwrap())],
            explicit: vec![(1, 1)],
        };
        let loss = stage2_auto_loss(&logits, &asn, 1.0, 1.0).unwrap();
        close(loss, 0.0, 1e-9);
    }

    #[test]
    fn stage2_loss_decomposes() {
        let logits =
            Tensor::new(vec![2, 2], vec![0.3, -0.4, 1.2, 0.1]).unwrap();
        let asn = assignment_v2();
        let both = stage2_auto_loss(&logits, &asn, 1.3, 0.7).unwrap();
        let kl_only = stage2_auto_loss(&logits, &asn, 1.0, 0.0).unwrap();
        let ce_only = stage2_auto_loss(&logits, &asn, 0.0, 1.0).unwrap();
        close(both, 1.3 * kl_only + 0.7 * ce_only, 1e-12);
        // λ=0 reduces to the mean explicit cross-entropy.
        let q = softmax_with_temperature(&[1.2, 0.1], 1.0).unwrap();
        close(ce_only, cross_entropy(&q, 1).unwrap(), 1e-12);
    }

    #[test]
    fn stage2_loss_rejects_empty_sets() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let no_latent = SlotAssignment { latent: vec![], explicit: vec![(0, 0)] };
        assert!(stage2_auto_loss(&logits, &no_latent, 1.0, 1.0).is_err());
        let no_explicit =
            SlotAssignment { latent: vec![(0, ProbVector::uniform(2))], explicit: vec![] };
        assert!(stage2_auto_loss(&logits, &no_explicit, 1.0, 1.0).is_err());
    }

    #[test]
    fn stage2_tape_matches_pure() {
        let data = vec![0.4, -0.2, 0.9, 0.15, -0.6, 0.3];
        let logits = Tensor::new(vec![2, 3], data.clone()).unwrap();
        let asn = SlotAssignment {
            latent: vec![(0, ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap())],
            explicit: vec![(1, 2)],
        };
        let pure = stage2_auto_loss(&logits, &asn, 1.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(data, 2, 3);
        let tl = stage2_auto_loss_on_tape(&mut tape, lv, &asn, 1.0, 1.0).unwrap();
        close(tape.scalar(tl), pure, 1e-9);
    }

    #[test]
    fn distillation_transform_cases() {
        let p = ProbVector::new(vec![0.8, 0.2]).unwrap();
        let (p1, q1, s1) = distillation_temperature_transform(&p, &[0.3, -0.1], 1.0).unwrap();
        assert_eq!(p1.as_slice(), p.as_slice());
        close(s1, 1.0, 1e-12);
        let qref = softmax_with_temperature(&[0.3, -0.1], 1.0).unwrap();
        assert_eq!(q1.as_slice(), qref.as_slice());

        let (p2, _, s2) = distillation_temperature_transform(&p, &[0.0, 0.0], 2.0).unwrap();
        close(p2.as_slice()[0], 2.0 / 3.0, 1e-9);
        close(p2.as_slice()[1], 1.0 / 3.0, 1e-9);
        close(s2, 4.0, 1e-12);

        // T → ∞ flattens both toward uniform.
        let (pinf, qinf, _) =
            distillation_temperature_transform(&p, &[5.0, -3.0], 1e6).unwrap();
        close(pinf.as_slice()[0], 0.5, 1e-5);
        close(qinf.as_slice()[0], 0.5, 1e-5);
    }
}
