//! End-to-end desk-scale pipeline: data generation, the three training
//! stages (plus the ablation variants and a second compression ratio),
//! evaluation, and the trace metrics, bundled into a single report.
//!
//! This is the engine behind `reproduce --preset desk`; the acceptance
//! suite drives the same code and asserts the report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    ecr_at_k, hidden_vs_embedding_report, median, path_posterior, write_ecr_csv, write_neff_csv,
    write_scatter_csv,
};
use crate::error::Result;
use crate::infer::{batch_eval, eval_multi_seed, write_traces, DecodeConfig, EvalMode};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::synthdata::{generate_corpus, split_corpus, write_jsonl, GenSpec, Tokenizer, ValueRange};
use crate::training::{train_cot_sft, train_stage1, train_stage2, TrainConfig};

/// Everything the pipeline needs, pinned up front.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub n_problems: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    pub test_frac: f64,
    pub multichain_n: usize,
    pub multichain_m: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval_seeds: Vec<u64>,
    pub seed: u64,
    /// K for the compression metric.
    pub ecr_k: usize,
    /// Posterior parameters: K = min(k_cap, V), τ, ε.
    pub neff_k_cap: usize,
    pub neff_tau: f64,
    pub neff_eps: f64,
}

impl Preset {
    /// The full desk-scale configuration: 2000 problems of 2–5 steps, a
    /// 4-layer d=128 model, ratio-2 and ratio-4 latent variants plus the
    /// three ablations.
    pub fn desk() -> Preset {
        let vocab = Tokenizer::default().vocab_size();
        Preset {
            name: "desk".into(),
            n_problems: 2000,
            steps_min: 2,
            steps_max: 5,
            test_frac: 0.1,
            multichain_n: 200,
            multichain_m: 6,
            model: ModelConfig { n_layers: 4, n_heads: 8, d_model: 128, vocab, max_seq: 128 },
            train: TrainConfig {
                r: 2,
                batch_size: 32,
                cot_steps: 900,
                phase_a_steps: 60,
                phase_b_steps: 60,
                phase_c_steps: 240,
                stage2_steps: 700,
                lr_cot: 1e-3,
                lr_stage1: 7e-4,
                lr_stage2: 5e-4,
                stage1_passes: 2,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
            eval_seeds: vec![11, 22, 33, 44, 55],
            seed: 7,
            ecr_k: 10,
            neff_k_cap: 100,
            neff_tau: 1.0,
            neff_eps: 1e-8,
        }
    }

    /// A minutes-scale shrink of the same pipeline for smoke testing the
    /// orchestration; numbers are not expected to meet the desk thresholds.
    pub fn smoke() -> Preset {
        let vocab = Tokenizer::default().vocab_size();
        Preset {
            name: "smoke".into(),
            n_problems: 60,
            steps_min: 2,
            steps_max: 3,
            test_frac: 0.2,
            multichain_n: 10,
            multichain_m: 4,
            model: ModelConfig { n_layers: 2, n_heads: 4, d_model: 32, vocab, max_seq: 96 },
            train: TrainConfig {
                r: 2,
                batch_size: 8,
                cot_steps: 30,
                phase_a_steps: 4,
                phase_b_steps: 4,
                phase_c_steps: 8,
                stage2_steps: 20,
                stage1_passes: 2,
                ..TrainConfig::default()
            },
            decode: DecodeConfig { latent_budget: 24, max_explicit_len: 24, ..DecodeConfig::default() },
            eval_seeds: vec![11, 22],
            seed: 7,
            ecr_k: 10,
            neff_k_cap: 100,
            neff_tau: 1.0,
            neff_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskReport {
    pub preset: String,
    pub criteria: Vec<CriterionResult>,
    pub numbers: serde_json::Value,
}

impl DeskReport {
    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    pub fn print(&self) {
        for c in &self.criteria {
            println!("criterion {}: {} ({})", c.id, if c.pass { "PASS" } else { "FAIL" }, c.detail);
        }
    }
}

struct VariantOutcome {
    params: ModelParams,
    em_mean: f64,
    latent_len_mean: f64,
    traces_by_id: std::collections::HashMap<String, crate::infer::ReasoningTrace>,
}

fn progress(msg: &str) {
    eprintln!("[reproduce] {msg}");
}

/// Run the full pipeline and evaluate the report criteria.
pub fn run_desk(preset: &Preset, out: &Path) -> Result<DeskReport> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("preset.json"), serde_json::to_string_pretty(preset)?)?;
    let tok = Tokenizer::default();

    // ---- data ----
    progress("generating corpora");
    let (problems, stats) = generate_corpus(&GenSpec {
        n: preset.n_problems,
        steps_min: preset.steps_min,
        steps_max: preset.steps_max,
        range: ValueRange::default(),
        seed: preset.seed,
        multichain: None,
    })?;
    let (train_set, test_set) = split_corpus(&problems, preset.test_frac, preset.seed ^ 0x5);
    let (multichain, mc_stats) = generate_corpus(&GenSpec {
        n: preset.multichain_n,
        steps_min: preset.steps_min,
        steps_max: preset.steps_max.min(4),
        range: ValueRange::default(),
        seed: preset.seed ^ 0x77,
        multichain: Some(preset.multichain_m),
    })?;
    write_jsonl(&out.join("train.jsonl"), &train_set)?;
    write_jsonl(&out.join("test.jsonl"), &test_set)?;
    write_jsonl(&out.join("multichain.jsonl"), &multichain)?;

    // ---- explicit baseline ----
    progress("training explicit baseline");
    let init = init_params(preset.model, preset.seed ^ 0x100)?;
    let cot = train_cot_sft(
        &preset.train,
        &train_set,
        &tok,
        init,
        Some(&out.join("run-cot")),
        None,
    )?;
    progress(&format!("explicit baseline final loss {:.4}", cot.final_loss));
    let (cot_evals, cot_em, cot_len) = eval_multi_seed(
        &cot.params,
        &test_set,
        &tok,
        &preset.decode,
        EvalMode::Explicit,
        &preset.eval_seeds,
    )?;
    progress(&format!(
        "explicit baseline EM {:.3} ± {:.3}, #L {:.2}",
        cot_em.mean, cot_em.ci_half_width, cot_len.mean
    ));
    let _ = cot_evals;

    // ---- latent variants ----
    let variant = |name: &str, cfg: TrainConfig| -> Result<VariantOutcome> {
        progress(&format!("training latent variant {name}"));
        let dir = out.join(format!("run-{name}"));
        let s1 = train_stage1(&cfg, &train_set, &tok, &cot.params, Some(&dir))?;
        progress(&format!(
            "{name}: stage-1 objective {:.4} -> {:.4}",
            s1.loss_after_phase_a, s1.loss_after_joint
        ));
        let s2 = train_stage2(&cfg, &train_set, &s1.labels, &tok, s1.decoder, Some(&dir), None)?;
        progress(&format!("{name}: stage-2 final loss {:.4}", s2.final_loss));
        let mut decode = preset.decode.clone();
        decode.latent_mode = cfg.latent_mode();
        let (_, em, ll) = eval_multi_seed(
            &s2.params,
            &test_set,
            &tok,
            &decode,
            EvalMode::Latent,
            &preset.eval_seeds,
        )?;
        progress(&format!("{name}: EM {:.3} ± {:.3}, #L {:.2}", em.mean, em.ci_half_width, ll.mean));
        // One deterministic trace pass for the metrics (latent distributions
        // do not depend on the decode seed).
        let (_, traces) = batch_eval(&s2.params, &test_set, &tok, &decode, EvalMode::Latent)?;
        write_traces(
            &dir.join("traces.jsonl"),
            &decode,
            &s2.params.fingerprint(),
            preset.model.vocab,
            &traces,
        )?;
        Ok(VariantOutcome {
            params: s2.params,
            em_mean: em.mean,
            latent_len_mean: ll.mean,
            traces_by_id: traces.into_iter().map(|t| (t.id.clone(), t)).collect(),
        })
    };

    let full_r2 = variant("r2", preset.train.clone())?;
    let hidden = variant("r2-hidden", TrainConfig { hidden_state: true, ..preset.train.clone() })?;
    let no_ltim = variant("r2-noltim", TrainConfig { no_ltim: true, ..preset.train.clone() })?;
    let no_ltsum = variant("r2-noltsum", TrainConfig { no_ltsum: true, ..preset.train.clone() })?;
    let full_r4 = variant("r4", TrainConfig { r: 4, ..preset.train.clone() })?;

    // ---- compression metric (criterion 5) ----
    progress("computing compression metrics");
    let vocab = preset.model.vocab;
    let k_ecr = preset.ecr_k.min(vocab);
    let mut ecr2_rows: Vec<(String, f64)> = Vec::new();
    let mut ecr2_above_1 = 0usize;
    let mut matched: Vec<(f64, f64)> = Vec::new();
    for p in &test_set {
        let chain = tok.tokenize(&p.chain)?;
        let e2 = full_r2
            .traces_by_id
            .get(&p.id)
            .filter(|t| t.latent_len > 0)
            .map(|t| ecr_at_k(&t.latent_probs(vocab), &chain, 2, k_ecr))
            .transpose()?;
        let e4 = full_r4
            .traces_by_id
            .get(&p.id)
            .filter(|t| t.latent_len > 0)
            .map(|t| ecr_at_k(&t.latent_probs(vocab), &chain, 4, k_ecr))
            .transpose()?;
        if let Some(e2) = e2 {
            ecr2_rows.push((p.id.clone(), e2));
            if e2 > 1.0 {
                ecr2_above_1 += 1;
            }
            if let Some(e4) = e4 {
                matched.push((e2, e4));
            }
        } else {
            // A trace with no latent steps cannot compress anything.
            ecr2_rows.push((p.id.clone(), 0.0));
        }
    }
    write_ecr_csv(&out.join("ecr-r2.csv"), &ecr2_rows)?;
    let frac_above_1 = ecr2_above_1 as f64 / test_set.len() as f64;
    let mean_e2 = matched.iter().map(|(a, _)| a).sum::<f64>() / matched.len().max(1) as f64;
    let mean_e4 = matched.iter().map(|(_, b)| b).sum::<f64>() / matched.len().max(1) as f64;

    // ---- parallelism metric (criterion 6) ----
    progress("computing parallelism metrics");
    let mut decode = preset.decode.clone();
    decode.latent_mode = preset.train.latent_mode();
    let (_, mc_traces) = batch_eval(&full_r2.params, &multichain, &tok, &decode, EvalMode::Latent)?;
    let k_neff = preset.neff_k_cap.min(vocab);
    let mut neff_rows: Vec<(String, f64, f64)> = Vec::new();
    for (p, t) in multichain.iter().zip(&mc_traces) {
        if t.latent_len == 0 {
            continue;
        }
        let chains: Vec<Vec<u32>> = p
            .alt_chains
            .as_ref()
            .expect("multichain corpus")
            .iter()
            .map(|c| tok.tokenize(c))
            .collect::<Result<_>>()?;
        let pp = path_posterior(
            &t.latent_probs(vocab),
            &chains,
            preset.train.r,
            k_neff,
            preset.neff_tau,
            preset.neff_eps,
        )?;
        neff_rows.push((p.id.clone(), pp.n_eff, pp.top2));
    }
    write_neff_csv(&out.join("neff-r2.csv"), &neff_rows)?;
    let neff_median = median(&neff_rows.iter().map(|(_, n, _)| *n).collect::<Vec<_>>());
    let top2_mean =
        neff_rows.iter().map(|(_, _, t)| *t).sum::<f64>() / neff_rows.len().max(1) as f64;

    // ---- distribution diagnostics (criterion 8) ----
    progress("running distribution diagnostics");
    let (prelim, scatter) =
        hidden_vs_embedding_report(&full_r2.params, &test_set, &tok, preset.seed ^ 0x88)?;
    std::fs::write(out.join("prelim.json"), serde_json::to_string_pretty(&prelim)?)?;
    write_scatter_csv(&out.join("prelim-scatter.csv"), &scatter)?;

    // ---- criteria ----
    let mut criteria = Vec::new();
    let mut push = |id: &str, pass: bool, detail: String| {
        criteria.push(CriterionResult { id: id.into(), pass, detail });
    };
    push(
        "4a",
        cot_em.mean >= 0.95,
        format!("explicit baseline exact match {:.3} (need >= 0.95)", cot_em.mean),
    );
    push(
        "4b",
        full_r2.em_mean >= cot_em.mean - 0.05,
        format!(
            "latent r=2 exact match {:.3} vs baseline {:.3} (allowed gap 0.05)",
            full_r2.em_mean, cot_em.mean
        ),
    );
    push(
        "4c",
        full_r2.latent_len_mean <= 0.6 * cot_len.mean,
        format!(
            "latent #L {:.2} vs 0.6 x explicit chain length {:.2}",
            full_r2.latent_len_mean,
            0.6 * cot_len.mean
        ),
    );
    push(
        "5",
        frac_above_1 >= 0.70 && mean_e4 > mean_e2,
        format!(
            "ECR@{k_ecr} > 1 on {:.1}% of samples (need >= 70%); mean r4 {:.3} vs r2 {:.3}",
            100.0 * frac_above_1,
            mean_e4,
            mean_e2
        ),
    );
    push(
        "6",
        neff_median > 1.7 && top2_mean > 0.3,
        format!(
            "median N_eff {neff_median:.3} (need > 1.7), mean Top-2 {top2_mean:.3} (need > 0.3)"
        ),
    );
    push(
        "7",
        full_r2.em_mean >= hidden.em_mean
            && full_r2.em_mean >= no_ltim.em_mean
            && full_r2.em_mean >= no_ltsum.em_mean - 0.01,
        format!(
            "full {:.3} vs hidden {:.3}, no-induction-mask {:.3}, no-supervision-mask {:.3}",
            full_r2.em_mean, hidden.em_mean, no_ltim.em_mean, no_ltsum.em_mean
        ),
    );
    let min_dim = preset.model.d_model.min(preset.model.vocab) as f64;
    push(
        "8",
        prelim.fid_hidden_vs_embed > prelim.fid_embed_self
            && prelim.mmd2_hidden_vs_embed > prelim.mmd2_embed_self
            && prelim.effective_rank_embeddings < min_dim,
        format!(
            "FID {:.4} > {:.4}, MMD² {:.6} > {:.6}, eff-rank(E) {:.2} < {min_dim}",
            prelim.fid_hidden_vs_embed,
            prelim.fid_embed_self,
            prelim.mmd2_hidden_vs_embed,
            prelim.mmd2_embed_self,
            prelim.effective_rank_embeddings
        ),
    );

    let numbers = serde_json::json!({
        "corpus": stats,
        "multichain": mc_stats,
        "cot": {"em": cot_em.mean, "em_ci": cot_em.ci_half_width, "chain_len": cot_len.mean},
        "latent_r2": {"em": full_r2.em_mean, "latent_len": full_r2.latent_len_mean},
        "latent_r4": {"em": full_r4.em_mean, "latent_len": full_r4.latent_len_mean},
        "ablations": {
            "hidden_state": hidden.em_mean,
            "no_ltim": no_ltim.em_mean,
            "no_ltsum": no_ltsum.em_mean,
        },
        "ecr": {"k": k_ecr, "frac_above_1": frac_above_1, "mean_r2": mean_e2, "mean_r4": mean_e4,
                 "matched": matched.len()},
        "neff": {"k": k_neff, "median": neff_median, "mean_top2": top2_mean, "n": neff_rows.len()},
        "prelim": prelim,
    });
    let report = DeskReport { preset: preset.name.clone(), criteria, numbers };
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
