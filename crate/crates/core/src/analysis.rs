//! Trace metrics and distribution diagnostics.
//!
//! ECR@K measures how many aligned explicit-chain tokens appear in the
//! top-K of each latent step's distribution (values above 1 mean one latent
//! step genuinely covers more than one explicit token). The path posterior
//! turns per-chain probability mass into a softmax posterior over candidate
//! chains; its exponential entropy N_eff counts effectively supported paths
//! and Top-2 is the runner-up/winner posterior ratio. Effective rank, FID,
//! MMD² and cosine sampling quantify how far hidden states sit from the
//! token-embedding distribution.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, SequenceInput};
use crate::num::prob::shannon_entropy;
use crate::num::tensor::Tensor;
use crate::par::par_map;
use crate::segmask::causal_mask;
use crate::synthdata::{Problem, Tokenizer};

// ---- alignment -------------------------------------------------------------

/// A reference chain aligned to latent steps at ratio r: step t covers the
/// token *set* S_t = {x_{(t−1)r+1}, ..., x_{min(tr, L)}}.
#[derive(Debug, Clone)]
pub struct AlignedChain {
    pub sets: Vec<Vec<u32>>,
    pub chain_len: usize,
    pub r: usize,
}

impl AlignedChain {
    pub fn new(chain: &[u32], r: usize) -> Result<Self> {
        if chain.is_empty() {
            return Err(Error::invalid("cannot align an empty chain"));
        }
        if r < 1 {
            return Err(Error::invalid("alignment ratio must be >= 1"));
        }
        let sets = chain
            .chunks(r)
            .map(|w| {
                let mut s = w.to_vec();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();
        Ok(AlignedChain { sets, chain_len: chain.len(), r })
    }

    /// Aligned step count T' = min(T, ⌈L/r⌉).
    pub fn aligned_steps(&self, latent_steps: usize) -> usize {
        latent_steps.min(self.sets.len())
    }
}

/// Ids of the K most probable tokens; ties at the K-th value keep the lower
/// token id.
pub fn top_k_ids(probs: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| i as u32).collect()
}

/// ECR@K = (1/T') Σ_t |S_t ∩ T_K(p_t)| ∈ [0, r].
pub fn ecr_at_k(latent_probs: &[Vec<f64>], chain: &[u32], r: usize, k: usize) -> Result<f64> {
    if latent_probs.is_empty() {
        return Err(Error::invalid("need at least one latent step"));
    }
    let vocab = latent_probs[0].len();
    if k < 1 || k > vocab {
        return Err(Error::invalid(format!("K={k} out of range [1, {vocab}]")));
    }
    let aligned = AlignedChain::new(chain, r)?;
    let t_prime = aligned.aligned_steps(latent_probs.len());
    let mut total = 0.0;
    for t in 0..t_prime {
        let top: Vec<u32> = top_k_ids(&latent_probs[t], k);
        let hit = aligned.sets[t].iter().filter(|x| top.contains(x)).count();
        total += hit as f64;
    }
    Ok(total / t_prime as f64)
}

// ---- path posterior ----------------------------------------------------------

/// Per-chain evidence scores, their softmax posterior, and the derived
/// parallelism measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPosterior {
    pub scores: Vec<f64>,
    pub posterior: Vec<f64>,
    pub n_eff: f64,
    pub top2: f64,
}

/// Exponential entropy and runner-up ratio of a posterior vector.
pub fn neff_top2(posterior: &[f64]) -> (f64, f64) {
    let n_eff = shannon_entropy(posterior).exp();
    let mut sorted = posterior.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top2 = if sorted.len() >= 2 && sorted[0] > 0.0 { sorted[1] / sorted[0] } else { 0.0 };
    (n_eff, top2)
}

/// Score M candidate chains against a latent trace.
///
/// For chain m: mass_{m,t} = Σ_{x ∈ S_{m,t} ∩ T_K(p_t)} p_t[x], aggregated
/// as score_m = (1/T'_m) Σ_t log(mass + ε) with T'_m = min(T, ⌈L_m/r⌉);
/// the posterior is softmax(score/τ).
pub fn path_posterior(
    latent_probs: &[Vec<f64>],
    chains: &[Vec<u32>],
    r: usize,
    k: usize,
    tau: f64,
    eps: f64,
) -> Result<PathPosterior> {
    if chains.len() < 2 {
        return Err(Error::invalid("need at least two candidate chains"));
    }
    if latent_probs.is_empty() {
        return Err(Error::invalid("need at least one latent step"));
    }
    if !(tau > 0.0) || !(eps > 0.0) {
        return Err(Error::invalid("tau and epsilon must be positive"));
    }
    let vocab = latent_probs[0].len();
    if k < 1 || k > vocab {
        return Err(Error::invalid(format!("K={k} out of range [1, {vocab}]")));
    }
    let tops: Vec<Vec<u32>> = latent_probs.iter().map(|p| top_k_ids(p, k)).collect();
    let mut scores = Vec::with_capacity(chains.len());
    for chain in chains {
        let aligned = AlignedChain::new(chain, r)?;
        let t_prime = aligned.aligned_steps(latent_probs.len());
        let mut score = 0.0;
        for t in 0..t_prime {
            let mass: f64 = aligned.sets[t]
                .iter()
                .filter(|x| tops[t].contains(x))
                .map(|&x| latent_probs[t][x as usize])
                .sum();
            score += (mass + eps).ln();
        }
        scores.push(score / t_prime as f64);
    }
    // Shift-invariant softmax over scores at temperature tau.
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let posterior: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    let (n_eff, top2) = neff_top2(&posterior);
    Ok(PathPosterior { scores, posterior, n_eff, top2 })
}

// ---- spectra -----------------------------------------------------------------

/// Effective rank: exp of the Shannon entropy of the normalized singular
/// values.
pub fn effective_rank(matrix: &Tensor) -> Result<f64> {
    let [rows, cols] = matrix.shape() else {
        return Err(Error::invalid("effective rank needs a 2-D matrix"));
    };
    let m = DMatrix::from_row_slice(*rows, *cols, matrix.data());
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("effective rank of the zero matrix is undefined"));
    }
    let p: Vec<f64> = sv.iter().map(|s| s / total).collect();
    Ok(shannon_entropy(&p).exp())
}

fn mean_cov(samples: &Tensor, ridge: f64) -> (DVector<f64>, DMatrix<f64>) {
    let [n, d] = [samples.shape()[0], samples.shape()[1]];
    let m = DMatrix::from_row_slice(n, d, samples.data());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    if ridge > 0.0 {
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition, clamping tiny negative
/// eigenvalues to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two sample sets:
/// ‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2}).
///
/// When either set has no more samples than dimensions, both covariances
/// get a small diagonal ridge for stability.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let ([na, da], [nb, db]) = (shape2(a)?, shape2(b)?);
    if da != db {
        return Err(Error::invalid(format!("dimension mismatch: {da} vs {db}")));
    }
    if na == 0 || nb == 0 {
        return Err(Error::invalid("empty sample set"));
    }
    let ridge = if na <= da || nb <= da { 1e-6 } else { 0.0 };
    let (mu_a, cov_a) = mean_cov(a, ridge);
    let (mu_b, cov_b) = mean_cov(b, ridge);
    let diff = &mu_a - &mu_b;
    let s = sqrtm_psd(&cov_a);
    let inner = &s * &cov_b * &s;
    let tr_sqrt: f64 = {
        let sym = (&inner + inner.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
    };
    Ok(diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

fn shape2(t: &Tensor) -> Result<[usize; 2]> {
    let [r, c] = t.shape() else {
        return Err(Error::invalid("expected a 2-D tensor"));
    };
    Ok([*r, *c])
}

/// Squared maximum mean discrepancy: biased V-statistic with a Gaussian
/// kernel whose bandwidth is the median pairwise distance over the pooled
/// sample.
pub fn mmd2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let ([na, da], [nb, db]) = (shape2(a)?, shape2(b)?);
    if da != db {
        return Err(Error::invalid(format!("dimension mismatch: {da} vs {db}")));
    }
    if na == 0 || nb == 0 {
        return Err(Error::invalid("empty sample set"));
    }
    let d = da;
    let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let pooled: Vec<Vec<f64>> =
        (0..na).map(|i| row(a, i)).chain((0..nb).map(|i| row(b, i))).collect();

    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sqdist(&pooled[i], &pooled[j]).sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let median = if dists.is_empty() { 1.0 } else { dists[dists.len() / 2] };
    let bw = if median > 0.0 { median } else { 1.0 };
    let gamma = 1.0 / (2.0 * bw * bw);

    let kernel_mean = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for xi in x {
            for yj in y {
                s += (-gamma * sqdist(xi, yj)).exp();
            }
        }
        s / (x.len() * y.len()) as f64
    };
    let xs = &pooled[..na];
    let ys = &pooled[na..];
    Ok(kernel_mean(xs, xs) + kernel_mean(ys, ys) - 2.0 * kernel_mean(xs, ys))
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---- hidden-state vs embedding diagnostics -------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrelimReport {
    pub n_hidden: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub fid_hidden_vs_embed: f64,
    pub mmd2_hidden_vs_embed: f64,
    /// Self-comparison baselines (embeddings against themselves).
    pub fid_embed_self: f64,
    pub mmd2_embed_self: f64,
    pub mean_cosine_cross: f64,
    pub mean_cosine_embed_pairs: f64,
    pub effective_rank_embeddings: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub kind: String,
}

/// Collect final-layer hidden states over explicit-format corpus positions.
pub fn collect_hidden_states(
    params: &ModelParams,
    problems: &[Problem],
    tok: &Tokenizer,
    max_positions: usize,
) -> Result<Tensor> {
    let d = params.config.d_model;
    let per_problem: Vec<Result<Vec<f64>>> = par_map(problems, |p| {
        let mut tokens = tok.tokenize(&p.question)?;
        tokens.push(tok.think_open());
        tokens.extend(tok.tokenize(&p.chain)?);
        tokens.push(tok.think_close());
        tokens.extend(tok.tokenize(&p.answer)?);
        let input = SequenceInput::from_tokens(&tokens);
        let (hidden, _) = forward(params, &input, &causal_mask(tokens.len()))?;
        Ok(hidden.data().to_vec())
    });
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in per_problem {
        let data = r?;
        let take = (max_positions - n).min(data.len() / d);
        rows.extend_from_slice(&data[..take * d]);
        n += take;
        if n >= max_positions {
            break;
        }
    }
    Tensor::new(vec![n, d], rows)
}

fn embedding_tensor(params: &ModelParams) -> Tensor {
    let v = params.config.vocab;
    let d = params.config.d_model;
    Tensor::new(vec![v, d], params.embedding_matrix().as_ref().clone()).expect("consistent")
}

fn subsample_rows(t: &Tensor, max_rows: usize, seed: u64) -> Tensor {
    let [n, d] = [t.shape()[0], t.shape()[1]];
    if n <= max_rows {
        return t.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(max_rows);
    idx.sort_unstable();
    let mut data = Vec::with_capacity(max_rows * d);
    for &i in &idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![max_rows, d], data).expect("consistent")
}

fn mean_cosine_pairs(a: &Tensor, b: &Tensor, n_pairs: usize, seed: u64) -> f64 {
    let d = a.shape()[1];
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut counted = 0usize;
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..na);
        let j = rng.gen_range(0..nb);
        let x = &a.data()[i * d..(i + 1) * d];
        let y = &b.data()[j * d..(j + 1) * d];
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx > 0.0 && ny > 0.0 {
            total += dot / (nx * ny);
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Compare the distribution of final-layer hidden states against the token
/// embeddings: FID, MMD², sampled cosine similarity, and self-comparison
/// baselines. Also returns a 2-D principal-component scatter of the pooled
/// data for external plotting.
pub fn hidden_vs_embedding_report(
    params: &ModelParams,
    problems: &[Problem],
    tok: &Tokenizer,
    seed: u64,
) -> Result<(PrelimReport, Vec<ScatterPoint>)> {
    if problems.is_empty() {
        return Err(Error::invalid("corpus must be nonempty"));
    }
    let hidden = collect_hidden_states(params, problems, tok, 20_000)?;
    let embed = embedding_tensor(params);
    let hidden_small = subsample_rows(&hidden, 1024, seed);
    let embed_small = subsample_rows(&embed, 1024, seed ^ 1);

    let report = PrelimReport {
        n_hidden: hidden.shape()[0],
        vocab: params.config.vocab,
        d_model: params.config.d_model,
        fid_hidden_vs_embed: fid(&hidden, &embed)?,
        mmd2_hidden_vs_embed: mmd2(&hidden_small, &embed_small)?,
        fid_embed_self: fid(&embed, &embed)?,
        mmd2_embed_self: mmd2(&embed_small, &embed_small)?,
        mean_cosine_cross: mean_cosine_pairs(&hidden, &embed, 2000, seed ^ 2),
        mean_cosine_embed_pairs: mean_cosine_pairs(&embed, &embed, 2000, seed ^ 3),
        effective_rank_embeddings: effective_rank(&embed)?,
    };

    // 2-D projection: principal components of the pooled rows.
    let d = params.config.d_model;
    let n_h = hidden_small.shape()[0];
    let n_e = embed.shape()[0];
    let mut pooled = Vec::with_capacity((n_h + n_e) * d);
    pooled.extend_from_slice(hidden_small.data());
    pooled.extend_from_slice(embed.data());
    let pooled = Tensor::new(vec![n_h + n_e, d], pooled)?;
    let (_, cov) = mean_cov(&pooled, 0.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let pc1 = eig.eigenvectors.column(order[0]).clone_owned();
    let pc2 = eig.eigenvectors.column(order[1]).clone_owned();
    let project = |row: &[f64]| -> (f64, f64) {
        let x: f64 = row.iter().zip(pc1.iter()).map(|(a, b)| a * b).sum();
        let y: f64 = row.iter().zip(pc2.iter()).map(|(a, b)| a * b).sum();
        (x, y)
    };
    let mut points = Vec::with_capacity(n_h + n_e);
    for i in 0..n_h {
        let (x, y) = project(&hidden_small.data()[i * d..(i + 1) * d]);
        points.push(ScatterPoint { x, y, kind: "hidden".into() });
    }
    for i in 0..n_e {
        let (x, y) = project(&embed.data()[i * d..(i + 1) * d]);
        points.push(ScatterPoint { x, y, kind: "embedding".into() });
    }
    Ok((report, points))
}

// ---- file exports ---------------------------------------------------------------

pub fn write_scatter_csv(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,kind")?;
    for p in points {
        writeln!(w, "{},{},{}", p.x, p.y, p.kind)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ecr_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "id,ecr")?;
    for (id, e) in rows {
        writeln!(w, "{id},{e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_neff_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "id,n_eff,top2")?;
    for (id, n, t) in rows {
        writeln!(w, "{id},{n},{t}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return f64::NAN;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn sharp(v: usize, hot: &[(usize, f64)]) -> Vec<f64> {
        let rest: f64 = 1.0 - hot.iter().map(|(_, p)| p).sum::<f64>();
        let mut out = vec![rest / (v as f64 - hot.len() as f64); v];
        for &(i, p) in hot {
            out[i] = p;
        }
        out
    }

    #[test]
    fn ecr_hand_example() {
        // x = [a,b,c,d] with ids 10..13, r = 2, T = 2, K = 3.
        // Top-3(p1) ⊇ {a,b}; Top-3(p2) ∩ {c,d} = {c}. ECR = (2+1)/2.
        let v = 19;
        let p1 = sharp(v, &[(10, 0.4), (11, 0.3), (5, 0.2)]);
        let p2 = sharp(v, &[(12, 0.5), (5, 0.2), (6, 0.15)]);
        let chain = vec![10, 11, 12, 13];
        let ecr = ecr_at_k(&[p1, p2], &chain, 2, 3).unwrap();
        close(ecr, 1.5, 1e-12);
    }

    #[test]
    fn ecr_lower_and_upper_behavior() {
        let v = 19;
        // No aligned token in the top-K anywhere.
        let p = sharp(v, &[(1, 0.5), (2, 0.3), (3, 0.1)]);
        let ecr = ecr_at_k(&[p.clone(), p.clone()], &[10, 11, 12, 13], 2, 3).unwrap();
        close(ecr, 0.0, 1e-12);
        // K = V counts every aligned token: mean |S_t| with duplicates
        // collapsing (window [10, 10] is the set {10}).
        let ecr = ecr_at_k(&[p.clone(), p], &[10, 10, 12, 13], 2, v).unwrap();
        close(ecr, 1.5, 1e-12);
    }

    #[test]
    fn ecr_bounds_and_k_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = 19usize;
            let t = rng.gen_range(1..6);
            let probs: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>() + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let len = rng.gen_range(1..12);
            let chain: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
            let r = rng.gen_range(1..5);
            let mut prev = 0.0;
            for k in 1..=v {
                let e = ecr_at_k(&probs, &chain, r, k).unwrap();
                assert!(e >= 0.0 && e <= r as f64, "ECR {e} out of [0, {r}]");
                assert!(e + 1e-12 >= prev, "ECR must be monotone in K");
                prev = e;
            }
        }
    }

    #[test]
    fn neff_direct_values() {
        let (n_eff, top2) = neff_top2(&[0.7, 0.3]);
        close(n_eff, 1.84202, 1e-5);
        close(top2, 3.0 / 7.0, 1e-9);
        // Uniform posterior over M chains.
        let (n_eff, top2) = neff_top2(&[0.25; 4]);
        close(n_eff, 4.0, 1e-12);
        close(top2, 1.0, 1e-12);
    }

    #[test]
    fn path_posterior_symmetry_and_concentration() {
        let v = 19;
        let p = vec![sharp(v, &[(10, 0.6), (11, 0.2)]), sharp(v, &[(12, 0.5), (13, 0.3)])];
        // Identical chains -> uniform posterior, N_eff = M, top2 = 1.
        let chain = vec![10u32, 11, 12, 13];
        let pp =
            path_posterior(&p, &[chain.clone(), chain.clone(), chain.clone()], 2, v, 1.0, 1e-8)
                .unwrap();
        close(pp.n_eff, 3.0, 1e-9);
        close(pp.top2, 1.0, 1e-9);
        for q in &pp.posterior {
            close(*q, 1.0 / 3.0, 1e-9);
        }
        // One chain holds all the mass, the other exactly none: the
        // posterior collapses as ε shrinks.
        let mut q1 = vec![0.0; v];
        q1[10] = 0.5;
        q1[11] = 0.5;
        let mut q2 = vec![0.0; v];
        q2[12] = 0.5;
        q2[13] = 0.5;
        let winner = vec![10u32, 11, 12, 13];
        let loser = vec![1u32, 2, 3, 4];
        let pp = path_posterior(&[q1, q2], &[winner, loser], 2, v, 1.0, 1e-12).unwrap();
        assert!(pp.n_eff < 1.001, "N_eff {} should approach 1", pp.n_eff);
        assert!(pp.top2 < 1e-6);
        // M < 2 rejected.
        assert!(path_posterior(&p, &[chain], 2, v, 1.0, 1e-8).is_err());
    }

    #[test]
    fn posterior_shift_invariance() {
        let v = 19;
        let p = vec![sharp(v, &[(10, 0.6)])];
        let a = vec![10u32, 11];
        let b = vec![12u32, 13];
        let base = path_posterior(&p, &[a, b], 2, v, 1.0, 1e-8).unwrap();
        // Adding a constant to every score leaves the posterior unchanged.
        let shifted: Vec<f64> = base.scores.iter().map(|s| s + 5.0).collect();
        let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = shifted.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let post: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
        for (x, y) in post.iter().zip(&base.posterior) {
            close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn effective_rank_cases() {
        let eye4 = Tensor::new(vec![4, 4], {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 3.0;
            }
            d
        })
        .unwrap();
        close(effective_rank(&eye4).unwrap(), 4.0, 1e-9);

        // Rank-1 matrix.
        let rank1 = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        close(effective_rank(&rank1).unwrap(), 1.0, 1e-9);

        // Singular values [2, 1, 1] -> exp(H([0.5, 0.25, 0.25])) = 2√2.
        let diag =
            Tensor::new(vec![3, 3], vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        close(effective_rank(&diag).unwrap(), 2.0 * 2.0_f64.sqrt(), 1e-9);
        close(effective_rank(&diag).unwrap(), 2.82843, 1e-5);

        let zero = Tensor::zeros(vec![3, 3]);
        assert!(effective_rank(&zero).is_err());
    }

    #[test]
    fn effective_rank_bounded_by_algebraic_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..5 * 7).map(|_| rng.gen::<f64>() - 0.5).collect();
        let t = Tensor::new(vec![5, 7], data).unwrap();
        let er = effective_rank(&t).unwrap();
        assert!(er <= 5.0 + 1e-9);
        assert!(er >= 1.0);
    }

    fn gaussian_samples(n: usize, d: usize, mean: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mean, 1.0).unwrap();
        Tensor::new(vec![n, d], (0..n * d).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn fid_identity_and_gaussian_offset() {
        let a = gaussian_samples(500, 3, 0.0, 1);
        close(fid(&a, &a).unwrap(), 0.0, 1e-8);

        // 1-D unit Gaussians with mean offset 1 -> FID ≈ 1.
        let x = gaussian_samples(10_000, 1, 0.0, 2);
        let y = gaussian_samples(10_000, 1, 1.0, 3);
        let f = fid(&x, &y).unwrap();
        close(f, 1.0, 0.05);

        // Symmetry in the arguments.
        let g = fid(&y, &x).unwrap();
        close(f, g, 1e-9);
    }

    #[test]
    fn fid_regularizes_small_samples() {
        // Fewer samples than dimensions still yields a finite value.
        let a = gaussian_samples(5, 8, 0.0, 4);
        let b = gaussian_samples(6, 8, 2.0, 5);
        let f = fid(&a, &b).unwrap();
        assert!(f.is_finite() && f > 0.0);
        close(fid(&a, &a).unwrap(), 0.0, 1e-8);
        // Dimension mismatch rejected.
        let c = gaussian_samples(5, 3, 0.0, 6);
        assert!(fid(&a, &c).is_err());
    }

    #[test]
    fn mmd2_identity_separation_permutation() {
        let a = gaussian_samples(60, 2, 0.0, 7);
        close(mmd2(&a, &a).unwrap(), 0.0, 1e-12);

        // Well-separated clusters on a fixed seed.
        let b = gaussian_samples(60, 2, 8.0, 8);
        let m = mmd2(&a, &b).unwrap();
        assert!(m > 0.5, "separated clusters should give MMD² > 0.5, got {m}");

        // Permutation invariance: shuffling rows changes nothing.
        let mut rows: Vec<Vec<f64>> =
            (0..60).map(|i| a.data()[i * 2..(i + 1) * 2].to_vec()).collect();
        use rand::seq::SliceRandom;
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let shuffled = Tensor::new(vec![60, 2], rows.concat()).unwrap();
        let m1 = mmd2(&a, &b).unwrap();
        let m2 = mmd2(&shuffled, &b).unwrap();
        close(m1, m2, 1e-12);
    }

    #[test]
    fn prelim_report_smoke_and_roundtrip() {
        use crate::model::{init_params, ModelConfig};
        use crate::synthdata::{gen_problem, ValueRange};
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 12, vocab: 19, max_seq: 48 };
        let params = init_params(cfg, 3).unwrap();
        let tok = Tokenizer::default();
        let problems: Vec<Problem> =
            (0..4).map(|i| gen_problem(i, 2, ValueRange::default())).collect();
        let (report, points) = hidden_vs_embedding_report(&params, &problems, &tok, 0).unwrap();
        // An untrained random model still yields a finite report.
        assert!(report.fid_hidden_vs_embed.is_finite());
        assert!(report.mmd2_hidden_vs_embed.is_finite());
        assert!(report.mean_cosine_cross.is_finite());
        assert!(report.effective_rank_embeddings > 0.0);
        // Self-comparison baselines sit at zero.
        close(report.fid_embed_self, 0.0, 1e-8);
        close(report.mmd2_embed_self, 0.0, 1e-12);
        assert_eq!(points.len(), report.n_hidden.min(1024) + cfg.vocab);
        // Fields survive the JSON export.
        let json = serde_json::to_string(&report).unwrap();
        let back: PrelimReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_hidden, report.n_hidden);
        close(back.fid_hidden_vs_embed, report.fid_hidden_vs_embed, 0.0);
    }

    #[test]
    fn median_and_csv_writers() {
        close(median(&[3.0, 1.0, 2.0]), 2.0, 1e-12);
        close(median(&[4.0, 1.0, 2.0, 3.0]), 2.5, 1e-12);
        let dir = tempfile::tempdir().unwrap();
        write_ecr_csv(&dir.path().join("e.csv"), &[("a".into(), 1.5)]).unwrap();
        write_neff_csv(&dir.path().join("n.csv"), &[("a".into(), 2.0, 0.5)]).unwrap();
        write_scatter_csv(
            &dir.path().join("s.csv"),
            &[ScatterPoint { x: 0.0, y: 1.0, kind: "hidden".into() }],
        )
        .unwrap();
        let e = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert!(e.starts_with("id,ecr\n"));
    }
}
