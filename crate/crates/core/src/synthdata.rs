//! Deterministic generator of desk-scale reasoning problems with explicit
//! chains, a character-level tokenizer over a closed vocabulary, and the
//! multi-chain variant corpus used for path-parallelism analysis.
//!
//! Problems are chained left-to-right arithmetic over `+` and `*` with small
//! values (capped below 100 by default) so chains stay short and a small
//! model can master them. A character-level vocabulary keeps V tiny, which
//! makes full-vocabulary probability vectors and the trace metrics cheap and
//! exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmask::Markers;

// ---- tokenizer -----------------------------------------------------------

const ALPHABET: &str = "0123456789+*=;";
const SPECIALS: [&str; 5] = ["<pad>", "<eos>", "<think>", "</think>", "<slot>"];

/// Character-level tokenizer over a closed alphabet plus reserved markers.
/// The vocabulary is fixed given the same alphabet configuration.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    alphabet: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { alphabet: ALPHABET.chars().collect() }
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.alphabet.len()
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn eos(&self) -> u32 {
        1
    }

    pub fn think_open(&self) -> u32 {
        2
    }

    pub fn think_close(&self) -> u32 {
        3
    }

    pub fn slot(&self) -> u32 {
        4
    }

    pub fn markers(&self) -> Markers {
        Markers {
            think_open: self.think_open(),
            think_close: self.think_close(),
            slot: self.slot(),
            eos: self.eos(),
            pad: self.pad(),
        }
    }

    fn char_id(&self, c: char) -> Option<u32> {
        self.alphabet.iter().position(|&a| a == c).map(|i| (SPECIALS.len() + i) as u32)
    }

    /// Tokenize text over the closed alphabet; reserved markers such as
    /// `<think>` map to their single id.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            for (id, marker) in SPECIALS.iter().enumerate() {
                if let Some(tail) = rest.strip_prefix(marker) {
                    out.push(id as u32);
                    rest = tail;
                    continue 'outer;
                }
            }
            let c = rest.chars().next().expect("nonempty");
            let id = self
                .char_id(c)
                .ok_or_else(|| Error::invalid(format!("character {c:?} not in alphabet")))?;
            out.push(id);
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &t in tokens {
            let t = t as usize;
            if t < SPECIALS.len() {
                out.push_str(SPECIALS[t]);
            } else if t - SPECIALS.len() < self.alphabet.len() {
                out.push(self.alphabet[t - SPECIALS.len()]);
            } else {
                return Err(Error::invalid(format!("token id {t} out of vocabulary")));
            }
        }
        Ok(out)
    }
}

// ---- problems ------------------------------------------------------------

/// Operand and running-value bounds for the generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ValueRange {
    pub operand_min: u32,
    pub operand_max: u32,
    /// Hard cap on every intermediate value; steps that would exceed it are
    /// re-planned (`*` falls back to `+`, `+` shrinks its operand).
    pub value_cap: u32,
}

impl Default for ValueRange {
    fn default() -> Self {
        ValueRange { operand_min: 2, operand_max: 9, value_cap: 99 }
    }
}

/// A reasoning problem: evaluating the chain reproduces the answer, and the
/// answer is the left-to-right evaluation of the question.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub chain: String,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alt_chains: Option<Vec<String>>,
    pub seed: u64,
}

/// A problem together with M ≥ 2 distinct chains that all yield its answer.
#[derive(Debug, Clone)]
pub struct MultiChainProblem {
    pub problem: Problem,
    /// All retained chains; the original accumulation order comes first.
    pub chains: Vec<String>,
}

impl MultiChainProblem {
    pub fn m(&self) -> usize {
        self.chains.len()
    }

    pub fn from_problem(p: &Problem) -> Option<MultiChainProblem> {
        let chains = p.alt_chains.clone()?;
        if chains.len() < 2 {
            return None;
        }
        Some(MultiChainProblem { problem: p.clone(), chains })
    }
}

/// Deterministic problem generator: `n_steps` chained operations over
/// `+`/`*`, each intermediate equality spelled out in the chain.
pub fn gen_problem(seed: u64, n_steps: usize, range: ValueRange) -> Problem {
    gen_problem_with(seed, n_steps, range, 0.35)
}

/// Generator with explicit multiplication probability (0.0 gives pure sums,
/// which admit reorderable steps for the multi-chain corpus).
pub fn gen_problem_with(seed: u64, n_steps: usize, range: ValueRange, mul_prob: f64) -> Problem {
    assert!(n_steps >= 1, "need at least one step");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = range.operand_min.max(1);
    let hi = range.operand_max.max(lo);
    let cap = range.value_cap.max(hi);

    let start = rng.gen_range(lo..=hi);
    let mut question = start.to_string();
    let mut chain = String::new();
    let mut value = start;
    for k in 0..n_steps {
        let want_mul = mul_prob > 0.0 && rng.gen_bool(mul_prob);
        let (op, operand) = if want_mul {
            let max_b = if value == 0 { hi } else { (cap / value).min(hi) };
            if max_b >= lo {
                ('*', rng.gen_range(lo..=max_b))
            } else {
                pick_add(&mut rng, value, lo, hi, cap)
            }
        } else {
            pick_add(&mut rng, value, lo, hi, cap)
        };
        let next = match op {
            '*' => value * operand,
            _ => value + operand,
        };
        if k > 0 {
            chain.push(';');
        }
        chain.push_str(&format!("{value}{op}{operand}={next}"));
        question.push(op);
        question.push_str(&operand.to_string());
        value = next;
    }
    Problem {
        id: format!("p{seed:016x}"),
        question,
        chain,
        answer: value.to_string(),
        alt_chains: None,
        seed,
    }
}

fn pick_add(rng: &mut ChaCha8Rng, value: u32, lo: u32, hi: u32, cap: u32) -> (char, u32) {
    let room = cap.saturating_sub(value);
    if room == 0 {
        // Value is pinned at the cap; a *1 step keeps the chain valid.
        return ('*', 1);
    }
    let max_b = room.min(hi);
    let min_b = lo.min(max_b);
    ('+', rng.gen_range(min_b..=max_b))
}

/// Left-to-right evaluation of a question string — the independent answer
/// oracle (no operator precedence, matching the chain semantics).
pub fn eval_question(question: &str) -> Result<u64> {
    let mut value: Option<u64> = None;
    let mut op = '+';
    let mut num = String::new();
    for c in question.chars().chain(std::iter::once('\0')) {
        if c.is_ascii_digit() {
            num.push(c);
            continue;
        }
        if num.is_empty() {
            return Err(Error::Malformed(format!("dangling operator in {question:?}")));
        }
        let n: u64 = num.parse().map_err(|_| Error::Malformed("bad number".into()))?;
        num.clear();
        value = Some(match (value, op) {
            (None, _) => n,
            (Some(v), '+') => v + n,
            (Some(v), '*') => v * n,
            _ => return Err(Error::Malformed(format!("bad operator {op:?}"))),
        });
        op = c;
        if c == '\0' {
            break;
        }
        if c != '+' && c != '*' {
            return Err(Error::Malformed(format!("bad operator {c:?} in {question:?}")));
        }
    }
    value.ok_or_else(|| Error::Malformed("empty question".into()))
}

/// Check that every chain step is a correct equality, consecutive steps
/// chain their results, and the final result equals the answer.
pub fn chain_is_valid(chain: &str, answer: &str) -> bool {
    let mut prev: Option<u64> = None;
    for step in chain.split(';') {
        let Some((lhs, rhs)) = step.split_once('=') else { return false };
        let Ok(expect) = rhs.parse::<u64>() else { return false };
        let Ok(got) = eval_question(lhs) else { return false };
        if got != expect {
            return false;
        }
        if let Some(p) = prev {
            // The step must start from the previous result.
            let first: String = lhs.chars().take_while(|c| c.is_ascii_digit()).collect();
            if first.parse::<u64>().ok() != Some(p) {
                return false;
            }
        }
        prev = Some(expect);
    }
    prev.map(|v| v.to_string()).as_deref() == Some(answer)
}

// ---- multi-chain construction --------------------------------------------

/// Levenshtein distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit similarity: 1 − levenshtein/max(len).
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let denom = a.chars().count().max(b.chars().count());
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / denom as f64
}

/// Similarity threshold at or above which two chains count as duplicates.
pub const SIMILARITY_CUTOFF: f64 = 0.9;

/// Build up to `m` alternative accumulation orders for a pure-sum problem.
///
/// Orders are enumerated with the first pair canonicalized (a+b, a ≤ b), so
/// commuted first additions are not counted twice. Every chain is verified
/// against the answer and the retained set is similarity-filtered pairwise
/// below [`SIMILARITY_CUTOFF`]. Returns an error if the problem has
/// non-reorderable structure, `None` if fewer than 2 chains survive.
pub fn gen_multichain(problem: &Problem, m: usize) -> Result<Option<MultiChainProblem>> {
    if problem.question.contains('*') {
        return Err(Error::invalid("multi-chain construction needs a pure sum"));
    }
    let terms: Vec<u64> = problem
        .question
        .split('+')
        .map(|s| s.parse::<u64>().map_err(|_| Error::Malformed("bad term".into())))
        .collect::<Result<_>>()?;
    if terms.len() < 2 {
        return Err(Error::invalid("need at least two terms"));
    }
    let answer: u64 = terms.iter().sum();

    let mut kept: Vec<String> = Vec::new();
    // The original order first, then canonical permutations.
    let mut candidates = vec![render_sum_chain(&terms)];
    permutations(&terms, &mut |perm| {
        if perm[0] <= perm[1] {
            candidates.push(render_sum_chain(perm));
        }
    });
    for chain in candidates {
        if kept.len() >= m {
            break;
        }
        debug_assert!(chain_is_valid(&chain, &answer.to_string()));
        if kept.iter().any(|k| k == &chain || edit_similarity(k, &chain) >= SIMILARITY_CUTOFF) {
            continue;
        }
        kept.push(chain);
    }
    if kept.len() < 2 {
        return Ok(None);
    }
    let mut problem = problem.clone();
    problem.alt_chains = Some(kept.clone());
    Ok(Some(MultiChainProblem { problem, chains: kept }))
}

fn render_sum_chain(terms: &[u64]) -> String {
    let mut acc = terms[0];
    let mut out = String::new();
    for (k, &t) in terms[1..].iter().enumerate() {
        if k > 0 {
            out.push(';');
        }
        let next = acc + t;
        out.push_str(&format!("{acc}+{t}={next}"));
        acc = next;
    }
    out
}

fn permutations(items: &[u64], visit: &mut impl FnMut(&[u64])) {
    let mut buf = items.to_vec();
    let n = buf.len();
    permute_rec(&mut buf, 0, n, visit);
}

fn permute_rec(buf: &mut [u64], k: usize, n: usize, visit: &mut impl FnMut(&[u64])) {
    if k == n {
        visit(buf);
        return;
    }
    for i in k..n {
        buf.swap(k, i);
        permute_rec(buf, k + 1, n, visit);
        buf.swap(k, i);
    }
}

// ---- corpus --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub n: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    pub range: ValueRange,
    pub seed: u64,
    /// When set, generate pure-sum problems and attach up to this many
    /// alternative chains to each.
    pub multichain: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n: usize,
    pub vocab_size: usize,
    pub mean_chain_chars: f64,
    /// For multi-chain corpora: how many problems kept ≥ 2 chains.
    pub n_multichain: usize,
}

/// Generate `spec.n` problems with unique question strings.
pub fn generate_corpus(spec: &GenSpec) -> Result<(Vec<Problem>, CorpusStats)> {
    if spec.n == 0 || spec.steps_min < 1 || spec.steps_max < spec.steps_min {
        return Err(Error::invalid("bad corpus spec"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut problems = Vec::with_capacity(spec.n);
    let mut counter: u64 = 0;
    let mut chain_chars = 0usize;
    let mut n_multichain = 0usize;
    let mul_prob = if spec.multichain.is_some() { 0.0 } else { 0.35 };
    while problems.len() < spec.n {
        let sub_seed = spec
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(counter.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ counter);
        let mut steps_rng = ChaCha8Rng::seed_from_u64(sub_seed ^ 0x5555);
        let n_steps = steps_rng.gen_range(spec.steps_min..=spec.steps_max);
        let mut p = gen_problem_with(sub_seed, n_steps, spec.range, mul_prob);
        counter += 1;
        if counter > (spec.n as u64) * 1000 {
            return Err(Error::invalid("could not generate enough unique problems"));
        }
        if !seen.insert(p.question.clone()) {
            continue;
        }
        if let Some(m) = spec.multichain {
            match gen_multichain(&p, m)? {
                Some(mc) => {
                    p = mc.problem;
                    n_multichain += 1;
                }
                None => continue, // flagged: excluded from the multi-chain corpus
            }
        }
        p.id = format!("p{:06}", problems.len());
        chain_chars += p.chain.chars().count();
        problems.push(p);
    }
    let stats = CorpusStats {
        n: problems.len(),
        vocab_size: Tokenizer::default().vocab_size(),
        mean_chain_chars: chain_chars as f64 / problems.len() as f64,
        n_multichain,
    };
    Ok((problems, stats))
}

/// Deterministic split, disjoint by question string (questions are unique
/// within a corpus by construction).
pub fn split_corpus(
    problems: &[Problem],
    test_frac: f64,
    seed: u64,
) -> (Vec<Problem>, Vec<Problem>) {
    let mut idx: Vec<usize> = (0..problems.len()).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((problems.len() as f64) * test_frac).round() as usize;
    let (test_idx, train_idx) = idx.split_at(n_test.min(problems.len()));
    let mut train: Vec<Problem> = train_idx.iter().map(|&i| problems[i].clone()).collect();
    let mut test: Vec<Problem> = test_idx.iter().map(|&i| problems[i].clone()).collect();
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    (train, test)
}

pub fn write_jsonl(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in problems {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Problem>> {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_roundtrip_and_specials() {
        let tok = Tokenizer::default();
        let text = "12+3=15;<think>4*5</think><slot><eos>";
        let ids = tok.tokenize(text).unwrap();
        assert_eq!(tok.detokenize(&ids).unwrap(), text);
        assert_eq!(tok.tokenize("<think>").unwrap(), vec![tok.think_open()]);
        assert!(tok.vocab_size() <= 64);
        assert_eq!(tok.vocab_size(), Tokenizer::default().vocab_size());
        assert!(tok.tokenize("abc").is_err());
    }

    #[test]
    fn gen_problem_is_deterministic_and_valid() {
        let r = ValueRange::default();
        let a = gen_problem(42, 3, r);
        let b = gen_problem(42, 3, r);
        assert_eq!(a, b);
        assert!(chain_is_valid(&a.chain, &a.answer), "{a:?}");
        assert_eq!(eval_question(&a.question).unwrap().to_string(), a.answer);
        assert_eq!(a.chain.split(';').count(), 3);
    }

    #[test]
    fn single_step_chain_is_one_equality() {
        let p = gen_problem(7, 1, ValueRange::default());
        assert_eq!(p.chain.split(';').count(), 1);
        let (_, rhs) = p.chain.split_once('=').unwrap();
        assert_eq!(rhs, p.answer);
    }

    #[test]
    fn values_respect_cap() {
        for seed in 0..200 {
            let p = gen_problem(seed, 5, ValueRange::default());
            for step in p.chain.split(';') {
                let (_, rhs) = step.split_once('=').unwrap();
                assert!(rhs.parse::<u32>().unwrap() <= 99, "{p:?}");
            }
        }
    }

    #[test]
    fn multichain_of_three_term_sum() {
        // Sum of {2,3,4}: accumulation orders (2,3)+4, (2,4)+3, (3,4)+2.
        let p = Problem {
            id: "t".into(),
            question: "2+3+4".into(),
            chain: "2+3=5;5+4=9".into(),
            answer: "9".into(),
            alt_chains: None,
            seed: 0,
        };
        let mc = gen_multichain(&p, 10).unwrap().unwrap();
        assert_eq!(mc.m(), 3);
        for chain in &mc.chains {
            assert!(chain_is_valid(chain, "9"), "{chain}");
        }
        assert_eq!(mc.chains[0], "2+3=5;5+4=9");
    }

    #[test]
    fn two_term_sum_is_excluded() {
        let p = Problem {
            id: "t".into(),
            question: "3+4".into(),
            chain: "3+4=7".into(),
            answer: "7".into(),
            alt_chains: None,
            seed: 0,
        };
        assert!(gen_multichain(&p, 10).unwrap().is_none());
    }

    #[test]
    fn multichain_rejects_products() {
        let p = gen_problem_with(1, 3, ValueRange::default(), 1.0);
        assert!(p.question.contains('*'));
        assert!(gen_multichain(&p, 4).is_err());
    }

    #[test]
    fn similarity_filter_holds_pairwise() {
        let spec = GenSpec {
            n: 30,
            steps_min: 2,
            steps_max: 4,
            range: ValueRange::default(),
            seed: 5,
            multichain: Some(6),
        };
        let (problems, stats) = generate_corpus(&spec).unwrap();
        assert_eq!(stats.n_multichain, 30);
        for p in &problems {
            let chains = p.alt_chains.as_ref().unwrap();
            assert!(chains.len() >= 2);
            for i in 0..chains.len() {
                assert!(chain_is_valid(&chains[i], &p.answer));
                for j in (i + 1)..chains.len() {
                    assert!(
                        edit_similarity(&chains[i], &chains[j]) < SIMILARITY_CUTOFF,
                        "{} ~ {}",
                        chains[i],
                        chains[j]
                    );
                }
            }
        }
    }

    #[test]
    fn corpus_unique_and_split_disjoint() {
        let spec = GenSpec {
            n: 100,
            steps_min: 2,
            steps_max: 5,
            range: ValueRange::default(),
            seed: 11,
            multichain: None,
        };
        let (problems, stats) = generate_corpus(&spec).unwrap();
        assert_eq!(stats.n, 100);
        let mut qs: Vec<&str> = problems.iter().map(|p| p.question.as_str()).collect();
        qs.sort_unstable();
        qs.dedup();
        assert_eq!(qs.len(), 100);
        let (train, test) = split_corpus(&problems, 0.2, 3);
        assert_eq!(train.len() + test.len(), 100);
        assert_eq!(test.len(), 20);
        for t in &test {
            assert!(!train.iter().any(|p| p.question == t.question));
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = std::env::temp_dir().join(format!("latentlab-sd-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("probs.jsonl");
        let (problems, _) = generate_corpus(&GenSpec {
            n: 5,
            steps_min: 2,
            steps_max: 3,
            range: ValueRange::default(),
            seed: 1,
            multichain: Some(4),
        })
        .unwrap();
        write_jsonl(&path, &problems).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(problems, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn every_emitted_chain_evaluates_to_its_answer() {
        let spec = GenSpec {
            n: 50,
            steps_min: 2,
            steps_max: 5,
            range: ValueRange::default(),
            seed: 99,
            multichain: None,
        };
        let (problems, _) = generate_corpus(&spec).unwrap();
        for p in &problems {
            assert!(chain_is_valid(&p.chain, &p.answer));
        }
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("abc", "axc"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert!((edit_similarity("abcd", "abcd") - 1.0).abs() < 1e-12);
        assert!((edit_similarity("abcd", "abce") - 0.75).abs() < 1e-12);
    }
}
