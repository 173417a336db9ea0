//! Evaluation harnesses: Pass@k estimation, functional judging of
//! decompilation candidates, Recall@1 pool retrieval, embedding export, and
//! attention-distribution statistics.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::corpus::FunctionRecord;
use crate::model::{
    embed_assembly, embed_source, forward, EmbeddingVector, ModelError, ModelParams,
};
use crate::objectives::Form;
use crate::pseudo::{self, Interpreter, PseudoError};
use crate::tokenizer::{TokenSequence, TokenizerConfig, Vocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {0} exceeds the number of samples n = {1}")]
    KExceedsN(usize, usize),
    #[error("judge exhausted its step budget of {0}")]
    JudgeTimeout(usize),
    #[error("retrieval pool needs at least 2 candidates, got {0}")]
    PoolTooSmall(usize),
    #[error("query {0} positive index {1} is out of range")]
    BadPositive(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sampling outcome of one task: `n` draws, `c` judged correct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleOutcome {
    pub task_id: String,
    pub n: usize,
    pub c: usize,
}

impl SampleOutcome {
    pub fn new(task_id: impl Into<String>, n: usize, c: usize) -> Self {
        assert!(c <= n, "correct count cannot exceed sample count");
        Self { task_id: task_id.into(), n, c }
    }
}

/// Unbiased Pass@k estimate `1 - C(n-c, k) / C(n, k)`, computed with the
/// overflow-safe running product.
pub fn pass_at_k(outcome: &SampleOutcome, k: usize) -> Result<f64, EvalError> {
    let (n, c) = (outcome.n, outcome.c);
    if k > n {
        return Err(EvalError::KExceedsN(k, n));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut prod = 1.0f64;
    for i in 0..k {
        prod *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - prod)
}

/// One execution test: argument tuple and expected function value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestVector {
    pub args: Vec<i64>,
    pub expected: i64,
}

/// Builds test vectors by running the ground-truth source on deterministic
/// pseudo-random inputs.
pub fn make_test_vectors(
    ground_truth: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<TestVector>, PseudoError> {
    use rand::{Rng, SeedableRng};
    let f = pseudo::parse_source(ground_truth)?;
    let interp = Interpreter::new(100_000);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let args: Vec<i64> = (0..f.params.len()).map(|_| rng.random_range(-50..50)).collect();
        let expected = interp.run(&f, &args)?;
        out.push(TestVector { args, expected });
    }
    Ok(out)
}

/// Judges a decompilation candidate by executing it on the test vectors.
/// Candidates that fail to parse or run are incorrect, not errors; only an
/// exhausted step budget is reported as a failure of the judge itself.
pub fn functional_judge(
    candidate_source: &str,
    vectors: &[TestVector],
    step_budget: usize,
) -> Result<bool, EvalError> {
    let Ok(f) = pseudo::parse_source(candidate_source) else {
        return Ok(false);
    };
    let interp = Interpreter::new(step_budget);
    for v in vectors {
        match interp.run(&f, &v.args) {
            Ok(value) if value == v.expected => {}
            Ok(_) => return Ok(false),
            Err(PseudoError::BudgetExhausted(b)) => return Err(EvalError::JudgeTimeout(b)),
            Err(_) => return Ok(false),
        }
    }
    Ok(true)
}

/// A retrieval pool: queries in one form, K candidates in another, one
/// positive candidate per query.
#[derive(Debug, Clone)]
pub struct RetrievalPool {
    pub queries: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
    pub positive: Vec<usize>,
}

impl RetrievalPool {
    pub fn new(
        queries: Vec<Vec<f64>>,
        candidates: Vec<Vec<f64>>,
        positive: Vec<usize>,
    ) -> Result<Self, EvalError> {
        if candidates.len() < 2 {
            return Err(EvalError::PoolTooSmall(candidates.len()));
        }
        assert_eq!(queries.len(), positive.len(), "one positive per query");
        for (q, &p) in positive.iter().enumerate() {
            if p >= candidates.len() {
                return Err(EvalError::BadPositive(q, p));
            }
        }
        Ok(Self { queries, candidates, positive })
    }
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of queries whose positive candidate is the strict unique
/// cosine-similarity maximum. Embeddings are l2-normalized first, so the
/// ranking matches the l2-distance order used in training; ties count as
/// misses.
pub fn recall_at_1(pool: &RetrievalPool) -> f64 {
    if pool.queries.is_empty() {
        return 0.0;
    }
    let cands: Vec<Vec<f64>> = pool.candidates.iter().map(|c| l2_normalize(c)).collect();
    let mut hits = 0usize;
    for (q, &pos) in pool.queries.iter().zip(&pool.positive) {
        let qn = l2_normalize(q);
        let pos_sim = dot(&qn, &cands[pos]);
        let strict_max = cands
            .iter()
            .enumerate()
            .all(|(j, c)| j == pos || dot(&qn, c) < pos_sim);
        if strict_max {
            hits += 1;
        }
    }
    hits as f64 / pool.queries.len() as f64
}

/// Computes the requested form embeddings for every record.
pub fn record_embeddings(
    params: &ModelParams,
    vocab: &Vocab,
    tok_cfg: &TokenizerConfig,
    records: &[FunctionRecord],
    forms: &[Form],
) -> Result<Vec<EmbeddingVector>, EvalError> {
    let mut out = Vec::new();
    for record in records {
        for form in forms {
            match form {
                Form::Source => {
                    if record.source_text.trim().is_empty() {
                        continue;
                    }
                    out.push(embed_source(
                        params,
                        vocab,
                        tok_cfg,
                        &record.source_id,
                        &record.source_text,
                    )?);
                }
                Form::Asm(level) => {
                    if let Some(f) = record.asm.get(level) {
                        out.push(embed_assembly(params, vocab, tok_cfg, f)?);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes embeddings as CSV rows `source_id,form,v0,...`; returns the row
/// count.
pub fn export_embeddings(
    params: &ModelParams,
    vocab: &Vocab,
    tok_cfg: &TokenizerConfig,
    records: &[FunctionRecord],
    forms: &[Form],
    path: &Path,
) -> Result<usize, EvalError> {
    let embeddings = record_embeddings(params, vocab, tok_cfg, records, forms)?;
    let mut out = String::from("source_id,form");
    let d = embeddings.first().map_or(0, |e| e.values.len());
    for i in 0..d {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for e in &embeddings {
        out.push_str(&e.source_id);
        out.push(',');
        out.push_str(e.form.as_str());
        for v in &e.values {
            out.push_str(&format!(",{v:.12e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(embeddings.len())
}

/// Attention statistics of one head.
#[derive(Debug, Clone)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub hierarchical: bool,
    /// Fraction of total attention mass landing in each segment, in segment
    /// order; sums to one.
    pub segment_mass: Vec<f64>,
    /// Largest fraction of one query's mass spent outside its own segment.
    pub max_outside_own_segment: f64,
    /// True when some query spreads more than 30% of its mass outside its
    /// own segment.
    pub broad: bool,
    /// Total probability mass observed at mask-disallowed positions.
    pub disallowed_mass: f64,
    /// Worst absolute deviation of a row sum from one.
    pub max_row_sum_err: f64,
}

/// Per-head attention-distribution report over one sequence.
#[derive(Debug, Clone)]
pub struct AttentionReport {
    pub heads: Vec<HeadReport>,
    pub n_segments: usize,
}

impl AttentionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,head,mode,max_outside_own_segment,broad,disallowed_mass,max_row_sum_err",
        );
        for s in 0..self.n_segments {
            out.push_str(&format!(",seg{s}"));
        }
        out.push('\n');
        for h in &self.heads {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.3e},{:.3e}",
                h.layer,
                h.head,
                if h.hierarchical { "hierarchical" } else { "standard" },
                h.max_outside_own_segment,
                h.broad,
                h.disallowed_mass,
                h.max_row_sum_err
            ));
            for m in &h.segment_mass {
                out.push_str(&format!(",{m:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Segment id per position: one segment per assembly instruction, one per
/// non-assembly chunk.
fn segment_ids(seq: &TokenSequence) -> (Vec<usize>, usize) {
    let mut ids = Vec::with_capacity(seq.len());
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for m in &seq.meta {
        let key = (m.chunk_index, m.instr_index);
        let next = seen.len();
        let id = *seen.entry(key).or_insert(next);
        ids.push(id);
    }
    (ids, seen.len())
}

/// Runs the model and aggregates per-head attention mass by instruction
/// segment, flagging broad attention (a query spending more than 30% of its
/// mass outside its own segment).
pub fn attention_report(
    params: &ModelParams,
    seq: &TokenSequence,
) -> Result<AttentionReport, EvalError> {
    let pass = forward(params, seq)?;
    let (seg, n_segments) = segment_ids(seq);
    let n = seq.len();
    let cfg = &params.config;
    let mut heads = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            let probs = pass.attention_probs(layer, head);
            let mask = pass.mask_for_head(head, cfg);
            let mut segment_mass = vec![0.0; n_segments];
            let mut max_outside = 0.0f64;
            let mut disallowed = 0.0;
            let mut max_row_err = 0.0f64;
            for q in 0..n {
                let mut row_sum = 0.0;
                let mut own = 0.0;
                for k in 0..n {
                    let p = probs.at(q, k);
                    row_sum += p;
                    segment_mass[seg[k]] += p;
                    if seg[k] == seg[q] {
                        own += p;
                    }
                    if !mask.allowed(q, k) {
                        disallowed += p;
                    }
                }
                max_row_err = max_row_err.max((row_sum - 1.0).abs());
                max_outside = max_outside.max(1.0 - own);
            }
            let total: f64 = segment_mass.iter().sum();
            for m in &mut segment_mass {
                *m /= total;
            }
            heads.push(HeadReport {
                layer,
                head,
                hierarchical: head < cfg.hierarchical_head_count,
                segment_mass,
                max_outside_own_segment: max_outside,
                broad: max_outside > 0.30,
                disallowed_mass: disallowed,
                max_row_sum_err: max_row_err,
            });
        }
    }
    Ok(AttentionReport { heads, n_segments })
}

/// Pass@k results arranged like the decompilation result tables: one row
/// per benchmark, one column per optimization level plus the average.
pub fn passk_table_csv(rows: &[(String, BTreeMap<crate::normalize::OptLevel, f64>)]) -> String {
    let mut out = String::from("benchmark,O0,O1,O2,O3,avg\n");
    for (name, by_level) in rows {
        out.push_str(name);
        let mut sum = 0.0;
        let mut count = 0usize;
        for level in crate::normalize::OptLevel::ALL {
            match by_level.get(&level) {
                Some(v) => {
                    out.push_str(&format!(",{v:.4}"));
                    sum += v;
                    count += 1;
                }
                None => out.push_str(","),
            }
        }
        if count > 0 {
            out.push_str(&format!(",{:.4}", sum / count as f64));
        } else {
            out.push(',');
        }
        out.push('\n');
    }
    out
}

/// Recall@1 results: one row per benchmark, one column per pool size.
pub fn recall_table_csv(ks: &[usize], rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("benchmark");
    for k in ks {
        out.push_str(&format!(",K{k}"));
    }
    out.push('\n');
    for (name, values) in rows {
        out.push_str(name);
        for v in values {
            out.push_str(&format!(",{v:.4}"));
        }
        out.push('\n');
    }
    out
}
