//! Finite-difference verification of every training objective's analytic
//! parameter gradients. The numerical side re-evaluates the loss through
//! the forward pass only.

use asmlm::corpus::{filter_for_cl, generate_synthetic, FunctionRecord, SyntheticSpec};
use asmlm::gradcheck::{max_relative_error, numerical_gradients};
use asmlm::model::{ModelConfig, ModelParams};
use asmlm::normalize::OptLevel;
use asmlm::objectives::{
    bcd_loss, bcd_objective, bcsd_objective, cl_objective, lm_objective, Form,
};
use asmlm::tokenizer::{build_vocab, encode, Chunk, TokenizerConfig, Vocab};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

fn setup() -> (Vec<FunctionRecord>, Vocab, TokenizerConfig) {
    let recs = filter_for_cl(generate_synthetic(&SyntheticSpec::new(23, 8, 7)).unwrap());
    assert!(recs.len() >= 2, "need at least two filtered records");
    let cfg = TokenizerConfig { max_instructions: 16, max_seq_len: 96, ..Default::default() };
    let vocab = build_vocab(&recs, &cfg).unwrap();
    (recs, vocab, cfg)
}

fn model(vocab: &Vocab, tied: bool, seed: u64) -> ModelParams {
    let config = ModelConfig {
        vocab_size: vocab.len(),
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_ff: 32,
        max_seq_len: 96,
        hierarchical_head_count: 2,
        tied_output: tied,
    };
    ModelParams::init(config, seed)
}

#[test]
fn lm_gradients_match_finite_differences() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, false, 11);
    // A 12-token mixed sequence: source prefix plus a short assembly chunk.
    let f = recs[0].asm[&OptLevel::O3].clone();
    let mut seq = encode(&[Chunk::Source("fn f ( a ) {".into()), Chunk::Asm(f)], &vocab, &cfg)
        .unwrap();
    seq.append_eos();
    let (_, analytic) = lm_objective(&params, &seq).unwrap();
    let numeric = numerical_gradients(&params, |p| lm_objective(p, &seq).unwrap().0, H);
    let (err, tensor) = max_relative_error(&analytic, &numeric, ATOL);
    assert!(err < TOL, "lm gradient mismatch {err:.3e} in {tensor}");
}

#[test]
fn lm_gradients_match_with_tied_output() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, true, 12);
    let mut seq =
        encode(&[Chunk::Source(recs[1].source_text.clone())], &vocab, &cfg).unwrap();
    seq.append_eos();
    let (_, analytic) = lm_objective(&params, &seq).unwrap();
    let numeric = numerical_gradients(&params, |p| lm_objective(p, &seq).unwrap().0, H);
    let (err, tensor) = max_relative_error(&analytic, &numeric, ATOL);
    assert!(err < TOL, "tied lm gradient mismatch {err:.3e} in {tensor}");
}

#[test]
fn bcd_gradients_match_finite_differences() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, false, 13);
    let asm = recs[0].asm[&OptLevel::O1].clone();
    let src = recs[0].source_text.clone();
    let (_, analytic) = bcd_objective(&params, &asm, &src, &vocab, &cfg).unwrap();
    let numeric =
        numerical_gradients(&params, |p| bcd_loss(p, &asm, &src, &vocab, &cfg).unwrap(), H);
    let (err, tensor) = max_relative_error(&analytic, &numeric, ATOL);
    assert!(err < TOL, "bcd gradient mismatch {err:.3e} in {tensor}");
}

#[test]
fn cl_gradients_match_finite_differences() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, false, 14);
    let refs: Vec<&FunctionRecord> = recs.iter().take(2).collect();
    let pair = (Form::Source, Form::Asm(OptLevel::O0));
    let lambda = 0.1;
    let (_, analytic) = cl_objective(&params, &refs, pair, lambda, &vocab, &cfg).unwrap();
    let numeric = numerical_gradients(
        &params,
        |p| cl_objective(p, &refs, pair, lambda, &vocab, &cfg).unwrap().0.total,
        H,
    );
    let (err, tensor) = max_relative_error(&analytic, &numeric, ATOL);
    assert!(err < TOL, "cl gradient mismatch {err:.3e} in {tensor}");
}

#[test]
fn bcsd_gradients_match_finite_differences() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, false, 15);
    let refs: Vec<&FunctionRecord> = recs.iter().take(3).collect();
    let (_, analytic) =
        bcsd_objective(&params, &refs, OptLevel::O0, OptLevel::O3, &vocab, &cfg).unwrap();
    let numeric = numerical_gradients(
        &params,
        |p| bcsd_objective(p, &refs, OptLevel::O0, OptLevel::O3, &vocab, &cfg).unwrap().0,
        H,
    );
    let (err, tensor) = max_relative_error(&analytic, &numeric, ATOL);
    assert!(err < TOL, "bcsd gradient mismatch {err:.3e} in {tensor}");
}

#[test]
fn zero_upstream_gradient_means_zero_parameter_gradients() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, false, 16);
    let seq = encode(&[Chunk::Source(recs[0].source_text.clone())], &vocab, &cfg).unwrap();
    let pass = asmlm::model::forward(&params, &seq).unwrap();
    let grads = asmlm::model::backward(&params, &pass, None, None);
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn unused_label_embedding_rows_get_zero_gradient() {
    let (recs, vocab, cfg) = setup();
    let params = model(&vocab, false, 17);
    // A source-only sequence never touches the [INST-k] embedding rows.
    let mut seq = encode(&[Chunk::Source(recs[0].source_text.clone())], &vocab, &cfg).unwrap();
    seq.append_eos();
    let (_, grads) = lm_objective(&params, &seq).unwrap();
    for k in 1..=vocab.max_instructions() {
        let row = grads.tok_emb.row(vocab.label_id(k).unwrap() as usize);
        assert!(row.iter().all(|v| *v == 0.0), "label {k} received gradient");
    }
}
