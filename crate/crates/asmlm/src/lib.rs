//! Language-model machinery for X86-64-style assembly code.
//!
//! The pipeline, end to end:
//!
//! 1. [`normalize`]: parse objdump-style disassembly and normalize it into
//!    instruction-labeled assembly functions (`[INST-k]` appended per
//!    instruction).
//! 2. [`corpus`]: produce paired (source, O0-O3 assembly) records, either
//!    from a real compiler/disassembler toolchain or from a deterministic
//!    synthetic generator, and persist them as JSONL.
//! 3. [`tokenizer`]: word-level vocabulary and encoding of mixed
//!    text/source/assembly chunk sequences, with per-token structural
//!    metadata.
//! 4. [`mask`]: hierarchical attention masks built from that metadata
//!    (intra-instruction, preceding-instruction, inter-instruction), plus
//!    plain causal masks.
//! 5. [`model`]: a small decoder-only transformer with per-head mask modes,
//!    manual backward pass, embedding extraction and nucleus sampling.
//! 6. [`objectives`]: language-modeling, functionality/optimization
//!    contrastive, decompilation and similarity losses with analytic
//!    gradients.
//! 7. [`trainer`]: staged training loop (AdamW, warmup + cosine decay).
//! 8. [`eval`]: Pass@k estimation, Recall@1 pool retrieval, embedding
//!    export and attention-distribution reports.

pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod normalize;
pub mod objectives;
pub mod pseudo;
pub mod tokenizer;
pub mod trainer;
