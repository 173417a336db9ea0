//! Word-level vocabulary and chunk encoding.
//!
//! Inputs are sequences of chunks (free text, source code, or a normalized
//! assembly function). Encoding yields token ids plus per-token structural
//! metadata: owning chunk, chunk kind, 1-based instruction index inside
//! assembly chunks, and whether the token is an `[INST-k]` label. The mask
//! builder consumes exactly this metadata.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::corpus::FunctionRecord;
use crate::normalize::{parse_label, AssemblyFunction, OptLevel};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Number of ids reserved before the `[INST-k]` block.
const N_SPECIAL: u32 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("assembly chunk has {0} instructions, vocabulary supports {1}")]
    TooManyInstructions(usize, usize),
    #[error("sequence length {0} exceeds the {1} token limit")]
    SequenceTooLong(usize, usize),
    #[error("vocabulary file is invalid: {0}")]
    BadVocabFile(String),
}

/// Tokenizer knobs. `max_instructions` fixes the size of the reserved
/// `[INST-k]` block and must match the vocabulary it is used with.
#[derive(Debug, Clone)]
pub struct TokenizerConfig {
    pub max_seq_len: usize,
    pub max_instructions: usize,
    pub min_freq: usize,
    /// Content tokens kept per instruction; the label always survives.
    pub max_tokens_per_instruction: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 2048,
            max_instructions: 64,
            min_freq: 1,
            max_tokens_per_instruction: 16,
        }
    }
}

/// Token/id bijection with stable reserved ids: PAD, BOS, EOS, UNK, then
/// `[INST-1]..[INST-M]`, then corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
    max_instructions: usize,
}

impl Vocab {
    fn from_tokens(corpus_tokens: impl IntoIterator<Item = String>, max_instructions: usize) -> Self {
        let mut id_to_token =
            vec![PAD_TOKEN.to_string(), BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for k in 1..=max_instructions {
            id_to_token.push(format!("[INST-{k}]"));
        }
        let reserved: std::collections::BTreeSet<String> = id_to_token.iter().cloned().collect();
        let mut sorted: Vec<String> = corpus_tokens
            .into_iter()
            .filter(|t| !reserved.contains(t) && parse_label(t).is_none())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        id_to_token.append(&mut sorted);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { token_to_id, id_to_token, max_instructions }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn max_instructions(&self) -> usize {
        self.max_instructions
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Reserved id of `[INST-k]` (1-based k).
    pub fn label_id(&self, k: usize) -> Option<u32> {
        (k >= 1 && k <= self.max_instructions).then(|| N_SPECIAL + k as u32 - 1)
    }

    /// True when `id` is inside the reserved `[INST-k]` block.
    pub fn is_label_id(&self, id: u32) -> bool {
        id >= N_SPECIAL && id < N_SPECIAL + self.max_instructions as u32
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> =
            self.token_to_id.iter().map(|(t, i)| (t.as_str(), *i)).collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)
            .map_err(|e| TokenizerError::BadVocabFile(e.to_string()))?;
        let mut id_to_token = vec![String::new(); map.len()];
        for (tok, id) in &map {
            let slot = id_to_token
                .get_mut(*id as usize)
                .ok_or_else(|| TokenizerError::BadVocabFile(format!("id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(TokenizerError::BadVocabFile(format!("duplicate id {id}")));
            }
            *slot = tok.clone();
        }
        for (want, tok) in
            [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].iter().zip(id_to_token.iter())
        {
            if want != tok {
                return Err(TokenizerError::BadVocabFile(format!(
                    "reserved token `{want}` missing or misplaced"
                )));
            }
        }
        let mut max_instructions = 0usize;
        for (k, tok) in id_to_token.iter().skip(N_SPECIAL as usize).enumerate() {
            match parse_label(tok) {
                Some(v) if v == k + 1 => max_instructions = v,
                _ => break,
            }
        }
        Ok(Self {
            token_to_id: map,
            id_to_token,
            max_instructions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TokenizerError::BadVocabFile(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// The decompilation prompt head for one optimization level.
pub fn decompile_prompt(level: OptLevel) -> String {
    format!("# This is the assembly code with {} optimization:", level.as_str())
}

/// Builds a word-level vocabulary over the corpus: source text tokens and
/// assembly content tokens (labels are reserved separately). The decompile
/// prompt tokens are always included so prompts never hit UNK.
pub fn build_vocab(
    records: &[FunctionRecord],
    config: &TokenizerConfig,
) -> Result<Vocab, TokenizerError> {
    if records.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut bump = |tok: &str| {
        *counts.entry(tok.to_string()).or_insert(0) += 1;
    };
    for record in records {
        for tok in record.source_text.split_whitespace() {
            bump(tok);
        }
        for f in record.asm.values() {
            for instr in &f.instructions {
                for tok in &instr.tokens {
                    bump(tok);
                }
            }
        }
    }
    let mut keep: Vec<String> = counts
        .into_iter()
        .filter(|(_, c)| *c >= config.min_freq)
        .map(|(t, _)| t)
        .collect();
    for level in OptLevel::ALL {
        keep.extend(decompile_prompt(level).split_whitespace().map(str::to_string));
    }
    Ok(Vocab::from_tokens(keep, config.max_instructions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkKind {
    Text,
    Source,
    Asm,
}

impl ChunkKind {
    /// Text and source chunks share standard causal attention semantics.
    pub fn is_textual(self) -> bool {
        matches!(self, ChunkKind::Text | ChunkKind::Source)
    }
}

/// One input segment: free text, source code, or an assembly function.
#[derive(Debug, Clone)]
pub enum Chunk {
    Text(String),
    Source(String),
    Asm(AssemblyFunction),
}

/// Per-token structural metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub chunk_index: usize,
    pub chunk_kind: ChunkKind,
    /// 1-based instruction ordinal inside an assembly chunk, 0 elsewhere.
    pub instr_index: usize,
    pub is_inst_label: bool,
}

/// Token ids plus aligned metadata. Always starts with BOS, which is modeled
/// as a one-token text chunk so cross-chunk attention rules cover it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub meta: Vec<TokenMeta>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn next_chunk_index(&self) -> usize {
        self.meta.last().map_or(0, |m| m.chunk_index + 1)
    }

    pub fn push(&mut self, id: u32, meta: TokenMeta) {
        self.ids.push(id);
        self.meta.push(meta);
    }

    /// Appends EOS as its own text chunk.
    pub fn append_eos(&mut self) {
        let chunk_index = self.next_chunk_index();
        self.push(
            EOS_ID,
            TokenMeta { chunk_index, chunk_kind: ChunkKind::Text, instr_index: 0, is_inst_label: false },
        );
    }

    /// Appends one generated token to a trailing source chunk (created on
    /// first use). Used by the sampling loop.
    pub fn append_generated(&mut self, id: u32, chunk_index: usize) {
        self.push(
            id,
            TokenMeta { chunk_index, chunk_kind: ChunkKind::Source, instr_index: 0, is_inst_label: false },
        );
    }

    /// Positions whose token is an instruction label.
    pub fn label_positions(&self) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_inst_label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Encodes chunks into a token sequence. BOS is prepended as chunk 0; user
/// chunks are numbered from 1. Instructions longer than the per-instruction
/// budget are truncated before the label so the label always survives.
pub fn encode(
    chunks: &[Chunk],
    vocab: &Vocab,
    config: &TokenizerConfig,
) -> Result<TokenSequence, TokenizerError> {
    let mut seq = TokenSequence { ids: Vec::new(), meta: Vec::new() };
    seq.push(
        BOS_ID,
        TokenMeta { chunk_index: 0, chunk_kind: ChunkKind::Text, instr_index: 0, is_inst_label: false },
    );
    for (ci, chunk) in chunks.iter().enumerate() {
        let chunk_index = ci + 1;
        match chunk {
            Chunk::Text(text) | Chunk::Source(text) => {
                let kind = if matches!(chunk, Chunk::Text(_)) {
                    ChunkKind::Text
                } else {
                    ChunkKind::Source
                };
                for tok in text.split_whitespace() {
                    seq.push(
                        vocab.id_or_unk(tok),
                        TokenMeta { chunk_index, chunk_kind: kind, instr_index: 0, is_inst_label: false },
                    );
                }
            }
            Chunk::Asm(f) => {
                let m = vocab.max_instructions().min(config.max_instructions);
                if f.instructions.len() > m {
                    return Err(TokenizerError::TooManyInstructions(f.instructions.len(), m));
                }
                for (i, instr) in f.instructions.iter().enumerate() {
                    let instr_index = i + 1;
                    for tok in instr.tokens.iter().take(config.max_tokens_per_instruction) {
                        seq.push(
                            vocab.id_or_unk(tok),
                            TokenMeta {
                                chunk_index,
                                chunk_kind: ChunkKind::Asm,
                                instr_index,
                                is_inst_label: false,
                            },
                        );
                    }
                    let label = vocab.label_id(instr_index).expect("checked above");
                    seq.push(
                        label,
                        TokenMeta {
                            chunk_index,
                            chunk_kind: ChunkKind::Asm,
                            instr_index,
                            is_inst_label: true,
                        },
                    );
                }
            }
        }
    }
    if seq.len() > config.max_seq_len {
        return Err(TokenizerError::SequenceTooLong(seq.len(), config.max_seq_len));
    }
    Ok(seq)
}

/// Inverse of `encode` on in-vocabulary text, modulo whitespace. Unknown ids
/// decode to the UNK sentinel.
pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}
