//! Attention masks over token sequences.
//!
//! The hierarchical mask admits, per query/key pair (key <= query):
//!
//! * intra-instruction: causal attention confined to tokens of one assembly
//!   instruction;
//! * preceding-instruction: any token of instruction i attends the label of
//!   instruction i-1 in the same chunk;
//! * inter-instruction: labels attend earlier labels in the same chunk;
//! * text/source: plain causal attention within and across textual chunks;
//! * cross text/source <-> assembly: admitted only when the assembly-side
//!   endpoint is a label;
//!
//! plus unconditional self-attention on the diagonal. Standard heads use the
//! plain causal mask instead.

use crate::tokenizer::TokenSequence;

/// Boolean query x key admissibility matrix for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    fn new(n: usize) -> Self {
        Self { n, allowed: vec![false; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    #[inline]
    fn set(&mut self, q: usize, k: usize) {
        self.allowed[q * self.n + k] = true;
    }

    /// Allowed key positions of one query row.
    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    /// 0/1 grid, one row per query, used by the CLI golden format.
    pub fn grid_string(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for q in 0..self.n {
            for k in 0..self.n {
                out.push(if self.allowed(q, k) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|b| **b).count()
    }
}

/// Plain lower-triangular causal mask.
pub fn build_causal_mask(n: usize) -> AttentionMask {
    let mut mask = AttentionMask::new(n);
    for q in 0..n {
        for k in 0..=q {
            mask.set(q, k);
        }
    }
    mask
}

/// Number of keys the query row admits.
pub fn mask_row_support(mask: &AttentionMask, q: usize) -> usize {
    mask.row(q).iter().filter(|b| **b).count()
}

/// Builds the hierarchical mask from a sequence's structural metadata.
///
/// Construction is region-based: instruction segments get causal triangles,
/// label columns are wired to later tokens per the preceding/inter rules,
/// textual positions get a causal block, and label rows/columns bridge the
/// textual and assembly regions.
pub fn build_hierarchical_mask(seq: &TokenSequence) -> AttentionMask {
    let n = seq.len();
    let mut mask = AttentionMask::new(n);
    let meta = &seq.meta;

    // Textual positions (text or source chunks), in order.
    let textual: Vec<usize> =
        (0..n).filter(|&i| meta[i].chunk_kind.is_textual()).collect();
    for (qi, &q) in textual.iter().enumerate() {
        for &k in &textual[..=qi] {
            mask.set(q, k);
        }
    }

    // Assembly instruction segments: consecutive runs of one instruction
    // inside one chunk.
    #[derive(Clone)]
    struct Segment {
        start: usize,
        end: usize, // inclusive
        chunk: usize,
        label: Option<usize>,
    }
    let mut segments: Vec<Segment> = Vec::new();
    for i in 0..n {
        if !matches!(meta[i].chunk_kind, crate::tokenizer::ChunkKind::Asm) {
            continue;
        }
        let extend = segments.last().is_some_and(|s| {
            s.end + 1 == i
                && s.chunk == meta[i].chunk_index
                && meta[s.start].instr_index == meta[i].instr_index
        });
        if extend {
            let s = segments.last_mut().expect("just checked");
            s.end = i;
            if meta[i].is_inst_label {
                s.label = Some(i);
            }
        } else {
            segments.push(Segment {
                start: i,
                end: i,
                chunk: meta[i].chunk_index,
                label: meta[i].is_inst_label.then_some(i),
            });
        }
    }

    // Intra-instruction causal triangles.
    for s in &segments {
        for q in s.start..=s.end {
            for k in s.start..=q {
                mask.set(q, k);
            }
        }
    }

    // Preceding-instruction: all tokens of a segment attend the previous
    // segment's label within the same chunk.
    for w in segments.windows(2) {
        let (prev, here) = (&w[0], &w[1]);
        if prev.chunk != here.chunk {
            continue;
        }
        if let Some(label) = prev.label {
            for q in here.start..=here.end {
                mask.set(q, label);
            }
        }
    }

    // Inter-instruction: labels attend all earlier labels in their chunk.
    let labels: Vec<(usize, usize)> = segments
        .iter()
        .filter_map(|s| s.label.map(|l| (s.chunk, l)))
        .collect();
    for (i, &(chunk_i, li)) in labels.iter().enumerate() {
        for &(chunk_j, lj) in &labels[..i] {
            if chunk_i == chunk_j {
                mask.set(li, lj);
            }
        }
    }

    // Cross attention between textual chunks and assembly: the assembly-side
    // endpoint must be a label; causal within that restriction.
    for &(_, label) in &labels {
        for &t in &textual {
            if t < label {
                mask.set(label, t);
            } else if t > label {
                mask.set(t, label);
            }
        }
    }

    // Unconditional self-attention.
    for q in 0..n {
        mask.set(q, q);
    }
    mask
}
