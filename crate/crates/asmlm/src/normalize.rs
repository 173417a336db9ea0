//! Disassembly parsing and instruction normalization.
//!
//! Raw objdump-style dumps are parsed into per-function instruction lists,
//! then normalized: `%` and comments removed, `,` `(` `)` spaced out as
//! standalone tokens, hexadecimal literals rewritten in decimal, and each
//! instruction's leading address replaced by an `[INST-k]` label appended at
//! the end of the instruction.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Compiler optimization level a function was built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3];

    pub fn as_str(self) -> &'static str {
        match self {
            OptLevel::O0 => "O0",
            OptLevel::O1 => "O1",
            OptLevel::O2 => "O2",
            OptLevel::O3 => "O3",
        }
    }

    /// Numeric rank (0..=3); higher levels apply supersets of passes.
    pub fn rank(self) -> usize {
        match self {
            OptLevel::O0 => 0,
            OptLevel::O1 => 1,
            OptLevel::O2 => 2,
            OptLevel::O3 => 3,
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptLevel {
    type Err = NormalizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O0" | "o0" => Ok(OptLevel::O0),
            "O1" | "o1" => Ok(OptLevel::O1),
            "O2" | "o2" => Ok(OptLevel::O2),
            "O3" | "o3" => Ok(OptLevel::O3),
            _ => Err(NormalizeError::BadOptLevel(s.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizeError {
    /// Line matched neither the header nor the instruction production.
    #[error("line {0}: malformed line")]
    MalformedLine(usize),
    /// No function header anywhere in the dump.
    #[error("dump contains no function header")]
    EmptyDump,
    #[error("unknown optimization level `{0}`")]
    BadOptLevel(String),
}

/// One instruction as printed by the disassembler, before normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInstruction {
    /// Instruction address exactly as printed (lowercase hex, no `0x`).
    pub address: String,
    pub mnemonic: String,
    pub operands: String,
    /// Trailing `# ...` comment or `<sym+off>` annotation (annotations keep
    /// their leading `<`).
    pub comment: Option<String>,
}

/// One instruction after normalization: whitespace tokens plus the
/// `[INST-k]` label that replaces its address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedInstruction {
    /// 1-based ordinal within the function.
    pub index: usize,
    pub tokens: Vec<String>,
    pub label: String,
}

impl NormalizedInstruction {
    /// Text form: content tokens then the label, space separated.
    pub fn render(&self) -> String {
        let mut s = self.tokens.join(" ");
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(&self.label);
        s
    }
}

/// A normalized instruction sequence for one function at one optimization
/// level, tied to a source-function identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssemblyFunction {
    pub source_id: String,
    pub opt_level: OptLevel,
    pub instructions: Vec<NormalizedInstruction>,
}

impl AssemblyFunction {
    /// One instruction per line, label last on each line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for instr in &self.instructions {
            out.push_str(&instr.render());
            out.push('\n');
        }
        out
    }
}

fn is_hex(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn label_for(index: usize) -> String {
    format!("[INST-{index}]")
}

/// Parses a rendered `[INST-k]` label, returning k.
pub fn parse_label(token: &str) -> Option<usize> {
    let inner = token.strip_prefix("[INST-")?.strip_suffix(']')?;
    if inner.is_empty() || !inner.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    inner.parse().ok()
}

/// Tries to parse a function header line: `<hexaddr> <name>:`.
fn parse_header(line: &str) -> Option<&str> {
    let (addr, rest) = line.split_once(' ')?;
    if !is_hex(addr) {
        return None;
    }
    let name = rest.strip_prefix('<')?.strip_suffix(">:")?;
    if name.is_empty() {
        return None;
    }
    Some(name)
}

/// Tries to parse an instruction line: `addr: bytes mnemonic [operands] [# comment]`.
fn parse_instruction(line: &str) -> Option<RawInstruction> {
    let line = line.trim_start();
    let (addr, rest) = line.split_once(':')?;
    if !is_hex(addr) {
        return None;
    }
    // Byte column: greedy run of 2-hex-digit groups.
    let mut words = rest.split_whitespace().peekable();
    let mut n_bytes = 0usize;
    while let Some(w) = words.peek() {
        if w.len() == 2 && is_hex(w) {
            n_bytes += 1;
            words.next();
        } else {
            break;
        }
    }
    if n_bytes == 0 {
        return None;
    }
    let mnemonic = words.next()?.to_string();
    if mnemonic.starts_with('#') || mnemonic.starts_with('<') {
        return None;
    }
    let tail: Vec<&str> = words.collect();
    let tail = tail.join(" ");
    // Comment starts at the first `#` or `<`; annotations keep the `<`.
    let (operands, comment) = match (tail.find('#'), tail.find('<')) {
        (Some(h), Some(a)) if h < a => (&tail[..h], Some(tail[h + 1..].trim().to_string())),
        (_, Some(a)) => (&tail[..a], Some(tail[a..].trim().to_string())),
        (Some(h), None) => (&tail[..h], Some(tail[h + 1..].trim().to_string())),
        (None, None) => (tail.as_str(), None),
    };
    Some(RawInstruction {
        address: addr.to_string(),
        mnemonic,
        operands: operands.trim().to_string(),
        comment: comment.filter(|c| !c.is_empty()),
    })
}

/// Parses an objdump-style dump into `(function name, instructions)` pairs,
/// one per function header, instructions in file order.
///
/// Accepted grammar: function headers `<hexaddr> <name>:`, instruction lines
/// `addr: bytes mnemonic [operands] [# comment]`, blank lines ignored. Any
/// other line is an error.
pub fn parse_disassembly(
    text: &str,
) -> Result<Vec<(String, Vec<RawInstruction>)>, NormalizeError> {
    let mut functions: Vec<(String, Vec<RawInstruction>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(name) = parse_header(line) {
            functions.push((name.to_string(), Vec::new()));
            continue;
        }
        if let Some(instr) = parse_instruction(line) {
            match functions.last_mut() {
                Some((_, instrs)) => instrs.push(instr),
                // Instruction with no owning function header.
                None => return Err(NormalizeError::MalformedLine(lineno)),
            }
            continue;
        }
        return Err(NormalizeError::MalformedLine(lineno));
    }
    if functions.is_empty() {
        return Err(NormalizeError::EmptyDump);
    }
    Ok(functions)
}

static HEX_LITERAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?0x[0-9a-fA-F]+").expect("static regex"));

/// Rewrites every `0x...` / `-0x...` literal inside `text` as signed decimal.
/// Literals too wide for u128 are left untouched.
fn hex_to_decimal(text: &str) -> String {
    HEX_LITERAL
        .replace_all(text, |caps: &regex::Captures<'_>| {
            let lit = &caps[0];
            let (neg, digits) = match lit.strip_prefix('-') {
                Some(rest) => (true, &rest[2..]),
                None => (false, &lit[2..]),
            };
            match u128::from_str_radix(digits, 16) {
                Ok(v) if neg => format!("-{v}"),
                Ok(v) => format!("{v}"),
                Err(_) => lit.to_string(),
            }
        })
        .into_owned()
}

/// Applies the normalization rules to one instruction:
/// `%` and comments removed, `,` `(` `)` spaced into standalone tokens,
/// hex literals converted to decimal, and the address replaced by an
/// `[INST-index]` label placed at the end.
///
/// Any mnemonic/operand text is tolerated; unknown tokens pass through.
pub fn normalize_instruction(raw: &RawInstruction, index: usize) -> NormalizedInstruction {
    assert!(index >= 1, "instruction indices are 1-based");
    let mut text = String::with_capacity(raw.mnemonic.len() + raw.operands.len() + 1);
    text.push_str(&raw.mnemonic);
    if !raw.operands.is_empty() {
        text.push(' ');
        text.push_str(&raw.operands);
    }
    // Defensive: comments are split off at parse time, but tolerate stray `#`.
    if let Some(pos) = text.find('#') {
        text.truncate(pos);
    }
    let text = text.replace('%', "");
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        match ch {
            ',' | '(' | ')' => {
                spaced.push(' ');
                spaced.push(ch);
                spaced.push(' ');
            }
            _ => spaced.push(ch),
        }
    }
    let mut tokens: Vec<String> = spaced.split_whitespace().map(hex_to_decimal).collect();
    // Branch targets are printed as bare hex before a `<sym>` annotation;
    // convert that final operand from hex to decimal as well.
    if raw.comment.as_deref().is_some_and(|c| c.starts_with('<')) && tokens.len() >= 2 {
        if let Some(last) = tokens.last_mut() {
            if is_hex(last) {
                if let Ok(v) = u128::from_str_radix(last, 16) {
                    *last = v.to_string();
                }
            }
        }
    }
    NormalizedInstruction {
        index,
        tokens,
        label: label_for(index),
    }
}

/// True when `text` is in the rendered normalized format: no function
/// header, every non-blank line ending in an `[INST-k]` label.
fn looks_normalized(text: &str) -> bool {
    let mut any = false;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if parse_header(line).is_some() {
            return false;
        }
        any = true;
    }
    any
}

/// Normalizes a whole function from dump text.
///
/// Accepts either a raw objdump-style dump (the first function in it is
/// taken) or previously rendered normalized text (one instruction per line,
/// label last), so that re-normalizing rendered output is the identity.
pub fn normalize_function(
    text: &str,
    source_id: &str,
    opt_level: OptLevel,
) -> Result<AssemblyFunction, NormalizeError> {
    let instructions = if looks_normalized(text) {
        let mut instructions = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut words: Vec<&str> = line.split_whitespace().collect();
            let valid_label = words.last().copied().and_then(parse_label).is_some();
            if !valid_label || words.len() < 2 {
                return Err(NormalizeError::MalformedLine(idx + 1));
            }
            words.pop();
            let next = instructions.len() + 1;
            let raw = RawInstruction {
                address: format!("{:x}", next - 1),
                mnemonic: words[0].to_string(),
                operands: words[1..].join(" "),
                comment: None,
            };
            instructions.push(normalize_instruction(&raw, next));
        }
        if instructions.is_empty() {
            return Err(NormalizeError::EmptyDump);
        }
        instructions
    } else {
        let functions = parse_disassembly(text)?;
        let (_, raws) = &functions[0];
        raws.iter()
            .enumerate()
            .map(|(i, raw)| normalize_instruction(raw, i + 1))
            .collect()
    };
    Ok(AssemblyFunction {
        source_id: source_id.to_string(),
        opt_level,
        instructions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_single_function_header_and_instruction() {
        let dump = "0000000000000000 <cmp>:\n   0:\t55\tpush %rbp";
        let fns = parse_disassembly(dump).unwrap();
        assert_eq!(fns.len(), 1);
        assert_eq!(fns[0].0, "cmp");
        assert_eq!(
            fns[0].1,
            vec![RawInstruction {
                address: "0".into(),
                mnemonic: "push".into(),
                operands: "%rbp".into(),
                comment: None,
            }]
        );
    }

    #[test]
    fn empty_dump_is_an_error() {
        assert_eq!(parse_disassembly(""), Err(NormalizeError::EmptyDump));
        assert_eq!(parse_disassembly("\n  \n"), Err(NormalizeError::EmptyDump));
    }

    #[test]
    fn two_headers_split_instructions_at_the_second() {
        let dump = "0 <f>:\n 0:\t55\tpush %rbp\n 1:\t5d\tpop %rbp\n8 <g>:\n 8:\tc3\tretq\n";
        let fns = parse_disassembly(dump).unwrap();
        assert_eq!(fns.len(), 2);
        assert_eq!(fns[0].0, "f");
        assert_eq!(fns[0].1.len(), 2);
        assert_eq!(fns[1].0, "g");
        assert_eq!(fns[1].1.len(), 1);
        assert_eq!(fns[1].1[0].mnemonic, "retq");
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dump = "0 <f>:\n 0:\t55\tpush %rbp\nwhat is this\n";
        assert_eq!(parse_disassembly(dump), Err(NormalizeError::MalformedLine(3)));
        // Instruction before any header has no home.
        let dump = " 0:\t55\tpush %rbp\n0 <f>:\n";
        assert_eq!(parse_disassembly(dump), Err(NormalizeError::MalformedLine(1)));
    }

    #[test]
    fn comment_and_annotation_are_captured() {
        let dump = "0 <f>:\n 0:\t39 c2\tcmp %eax,%edx # flag\n 2:\t7e 1b\tjle 1f <f+0x1f>\n";
        let fns = parse_disassembly(dump).unwrap();
        assert_eq!(fns[0].1[0].comment.as_deref(), Some("flag"));
        assert_eq!(fns[0].1[0].operands, "%eax,%edx");
        assert_eq!(fns[0].1[1].comment.as_deref(), Some("<f+0x1f>"));
        assert_eq!(fns[0].1[1].operands, "1f");
    }

    #[test]
    fn normalizes_immediate_instruction() {
        let raw = RawInstruction {
            address: "0".into(),
            mnemonic: "mov".into(),
            operands: "eax, $1".into(),
            comment: None,
        };
        let n = normalize_instruction(&raw, 1);
        assert_eq!(n.tokens, vec!["mov", "eax", ",", "$1"]);
        assert_eq!(n.label, "[INST-1]");
        assert_eq!(n.render(), "mov eax , $1 [INST-1]");
    }

    #[test]
    fn normalizes_memory_operand_with_negative_hex() {
        let raw = RawInstruction {
            address: "10".into(),
            mnemonic: "mov".into(),
            operands: "-0x8(%rbp),%rax".into(),
            comment: None,
        };
        let n = normalize_instruction(&raw, 5);
        assert_eq!(n.tokens, vec!["mov", "-8", "(", "rbp", ")", ",", "rax"]);
        assert_eq!(n.label, "[INST-5]");
    }

    #[test]
    fn strips_comment_and_percent() {
        let raw = RawInstruction {
            address: "1c".into(),
            mnemonic: "cmp".into(),
            operands: "%eax,%edx".into(),
            comment: Some("flag".into()),
        };
        let n = normalize_instruction(&raw, 7);
        assert_eq!(n.tokens, vec!["cmp", "eax", ",", "edx"]);
    }

    #[test]
    fn branch_target_before_annotation_is_hex() {
        let raw = RawInstruction {
            address: "2".into(),
            mnemonic: "jle".into(),
            operands: "1f".into(),
            comment: Some("<f+0x1f>".into()),
        };
        let n = normalize_instruction(&raw, 2);
        assert_eq!(n.tokens, vec!["jle", "31"]);
    }

    #[test]
    fn hex_inside_prefixed_immediate_is_converted() {
        let raw = RawInstruction {
            address: "4".into(),
            mnemonic: "add".into(),
            operands: "$0x10,%rsp".into(),
            comment: None,
        };
        let n = normalize_instruction(&raw, 1);
        assert_eq!(n.tokens, vec!["add", "$16", ",", "rsp"]);
    }

    #[test]
    fn single_instruction_dump_normalizes_with_one_label() {
        let f = normalize_function("0 <f>:\n 0:\tc3\tretq\n", "f", OptLevel::O0).unwrap();
        assert_eq!(f.instructions.len(), 1);
        assert_eq!(f.instructions[0].label, "[INST-1]");
        assert_eq!(f.render(), "retq [INST-1]\n");
    }

    #[test]
    fn renormalizing_rendered_output_is_identity() {
        let dump = "0 <f>:\n 0:\t55\tpush %rbp\n 1:\t48 89 e5\tmov %rsp,%rbp\n \
                    4:\t48 8b 45 f8\tmov -0x8(%rbp),%rax\n 8:\tc3\tretq\n";
        let f = normalize_function(dump, "f", OptLevel::O1).unwrap();
        let again = normalize_function(&f.render(), "f", OptLevel::O1).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn labels_are_contiguous_and_tokens_clean() {
        let dump = "0 <f>:\n 0:\t55\tpush %rbp\n 1:\t48 83 c4 10\tadd $0x10,%rsp\n \
                    5:\t7e 1b\tjle 20 <f+0x20>\n 7:\tc3\tretq\n";
        let f = normalize_function(dump, "f", OptLevel::O2).unwrap();
        for (i, instr) in f.instructions.iter().enumerate() {
            assert_eq!(instr.index, i + 1);
            assert_eq!(instr.label, format!("[INST-{}]", i + 1));
            for tok in &instr.tokens {
                assert!(!tok.contains('%'), "token {tok:?} contains %");
                assert!(!tok.starts_with("0x") && !tok.starts_with("-0x"));
                if tok.contains(',') || tok.contains('(') || tok.contains(')') {
                    assert_eq!(tok.len(), 1, "punctuation must be standalone: {tok:?}");
                }
            }
        }
    }

    proptest! {
        // Hex conversion is value preserving against the standard integer
        // formatter, including the signed form.
        #[test]
        fn hex_conversion_preserves_value(v: u64, neg: bool) {
            let lit = if neg { format!("-0x{v:x}") } else { format!("0x{v:x}") };
            let expect = if neg { format!("-{v}") } else { format!("{v}") };
            prop_assert_eq!(hex_to_decimal(&lit), expect);
        }

        // Normalization reaches a fixpoint after one application.
        #[test]
        fn normalization_is_idempotent(
            ops in proptest::collection::vec("(mov|add|sub|jmp|cmp)", 1..6),
            args in proptest::collection::vec("(%r[a-d]x|\\$0x[0-9a-f]{1,4}|-0x[0-9a-f]{1,2}\\(%rbp\\)|[a-z]{1,3})", 1..6),
        ) {
            let mut dump = String::from("0 <f>:\n");
            for (i, op) in ops.iter().enumerate() {
                let arg = &args[i % args.len()];
                dump.push_str(&format!(" {i:x}:\t90\t{op} {arg},%rax\n"));
            }
            let f = normalize_function(&dump, "f", OptLevel::O0).unwrap();
            let again = normalize_function(&f.render(), "f", OptLevel::O0).unwrap();
            prop_assert_eq!(f, again);
        }
    }
}
