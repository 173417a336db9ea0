//! Paired (source, O0-O3 assembly) function corpora.
//!
//! Two producers: a deterministic synthetic generator over the pseudo
//! language (used by all tests), and an optional real compiler/disassembler
//! toolchain. Records persist as JSONL, one record per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::Command;

use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::normalize::{
    normalize_instruction, parse_disassembly, parse_label, AssemblyFunction,
    NormalizedInstruction, OptLevel,
};
use crate::pseudo::{self, Atom, BinOp, PassKind, SourceFn, Stmt};

/// One source function with its assembly at whatever levels are available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRecord {
    pub source_id: String,
    pub source_text: String,
    pub asm: BTreeMap<OptLevel, AssemblyFunction>,
}

impl FunctionRecord {
    pub fn has_all_levels(&self) -> bool {
        OptLevel::ALL.iter().all(|l| self.asm.contains_key(l))
    }
}

/// Parameters of the synthetic generator. Same seed, same corpus, byte for
/// byte.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_functions: usize,
    pub max_instructions: usize,
    /// ALU mnemonics the generator may draw from (subset of the pseudo ISA).
    pub op_mnemonics: Vec<String>,
    /// Temp register pool; renaming permutes within it.
    pub registers: Vec<String>,
}

impl SyntheticSpec {
    pub fn new(seed: u64, n_functions: usize, max_instructions: usize) -> Self {
        Self {
            seed,
            n_functions,
            max_instructions,
            op_mnemonics: BinOp::ALL.iter().map(|op| op.mnemonic().to_string()).collect(),
            registers: (0..8).map(|i| format!("r{i}")).collect(),
        }
    }
}

/// A generated record plus the per-level pass lists that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticFunction {
    pub record: FunctionRecord,
    pub passes: BTreeMap<OptLevel, Vec<PassKind>>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("jsonl line {0}: schema violation: {1}")]
    SchemaViolation(usize, String),
    #[error("toolchain unavailable: {0}")]
    ToolchainUnavailable(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn validate_spec(spec: &SyntheticSpec) -> Result<(), CorpusError> {
    if spec.n_functions < 1 {
        return Err(CorpusError::InvalidSpec("n_functions must be >= 1".into()));
    }
    if spec.max_instructions < 2 {
        return Err(CorpusError::InvalidSpec("max_instructions must be >= 2".into()));
    }
    if spec.op_mnemonics.is_empty() {
        return Err(CorpusError::InvalidSpec("no op mnemonics".into()));
    }
    for m in &spec.op_mnemonics {
        if BinOp::from_mnemonic(m).is_none() {
            return Err(CorpusError::InvalidSpec(format!("unsupported mnemonic `{m}`")));
        }
    }
    if spec.registers.len() < 4 {
        return Err(CorpusError::InvalidSpec("need at least 4 registers".into()));
    }
    Ok(())
}

fn random_source(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, idx: usize) -> SourceFn {
    let name = format!("f{idx:03}");
    let ops: Vec<BinOp> = spec
        .op_mnemonics
        .iter()
        .filter_map(|m| BinOp::from_mnemonic(m))
        .collect();
    let budget = spec.max_instructions;
    if budget < 5 {
        // Too small for the general shape; emit a constant function.
        return SourceFn {
            name,
            params: vec![],
            stmts: vec![],
            ret: Atom::Int(rng.random_range(1..100)),
        };
    }
    // Lowering cost: n_params + 2 * n_stmts + 2.
    let max_params = (budget - 4).clamp(1, 3);
    let n_params = rng.random_range(1..=max_params);
    let max_stmts = ((budget - n_params - 2) / 2).max(1);
    let cap = (spec.registers.len() - n_params).min(max_stmts).max(1);
    let n_stmts = rng.random_range(1..=cap);
    let params: Vec<String> = (0..n_params).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
    let mut vars = params.clone();
    let mut stmts = Vec::with_capacity(n_stmts);
    for k in 0..n_stmts {
        let dst = format!("t{k}");
        let pick_atom = |rng: &mut ChaCha8Rng, vars: &[String]| -> Atom {
            if rng.random_bool(0.35) {
                Atom::Int(rng.random_range(1..100))
            } else {
                Atom::Var(vars.choose(rng).expect("nonempty").clone())
            }
        };
        let lhs = Atom::Var(vars.choose(rng).expect("nonempty").clone());
        let rhs = pick_atom(rng, &vars);
        let op = *ops.choose(rng).expect("nonempty ops");
        stmts.push(Stmt { dst: dst.clone(), lhs, op, rhs });
        vars.push(dst);
    }
    // Return one of the temps; earlier temps that fall out of the chain are
    // dead code for the eliminator to find.
    let ret = Atom::Var(vars.last().expect("has stmts").clone());
    SourceFn { name, params, stmts, ret }
}

/// Generates records along with the per-level pass lists.
///
/// Level 0 is the direct lowering; each higher level appends one more pass
/// (drawn without replacement from the pass set), so the pass list at level
/// k is a prefix of the list at level k+1.
pub fn generate_synthetic_detailed(
    spec: &SyntheticSpec,
) -> Result<Vec<SyntheticFunction>, CorpusError> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_functions);
    for idx in 0..spec.n_functions {
        let source = random_source(spec, &mut rng, idx);
        let source_id = source.name.clone();
        let base = pseudo::lower(&source, &spec.registers);
        let mut order = PassKind::ALL.to_vec();
        order.shuffle(&mut rng);
        let rotate = rng.random_range(0..spec.registers.len() - 1);
        let mut asm = BTreeMap::new();
        let mut passes = BTreeMap::new();
        let mut body = base;
        for level in OptLevel::ALL {
            let applied: Vec<PassKind> = order[..level.rank()].to_vec();
            if let Some(pass) = applied.last() {
                body = pseudo::apply_pass(&body, *pass, &spec.registers, rotate);
            }
            asm.insert(level, body.to_assembly(&source_id, level));
            passes.insert(level, applied);
        }
        out.push(SyntheticFunction {
            record: FunctionRecord {
                source_id,
                source_text: source.render(),
                asm,
            },
            passes,
        });
    }
    Ok(out)
}

/// Deterministic synthetic corpus; see [`generate_synthetic_detailed`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FunctionRecord>, CorpusError> {
    Ok(generate_synthetic_detailed(spec)?.into_iter().map(|f| f.record).collect())
}

/// Keeps records that have all four levels and whose rendered O2 text
/// differs from the rendered O3 text.
pub fn filter_for_cl(records: Vec<FunctionRecord>) -> Vec<FunctionRecord> {
    records
        .into_iter()
        .filter(|r| {
            r.has_all_levels()
                && r.asm[&OptLevel::O2].render() != r.asm[&OptLevel::O3].render()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

fn record_to_json(record: &FunctionRecord) -> Value {
    let asm: serde_json::Map<String, Value> = record
        .asm
        .iter()
        .map(|(level, f)| {
            let lines: Vec<Value> =
                f.instructions.iter().map(|i| Value::String(i.render())).collect();
            (level.as_str().to_string(), Value::Array(lines))
        })
        .collect();
    json!({
        "source_id": record.source_id,
        "source": record.source_text,
        "asm": asm,
    })
}

fn record_from_json(value: &Value, lineno: usize) -> Result<FunctionRecord, CorpusError> {
    let bad = |msg: &str| CorpusError::SchemaViolation(lineno, msg.to_string());
    let obj = value.as_object().ok_or_else(|| bad("line is not an object"))?;
    let source_id = obj
        .get("source_id")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field `source_id`"))?
        .to_string();
    let source_text = obj
        .get("source")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field `source`"))?
        .to_string();
    let asm_obj = obj
        .get("asm")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("missing object field `asm`"))?;
    let mut asm = BTreeMap::new();
    for (key, lines) in asm_obj {
        let level: OptLevel =
            key.parse().map_err(|_| bad(&format!("unknown opt level `{key}`")))?;
        let lines = lines.as_array().ok_or_else(|| bad("asm entry is not an array"))?;
        let mut instructions = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let line = line.as_str().ok_or_else(|| bad("instruction is not a string"))?;
            let mut toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            let label = toks.pop().ok_or_else(|| bad("empty instruction"))?;
            match parse_label(&label) {
                Some(k) if k == i + 1 => {}
                _ => return Err(bad(&format!("instruction {} lacks label [INST-{}]", i, i + 1))),
            }
            instructions.push(NormalizedInstruction { index: i + 1, tokens: toks, label });
        }
        if instructions.is_empty() {
            return Err(bad("empty assembly function"));
        }
        asm.insert(
            level,
            AssemblyFunction { source_id: source_id.clone(), opt_level: level, instructions },
        );
    }
    Ok(FunctionRecord { source_id, source_text, asm })
}

/// Writes records as JSONL, one compact object per line.
pub fn save_jsonl(records: &[FunctionRecord], path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut w, &record_to_json(record)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes records to an in-memory JSONL string.
pub fn to_jsonl_string(records: &[FunctionRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&record_to_json(record).to_string());
        out.push('\n');
    }
    out
}

/// Loads records from a JSONL file, validating the schema per line.
pub fn load_jsonl(path: &Path) -> Result<Vec<FunctionRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| CorpusError::SchemaViolation(idx + 1, e.to_string()))?;
        records.push(record_from_json(&value, idx + 1)?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Toolchain ingestion
// ---------------------------------------------------------------------------

/// Command templates with `{input}`, `{output}` and `{opt}` placeholders,
/// e.g. `gcc -{opt} -c {input} -o {output}` and `objdump -d {input}`.
#[derive(Debug, Clone)]
pub struct ToolchainTemplates {
    pub compile: String,
    pub disassemble: String,
}

fn split_template(template: &str, subs: &[(&str, &str)]) -> Vec<String> {
    template
        .split_whitespace()
        .map(|word| {
            let mut w = word.to_string();
            for (k, v) in subs {
                w = w.replace(k, v);
            }
            w
        })
        .collect()
}

fn probe_command(template: &str) -> Result<(), CorpusError> {
    let argv0 = template
        .split_whitespace()
        .next()
        .ok_or_else(|| CorpusError::ToolchainUnavailable("empty command template".into()))?;
    match Command::new(argv0).arg("--version").output() {
        Ok(_) => Ok(()),
        Err(e) => Err(CorpusError::ToolchainUnavailable(format!("{argv0}: {e}"))),
    }
}

/// Lines of objdump output that are not part of the accepted dump grammar:
/// file-format banner, section banners, ellipsis padding and byte-only
/// continuation lines of long encodings.
fn is_dump_furniture(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() || t == "..." {
        return true;
    }
    if t.starts_with("Disassembly of section") || line.contains("file format") {
        return true;
    }
    // addr: bytes with no mnemonic
    if let Some((addr, rest)) = t.split_once(':') {
        let addr_hex = !addr.is_empty()
            && addr.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if addr_hex
            && !rest.trim().is_empty()
            && rest
                .split_whitespace()
                .all(|w| w.len() == 2 && w.bytes().all(|b| b.is_ascii_hexdigit()))
        {
            return true;
        }
    }
    false
}

/// Compiles and disassembles every `.c` file in `source_dir` at every
/// optimization level, normalizing each function found in the dump.
///
/// Levels that fail to compile, disassemble or parse are simply absent from
/// the affected records; failures are logged, never fatal. Output is sorted
/// by source id.
pub fn ingest_toolchain(
    source_dir: &Path,
    templates: &ToolchainTemplates,
) -> Result<Vec<FunctionRecord>, CorpusError> {
    probe_command(&templates.compile)?;
    probe_command(&templates.disassemble)?;

    let mut files: Vec<_> = std::fs::read_dir(source_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "c"))
        .collect();
    files.sort();

    let mut records: BTreeMap<String, FunctionRecord> = BTreeMap::new();
    for file in &files {
        let stem = file.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let source_text = std::fs::read_to_string(file)?;
        for level in OptLevel::ALL {
            let obj = file.with_extension(format!("{}.o", level.as_str().to_lowercase()));
            let subs = [
                ("{input}", file.to_str().unwrap_or_default()),
                ("{output}", obj.to_str().unwrap_or_default()),
                ("{opt}", level.as_str()),
            ];
            let argv = split_template(&templates.compile, &subs);
            let status = Command::new(&argv[0]).args(&argv[1..]).output();
            match status {
                Ok(o) if o.status.success() => {}
                Ok(o) => {
                    log::warn!(
                        "compile failed for {} at {level}: {}",
                        file.display(),
                        String::from_utf8_lossy(&o.stderr).trim()
                    );
                    continue;
                }
                Err(e) => {
                    log::warn!("compile spawn failed for {}: {e}", file.display());
                    continue;
                }
            }
            let subs = [("{input}", obj.to_str().unwrap_or_default()), ("{output}", ""), ("{opt}", level.as_str())];
            let argv = split_template(&templates.disassemble, &subs);
            let dump = match Command::new(&argv[0]).args(&argv[1..]).output() {
                Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).to_string(),
                Ok(o) => {
                    log::warn!(
                        "disassemble failed for {} at {level}: {}",
                        obj.display(),
                        String::from_utf8_lossy(&o.stderr).trim()
                    );
                    continue;
                }
                Err(e) => {
                    log::warn!("disassemble spawn failed for {}: {e}", obj.display());
                    continue;
                }
            };
            let _ = std::fs::remove_file(&obj);
            let cleaned: String = dump
                .lines()
                .filter(|l| !is_dump_furniture(l))
                .map(|l| format!("{l}\n"))
                .collect();
            let functions = match parse_disassembly(&cleaned) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("parse failed for {} at {level}: {e}", file.display());
                    continue;
                }
            };
            for (name, raws) in functions {
                let source_id = format!("{stem}::{name}");
                let instructions: Vec<_> = raws
                    .iter()
                    .enumerate()
                    .map(|(i, raw)| normalize_instruction(raw, i + 1))
                    .collect();
                if instructions.is_empty() {
                    continue;
                }
                let entry = records.entry(source_id.clone()).or_insert_with(|| FunctionRecord {
                    source_id: source_id.clone(),
                    source_text: source_text.clone(),
                    asm: BTreeMap::new(),
                });
                entry.asm.insert(
                    level,
                    AssemblyFunction { source_id, opt_level: level, instructions },
                );
            }
        }
    }
    Ok(records.into_values().collect())
}
