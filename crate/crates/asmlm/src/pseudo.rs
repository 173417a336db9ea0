//! A tiny straight-line pseudo language and pseudo ISA.
//!
//! The synthetic corpus pairs functions in this language with lowered
//! pseudo-assembly at four optimization levels. Source functions are
//! executable through [`Interpreter`], which is what the functional judge
//! uses to score decompilation candidates.
//!
//! Source grammar (whitespace-tokenized, one function per text):
//!
//! ```text
//! fn NAME ( PARAM* ) { STMT* return ATOM ; }
//! STMT  := VAR = ATOM OP ATOM ;
//! ATOM  := VAR | INT
//! OP    := + - * & | ^
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::normalize::{AssemblyFunction, NormalizedInstruction, OptLevel};

/// Binary operators of the source language, with their assembly mnemonics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
}

impl BinOp {
    pub const ALL: [BinOp; 6] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "imul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
        }
    }

    pub fn from_symbol(s: &str) -> Option<BinOp> {
        Self::ALL.iter().copied().find(|op| op.symbol() == s)
    }

    pub fn from_mnemonic(s: &str) -> Option<BinOp> {
        Self::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
        }
    }
}

/// Value operand in a source expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Atom {
    Var(String),
    Int(i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stmt {
    pub dst: String,
    pub lhs: Atom,
    pub op: BinOp,
    pub rhs: Atom,
}

/// A parsed source function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFn {
    pub name: String,
    pub params: Vec<String>,
    pub stmts: Vec<Stmt>,
    pub ret: Atom,
}

impl SourceFn {
    /// Single-line rendering with every token whitespace separated.
    pub fn render(&self) -> String {
        let mut out = format!("fn {} (", self.name);
        for p in &self.params {
            out.push(' ');
            out.push_str(p);
        }
        out.push_str(" ) {");
        for s in &self.stmts {
            out.push_str(&format!(
                " {} = {} {} {} ;",
                s.dst,
                atom_str(&s.lhs),
                s.op.symbol(),
                atom_str(&s.rhs)
            ));
        }
        out.push_str(&format!(" return {} ; }}", atom_str(&self.ret)));
        out
    }
}

fn atom_str(a: &Atom) -> String {
    match a {
        Atom::Var(v) => v.clone(),
        Atom::Int(i) => i.to_string(),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PseudoError {
    #[error("parse error at token {0}")]
    Parse(usize),
    #[error("undefined variable `{0}`")]
    Undefined(String),
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("step budget of {0} exhausted")]
    BudgetExhausted(usize),
}

fn parse_atom(tok: &str) -> Option<Atom> {
    if let Ok(i) = tok.parse::<i64>() {
        return Some(Atom::Int(i));
    }
    if tok.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && tok.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
    {
        return Some(Atom::Var(tok.to_string()));
    }
    None
}

/// Parses a source function from its whitespace-token rendering.
pub fn parse_source(text: &str) -> Result<SourceFn, PseudoError> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let mut pos = 0usize;
    let expect = |p: &mut usize, want: &str| -> Result<(), PseudoError> {
        if toks.get(*p) == Some(&want) {
            *p += 1;
            Ok(())
        } else {
            Err(PseudoError::Parse(*p))
        }
    };
    expect(&mut pos, "fn")?;
    let name = toks.get(pos).ok_or(PseudoError::Parse(pos))?.to_string();
    pos += 1;
    expect(&mut pos, "(")?;
    let mut params = Vec::new();
    while toks.get(pos).is_some_and(|t| *t != ")") {
        match parse_atom(toks[pos]) {
            Some(Atom::Var(v)) => params.push(v),
            _ => return Err(PseudoError::Parse(pos)),
        }
        pos += 1;
    }
    expect(&mut pos, ")")?;
    expect(&mut pos, "{")?;
    let mut stmts = Vec::new();
    loop {
        match toks.get(pos) {
            Some(&"return") => break,
            Some(tok) => {
                let dst = match parse_atom(tok) {
                    Some(Atom::Var(v)) => v,
                    _ => return Err(PseudoError::Parse(pos)),
                };
                pos += 1;
                expect(&mut pos, "=")?;
                let lhs = parse_atom(toks.get(pos).ok_or(PseudoError::Parse(pos))?)
                    .ok_or(PseudoError::Parse(pos))?;
                pos += 1;
                let op = BinOp::from_symbol(toks.get(pos).ok_or(PseudoError::Parse(pos))?)
                    .ok_or(PseudoError::Parse(pos))?;
                pos += 1;
                let rhs = parse_atom(toks.get(pos).ok_or(PseudoError::Parse(pos))?)
                    .ok_or(PseudoError::Parse(pos))?;
                pos += 1;
                expect(&mut pos, ";")?;
                stmts.push(Stmt { dst, lhs, op, rhs });
            }
            None => return Err(PseudoError::Parse(pos)),
        }
    }
    expect(&mut pos, "return")?;
    let ret = parse_atom(toks.get(pos).ok_or(PseudoError::Parse(pos))?)
        .ok_or(PseudoError::Parse(pos))?;
    pos += 1;
    expect(&mut pos, ";")?;
    expect(&mut pos, "}")?;
    if pos != toks.len() {
        return Err(PseudoError::Parse(pos));
    }
    Ok(SourceFn { name, params, stmts, ret })
}

/// Executes source functions with a per-call statement budget.
pub struct Interpreter {
    pub step_budget: usize,
}

impl Interpreter {
    pub fn new(step_budget: usize) -> Self {
        Self { step_budget }
    }

    /// Runs `f` on `args`, returning the function value.
    pub fn run(&self, f: &SourceFn, args: &[i64]) -> Result<i64, PseudoError> {
        if args.len() != f.params.len() {
            return Err(PseudoError::Arity { expected: f.params.len(), got: args.len() });
        }
        let mut env: BTreeMap<&str, i64> = BTreeMap::new();
        for (p, v) in f.params.iter().zip(args) {
            env.insert(p, *v);
        }
        let eval = |env: &BTreeMap<&str, i64>, a: &Atom| -> Result<i64, PseudoError> {
            match a {
                Atom::Int(i) => Ok(*i),
                Atom::Var(v) => env
                    .get(v.as_str())
                    .copied()
                    .ok_or_else(|| PseudoError::Undefined(v.clone())),
            }
        };
        let mut steps = 0usize;
        for s in &f.stmts {
            steps += 1;
            if steps > self.step_budget {
                return Err(PseudoError::BudgetExhausted(self.step_budget));
            }
            let val = s.op.apply(eval(&env, &s.lhs)?, eval(&env, &s.rhs)?);
            env.insert(&s.dst, val);
        }
        eval(&env, &f.ret)
    }
}

// ---------------------------------------------------------------------------
// Pseudo ISA
// ---------------------------------------------------------------------------

/// Operand of a pseudo instruction. Arguments render as `arg{i}`, immediates
/// as `$imm` (matching the normalized AT&T immediate form).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Reg(String),
    Imm(i64),
    Arg(usize),
}

impl Operand {
    fn render(&self) -> String {
        match self {
            Operand::Reg(r) => r.clone(),
            Operand::Imm(i) => format!("${i}"),
            Operand::Arg(i) => format!("arg{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoInstr {
    pub mnemonic: String,
    pub operands: Vec<Operand>,
}

impl PseudoInstr {
    fn new(mnemonic: &str, operands: Vec<Operand>) -> Self {
        Self { mnemonic: mnemonic.to_string(), operands }
    }

    /// Register written by this instruction, if any.
    fn dst(&self) -> Option<&str> {
        match self.operands.first() {
            Some(Operand::Reg(r)) if self.mnemonic != "ret" => Some(r),
            _ => None,
        }
    }

    /// Registers read by this instruction.
    fn reads(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let src_from = match self.mnemonic.as_str() {
            // mov fully overwrites its destination.
            "mov" => 1,
            "ret" => 0,
            // Two-operand ALU forms read their destination too; fused
            // three-operand forms do not.
            _ if self.operands.len() == 3 => 1,
            _ => 0,
        };
        for op in self.operands.iter().skip(src_from) {
            if let Operand::Reg(r) = op {
                out.push(r.as_str());
            }
        }
        out
    }

    fn regs_mentioned(&self) -> Vec<&str> {
        self.operands
            .iter()
            .filter_map(|o| match o {
                Operand::Reg(r) => Some(r.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Straight-line pseudo-assembly body of one function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoBody {
    pub instrs: Vec<PseudoInstr>,
}

impl PseudoBody {
    /// Converts to a normalized [`AssemblyFunction`]; tokens here are already
    /// in normalized form (no `%`, no hex, spaced punctuation).
    pub fn to_assembly(&self, source_id: &str, opt_level: OptLevel) -> AssemblyFunction {
        let instructions = self
            .instrs
            .iter()
            .enumerate()
            .map(|(i, instr)| {
                let mut tokens = vec![instr.mnemonic.clone()];
                for (j, op) in instr.operands.iter().enumerate() {
                    if j > 0 {
                        tokens.push(",".to_string());
                    }
                    tokens.push(op.render());
                }
                NormalizedInstruction {
                    index: i + 1,
                    tokens,
                    label: format!("[INST-{}]", i + 1),
                }
            })
            .collect();
        AssemblyFunction {
            source_id: source_id.to_string(),
            opt_level,
            instructions,
        }
    }
}

/// Lowers a source function to unoptimized pseudo-assembly.
///
/// Every parameter is loaded into a register, each statement becomes a
/// `mov` + ALU-op pair, and the return value is moved into `rax`.
pub fn lower(f: &SourceFn, registers: &[String]) -> PseudoBody {
    let mut instrs = Vec::new();
    let mut var_reg: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0usize;
    for (i, p) in f.params.iter().enumerate() {
        let r = next;
        next += 1;
        var_reg.insert(p, r);
        instrs.push(PseudoInstr::new(
            "mov",
            vec![Operand::Reg(registers[r].clone()), Operand::Arg(i)],
        ));
    }
    let as_operand = |var_reg: &BTreeMap<&str, usize>, a: &Atom| match a {
        Atom::Int(i) => Operand::Imm(*i),
        Atom::Var(v) => Operand::Reg(registers[var_reg[v.as_str()]].clone()),
    };
    for s in &f.stmts {
        let lhs = as_operand(&var_reg, &s.lhs);
        let rhs = as_operand(&var_reg, &s.rhs);
        let r = match var_reg.get(s.dst.as_str()) {
            Some(&r) => r,
            None => {
                let r = next;
                next += 1;
                var_reg.insert(&s.dst, r);
                r
            }
        };
        let dst = Operand::Reg(registers[r].clone());
        instrs.push(PseudoInstr::new("mov", vec![dst.clone(), lhs]));
        instrs.push(PseudoInstr::new(s.op.mnemonic(), vec![dst, rhs]));
    }
    let ret = as_operand(&var_reg, &f.ret);
    instrs.push(PseudoInstr::new("mov", vec![Operand::Reg("rax".into()), ret]));
    instrs.push(PseudoInstr::new("ret", vec![]));
    PseudoBody { instrs }
}

/// Deterministic transformation passes applied cumulatively per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PassKind {
    DeadElim,
    Fusion,
    RegRename,
    Reorder,
}

impl PassKind {
    pub const ALL: [PassKind; 4] =
        [PassKind::DeadElim, PassKind::Fusion, PassKind::RegRename, PassKind::Reorder];

    pub fn name(self) -> &'static str {
        match self {
            PassKind::DeadElim => "dead-elim",
            PassKind::Fusion => "fusion",
            PassKind::RegRename => "reg-rename",
            PassKind::Reorder => "reorder",
        }
    }
}

/// Applies one pass. `rotate` parameterizes register renaming and is
/// derived from the generator's seed.
pub fn apply_pass(body: &PseudoBody, pass: PassKind, registers: &[String], rotate: usize) -> PseudoBody {
    match pass {
        PassKind::DeadElim => dead_elim(body),
        PassKind::Fusion => fuse_adjacent(body),
        PassKind::RegRename => rename_registers(body, registers, rotate),
        PassKind::Reorder => reorder_independent(body),
    }
}

/// Removes instructions whose written register is never read afterwards.
/// `rax` is live at the end.
fn dead_elim(body: &PseudoBody) -> PseudoBody {
    let mut live: Vec<&str> = vec!["rax"];
    let mut keep = vec![true; body.instrs.len()];
    for (i, instr) in body.instrs.iter().enumerate().rev() {
        if let Some(d) = instr.dst() {
            if !live.contains(&d) {
                keep[i] = false;
                continue;
            }
            // A mov kills its destination; ALU ops read it and so keep it live.
            if instr.mnemonic == "mov" || instr.operands.len() == 3 {
                live.retain(|r| *r != d);
            }
        }
        for r in instr.reads() {
            if !live.contains(&r) {
                live.push(r);
            }
        }
    }
    PseudoBody {
        instrs: body
            .instrs
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(i, _)| i.clone())
            .collect(),
    }
}

/// Fuses `mov rD, X` immediately followed by `op rD, Y` into the
/// three-operand form `op rD, X, Y`. Non-overlapping, left to right.
fn fuse_adjacent(body: &PseudoBody) -> PseudoBody {
    let mut out: Vec<PseudoInstr> = Vec::with_capacity(body.instrs.len());
    let mut i = 0usize;
    while i < body.instrs.len() {
        let here = &body.instrs[i];
        if i + 1 < body.instrs.len() && here.mnemonic == "mov" && here.operands.len() == 2 {
            let next = &body.instrs[i + 1];
            let fusable = next.mnemonic != "mov"
                && next.mnemonic != "ret"
                && next.operands.len() == 2
                && next.operands[0] == here.operands[0];
            if fusable {
                out.push(PseudoInstr::new(
                    &next.mnemonic,
                    vec![
                        here.operands[0].clone(),
                        here.operands[1].clone(),
                        next.operands[1].clone(),
                    ],
                ));
                i += 2;
                continue;
            }
        }
        out.push(here.clone());
        i += 1;
    }
    PseudoBody { instrs: out }
}

/// Renames temp registers by rotating the register pool; `rax` is fixed.
fn rename_registers(body: &PseudoBody, registers: &[String], rotate: usize) -> PseudoBody {
    if registers.len() < 2 {
        return body.clone();
    }
    let shift = 1 + rotate % (registers.len() - 1);
    let renamed: BTreeMap<&str, &str> = registers
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), registers[(i + shift) % registers.len()].as_str()))
        .collect();
    let instrs = body
        .instrs
        .iter()
        .map(|instr| PseudoInstr {
            mnemonic: instr.mnemonic.clone(),
            operands: instr
                .operands
                .iter()
                .map(|o| match o {
                    Operand::Reg(r) => Operand::Reg(
                        renamed.get(r.as_str()).map(|s| s.to_string()).unwrap_or_else(|| r.clone()),
                    ),
                    other => other.clone(),
                })
                .collect(),
        })
        .collect();
    PseudoBody { instrs }
}

/// Swaps adjacent instruction pairs that touch disjoint register sets.
/// Each instruction takes part in at most one swap.
fn reorder_independent(body: &PseudoBody) -> PseudoBody {
    let mut instrs = body.instrs.clone();
    let mut i = 0usize;
    while i + 1 < instrs.len() {
        let a = instrs[i].regs_mentioned();
        let b = instrs[i + 1].regs_mentioned();
        let independent = instrs[i].mnemonic != "ret"
            && instrs[i + 1].mnemonic != "ret"
            && a.iter().all(|r| !b.contains(r));
        if independent {
            instrs.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    PseudoBody { instrs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regs() -> Vec<String> {
        (0..6).map(|i| format!("r{i}")).collect()
    }

    fn sample() -> SourceFn {
        parse_source("fn f ( a b ) { t0 = a + b ; t1 = t0 * 3 ; return t1 ; }").unwrap()
    }

    #[test]
    fn render_parse_round_trip() {
        let f = sample();
        assert_eq!(parse_source(&f.render()).unwrap(), f);
    }

    #[test]
    fn interpreter_evaluates_straight_line_code() {
        let f = sample();
        let interp = Interpreter::new(1000);
        assert_eq!(interp.run(&f, &[2, 5]).unwrap(), 21);
        assert_eq!(interp.run(&f, &[0, 0]).unwrap(), 0);
        assert!(matches!(
            interp.run(&f, &[1]),
            Err(PseudoError::Arity { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn interpreter_budget_is_enforced() {
        let f = sample();
        let interp = Interpreter::new(1);
        assert_eq!(interp.run(&f, &[1, 1]), Err(PseudoError::BudgetExhausted(1)));
    }

    #[test]
    fn lowering_shape() {
        let f = sample();
        let body = lower(&f, &regs());
        // 2 params + 2 stmts * 2 + mov rax + ret
        assert_eq!(body.instrs.len(), 8);
        let asm = body.to_assembly("f", OptLevel::O0);
        assert_eq!(asm.instructions[0].render(), "mov r0 , arg0 [INST-1]");
        assert_eq!(asm.instructions.last().unwrap().render(), "ret [INST-8]");
    }

    #[test]
    fn dead_elim_drops_unused_writes() {
        let f =
            parse_source("fn f ( a ) { t0 = a + 1 ; t1 = a * 9 ; return t0 ; }").unwrap();
        let body = lower(&f, &regs());
        let opt = dead_elim(&body);
        // The t1 mov+imul pair writes a register never read again.
        assert_eq!(opt.instrs.len(), body.instrs.len() - 2);
    }

    #[test]
    fn fusion_merges_mov_alu_pairs() {
        let f = sample();
        let body = lower(&f, &regs());
        let fused = fuse_adjacent(&body);
        assert!(fused.instrs.len() < body.instrs.len());
        assert!(fused.instrs.iter().any(|i| i.operands.len() == 3));
    }

    #[test]
    fn passes_never_grow_the_body() {
        let f = sample();
        let body = lower(&f, &regs());
        for pass in PassKind::ALL {
            let out = apply_pass(&body, pass, &regs(), 1);
            assert!(out.instrs.len() <= body.instrs.len(), "{pass:?} grew the body");
        }
    }

    #[test]
    fn rename_is_a_permutation() {
        let f = sample();
        let body = lower(&f, &regs());
        let renamed = rename_registers(&body, &regs(), 0);
        assert_eq!(renamed.instrs.len(), body.instrs.len());
        assert_ne!(renamed, body);
        // Same multiset of mnemonics.
        let m1: Vec<_> = body.instrs.iter().map(|i| &i.mnemonic).collect();
        let m2: Vec<_> = renamed.instrs.iter().map(|i| &i.mnemonic).collect();
        assert_eq!(m1, m2);
    }

    #[test]
    fn non_parsing_text_is_rejected() {
        assert!(parse_source("int main ( ) { }").is_err());
        assert!(parse_source("").is_err());
        assert!(parse_source("fn f ( ) { return 1 ; } trailing").is_err());
    }
}
