//! Two-pass assembler for the toy VM.
//!
//! The surface syntax is line oriented; `;` starts a comment, `name:` defines
//! a code label, and the `.zero` / `.byte` directives build the static
//! segment. Every `load`/`store` must carry an explicit width suffix
//! (`load.4`, `store.1`); bare `load` is rejected rather than defaulted.
//! The full grammar is documented in `docs/assembly.md`.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::isa::*;
use super::{STATIC_BASE, STATIC_CAP};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseError {
    /// The source contained no instructions.
    Empty,
    UnknownMnemonic { line: u32, text: String },
    /// A `load`/`store` without its mandatory width suffix.
    MissingWidth { line: u32 },
    BadOperand { line: u32, text: String },
    WrongOperandCount { line: u32 },
    UnresolvedLabel { line: u32, name: String },
    DuplicateLabel { line: u32, name: String },
    /// A label defined past the last instruction.
    DanglingLabel { line: u32, name: String },
    BadDirective { line: u32, text: String },
    /// Static segment larger than the segment capacity.
    DataOverflow { line: u32 },
}

impl core::fmt::Display for ParseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ParseError::Empty => write!(f, "program has no instructions"),
            ParseError::UnknownMnemonic { line, text } => {
                write!(f, "line {line}: unknown mnemonic `{text}`")
            }
            ParseError::MissingWidth { line } => {
                write!(f, "line {line}: load/store requires a width suffix (.1/.2/.4/.8)")
            }
            ParseError::BadOperand { line, text } => {
                write!(f, "line {line}: bad operand `{text}`")
            }
            ParseError::WrongOperandCount { line } => {
                write!(f, "line {line}: wrong number of operands")
            }
            ParseError::UnresolvedLabel { line, name } => {
                write!(f, "line {line}: unresolved label `{name}`")
            }
            ParseError::DuplicateLabel { line, name } => {
                write!(f, "line {line}: duplicate label `{name}`")
            }
            ParseError::DanglingLabel { line, name } => {
                write!(f, "line {line}: label `{name}` points past the last instruction")
            }
            ParseError::BadDirective { line, text } => {
                write!(f, "line {line}: bad directive `{text}`")
            }
            ParseError::DataOverflow { line } => {
                write!(f, "line {line}: static segment overflow")
            }
        }
    }
}

struct PendingInsn {
    line: u32,
    mnemonic: String,
    operands: Vec<String>,
}

/// Assemble `source` into a [`Program`].
pub fn load_program(source: &str) -> Result<Program, ParseError> {
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut data_labels: BTreeMap<String, u64> = BTreeMap::new();
    let mut data: Vec<u8> = Vec::new();
    let mut pending: Vec<PendingInsn> = Vec::new();
    let mut entry_label: Option<(u32, String)> = None;
    let mut last_label: Option<(u32, String)> = None;

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx as u32 + 1;
        let mut text = match raw.find(';') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();

        // Leading `name:` definitions; more than one per line is legal.
        while let Some(colon) = text.find(':') {
            let candidate = text[..colon].trim();
            if !is_ident(candidate) {
                break;
            }
            if labels.contains_key(candidate) || data_labels.contains_key(candidate) {
                return Err(ParseError::DuplicateLabel { line: line_no, name: candidate.to_owned() });
            }
            labels.insert(candidate.to_owned(), pending.len());
            last_label = Some((line_no, candidate.to_owned()));
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }

        if let Some(rest) = text.strip_prefix('.') {
            parse_directive(line_no, rest, &labels, &mut data_labels, &mut data, &mut entry_label)?;
            continue;
        }

        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        let operands: Vec<String> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(|s| s.trim().to_owned()).collect()
        };
        pending.push(PendingInsn { line: line_no, mnemonic: mnemonic.to_owned(), operands });
        last_label = None;
    }

    if pending.is_empty() {
        return Err(ParseError::Empty);
    }
    if let Some((line, name)) = last_label {
        if labels.get(&name) == Some(&pending.len()) {
            return Err(ParseError::DanglingLabel { line, name });
        }
    }

    let ctx = Resolver { labels: &labels, data_labels: &data_labels };
    let mut instructions = Vec::with_capacity(pending.len());
    for p in &pending {
        instructions.push(parse_insn(p, &ctx)?);
    }

    let entry = match entry_label {
        None => 0,
        Some((line, name)) => *labels
            .get(&name)
            .ok_or(ParseError::UnresolvedLabel { line, name: name.clone() })?,
    };

    Ok(Program { instructions, labels, data_labels, entry, data })
}

fn parse_directive(
    line: u32,
    rest: &str,
    labels: &BTreeMap<String, usize>,
    data_labels: &mut BTreeMap<String, u64>,
    data: &mut Vec<u8>,
    entry_label: &mut Option<(u32, String)>,
) -> Result<(), ParseError> {
    let mut parts = rest.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let bad = || ParseError::BadDirective { line, text: format!(".{rest}") };
    match kind {
        "entry" => {
            let name = parts.next().ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            *entry_label = Some((line, name.to_owned()));
        }
        "zero" | "byte" => {
            let name = parts.next().ok_or_else(bad)?;
            if !is_ident(name) {
                return Err(bad());
            }
            if labels.contains_key(name) || data_labels.contains_key(name) {
                return Err(ParseError::DuplicateLabel { line, name: name.to_owned() });
            }
            data_labels.insert(name.to_owned(), STATIC_BASE + data.len() as u64);
            if kind == "zero" {
                let size = parts.next().ok_or_else(bad)?;
                if parts.next().is_some() {
                    return Err(bad());
                }
                let size: usize = parse_u64(size).ok_or_else(bad)? as usize;
                data.resize(data.len() + size, 0);
            } else {
                let mut any = false;
                for v in parts {
                    let v = parse_u64(v).ok_or_else(bad)?;
                    if v > 0xff {
                        return Err(bad());
                    }
                    data.push(v as u8);
                    any = true;
                }
                if !any {
                    return Err(bad());
                }
            }
            if data.len() > STATIC_CAP {
                return Err(ParseError::DataOverflow { line });
            }
        }
        _ => return Err(bad()),
    }
    Ok(())
}

struct Resolver<'a> {
    labels: &'a BTreeMap<String, usize>,
    data_labels: &'a BTreeMap<String, u64>,
}

fn parse_insn(p: &PendingInsn, ctx: &Resolver<'_>) -> Result<Instruction, ParseError> {
    let line = p.line;
    let (base, suffix) = match p.mnemonic.split_once('.') {
        Some((b, s)) => (b, Some(s)),
        None => (p.mnemonic.as_str(), None),
    };

    let width = |required: bool| -> Result<Option<Width>, ParseError> {
        match suffix {
            Some(s) => Width::from_suffix(s)
                .map(Some)
                .ok_or(ParseError::UnknownMnemonic { line, text: p.mnemonic.clone() }),
            None if required => Err(ParseError::MissingWidth { line }),
            None => Ok(None),
        }
    };
    if suffix.is_some() && base != "load" && base != "store" {
        return Err(ParseError::UnknownMnemonic { line, text: p.mnemonic.clone() });
    }

    let argc = |n: usize| -> Result<(), ParseError> {
        if p.operands.len() == n {
            Ok(())
        } else {
            Err(ParseError::WrongOperandCount { line })
        }
    };
    let reg = |i: usize| parse_reg(line, &p.operands[i]);
    let opnd = |i: usize| parse_operand(line, &p.operands[i], ctx);
    let mem = |i: usize| parse_mem(line, &p.operands[i], ctx);
    let target = |i: usize| -> Result<usize, ParseError> {
        let name = &p.operands[i];
        if !is_ident(name) {
            return Err(ParseError::BadOperand { line, text: name.clone() });
        }
        ctx.labels
            .get(name.as_str())
            .copied()
            .ok_or_else(|| ParseError::UnresolvedLabel { line, name: name.clone() })
    };

    let insn = match base {
        "mov" => {
            argc(2)?;
            Instruction::Mov { dst: reg(0)?, src: opnd(1)? }
        }
        "load" => {
            let w = width(true)?.unwrap();
            argc(2)?;
            Instruction::Load { width: w, dst: reg(0)?, mem: mem(1)? }
        }
        "store" => {
            let w = width(true)?.unwrap();
            argc(2)?;
            Instruction::Store { width: w, mem: mem(0)?, src: opnd(1)? }
        }
        "add" | "sub" | "and" | "or" | "xor" => {
            argc(2)?;
            let op = match base {
                "add" => AluOp::Add,
                "sub" => AluOp::Sub,
                "and" => AluOp::And,
                "or" => AluOp::Or,
                _ => AluOp::Xor,
            };
            Instruction::Alu { op, dst: reg(0)?, src: opnd(1)? }
        }
        "cmp" => {
            argc(2)?;
            Instruction::Cmp { a: opnd(0)?, b: opnd(1)? }
        }
        "jmp" => {
            argc(1)?;
            Instruction::Jmp { target: target(0)? }
        }
        "jz" | "jnz" | "jlt" | "jge" => {
            argc(1)?;
            let cond = match base {
                "jz" => Cond::Eq,
                "jnz" => Cond::Ne,
                "jlt" => Cond::Lt,
                _ => Cond::Ge,
            };
            Instruction::JmpIf { cond, target: target(0)? }
        }
        "call" => {
            argc(1)?;
            Instruction::Call { target: target(0)? }
        }
        "ret" => {
            argc(0)?;
            Instruction::Ret
        }
        "alloc" => {
            argc(2)?;
            Instruction::Trap(TrapInsn::Alloc { dst: reg(0)?, size: opnd(1)? })
        }
        "free" => {
            argc(1)?;
            Instruction::Trap(TrapInsn::Free { addr: opnd(0)? })
        }
        "recv" => {
            argc(3)?;
            Instruction::Trap(TrapInsn::Recv { len_dst: reg(0)?, buf: opnd(1)?, cap: opnd(2)? })
        }
        "send" => {
            argc(2)?;
            Instruction::Trap(TrapInsn::Send { buf: opnd(0)?, len: opnd(1)? })
        }
        "close" => {
            argc(0)?;
            Instruction::Trap(TrapInsn::Close)
        }
        "shutdown_rd" => {
            argc(0)?;
            Instruction::Trap(TrapInsn::ShutdownRead)
        }
        "halt" => {
            argc(0)?;
            Instruction::Trap(TrapInsn::Halt)
        }
        _ => return Err(ParseError::UnknownMnemonic { line, text: p.mnemonic.clone() }),
    };
    Ok(insn)
}

fn parse_reg(line: u32, text: &str) -> Result<u8, ParseError> {
    reg_index(text).ok_or_else(|| ParseError::BadOperand { line, text: text.to_owned() })
}

fn reg_index(text: &str) -> Option<u8> {
    if text == "sp" {
        return Some(REG_SP);
    }
    let n = text.strip_prefix('r')?;
    let n: u8 = n.parse().ok()?;
    (n < GPR_COUNT).then_some(n)
}

fn parse_operand(line: u32, text: &str, ctx: &Resolver<'_>) -> Result<Operand, ParseError> {
    if let Some(r) = reg_index(text) {
        return Ok(Operand::Reg(r));
    }
    if let Some(v) = parse_i64(text) {
        return Ok(Operand::Imm(v as u64));
    }
    if is_ident(text) {
        if let Some(&addr) = ctx.data_labels.get(text) {
            return Ok(Operand::Imm(addr));
        }
        return Err(ParseError::UnresolvedLabel { line, name: text.to_owned() });
    }
    Err(ParseError::BadOperand { line, text: text.to_owned() })
}

fn parse_mem(line: u32, text: &str, ctx: &Resolver<'_>) -> Result<MemRef, ParseError> {
    let bad = || ParseError::BadOperand { line, text: text.to_owned() };
    let inner = text.strip_prefix('[').and_then(|t| t.strip_suffix(']')).ok_or_else(bad)?.trim();

    // Split `base + off` / `base - off`, leaving the base to the left of the
    // first +/- past position 0.
    let split = inner.char_indices().skip(1).find(|&(_, c)| c == '+' || c == '-');
    let (base_text, offset) = match split {
        None => (inner, 0i64),
        Some((pos, sign)) => {
            let off_text = inner[pos + 1..].trim();
            let off = parse_i64(off_text).ok_or_else(bad)?;
            (inner[..pos].trim(), if sign == '-' { -off } else { off })
        }
    };

    let base = if let Some(r) = reg_index(base_text) {
        MemBase::Reg(r)
    } else if is_ident(base_text) {
        match ctx.data_labels.get(base_text) {
            Some(&addr) => MemBase::Abs(addr),
            None => {
                return Err(ParseError::UnresolvedLabel { line, name: base_text.to_owned() })
            }
        }
    } else {
        return Err(bad());
    };
    Ok(MemRef { base, offset })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_u64(text: &str) -> Option<u64> {
    if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else if text.chars().all(|c| c.is_ascii_digit()) && !text.is_empty() {
        text.parse().ok()
    } else {
        None
    }
}

fn parse_i64(text: &str) -> Option<i64> {
    if let Some(rest) = text.strip_prefix('-') {
        let v = parse_u64(rest)?;
        (v <= 1u64 << 63).then(|| (v as i64).wrapping_neg())
    } else {
        // Full-range immediates such as 0xffffffffffffffff reinterpret as-is.
        parse_u64(text).map(|v| v as i64)
    }
}
