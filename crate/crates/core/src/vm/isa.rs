//! Instruction set of the toy VM.
//!
//! The machine is a register machine with 8-byte little-endian words and a
//! Harvard layout: code is a list of [`Instruction`]s addressed by index,
//! data lives in three byte-addressed segments (static, stack, heap).

use alloc::string::String;
use alloc::vec::Vec;
use alloc::collections::BTreeMap;

/// General purpose registers `r0`..`r7`.
pub const GPR_COUNT: u8 = 8;
/// Register index of the stack pointer.
pub const REG_SP: u8 = 8;
/// Register index of the program counter (instruction index, not an address).
pub const REG_PC: u8 = 9;
/// Register index of the comparison flags word (bit 0 = equal, bit 1 = below).
pub const REG_FLAGS: u8 = 10;
/// Total register file size, including `sp`, `pc` and flags.
pub const REG_COUNT: usize = 11;

/// Access width of a `load`/`store`, in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Width {
    B1,
    B2,
    B4,
    B8,
}

impl Width {
    pub fn bytes(self) -> u8 {
        match self {
            Width::B1 => 1,
            Width::B2 => 2,
            Width::B4 => 4,
            Width::B8 => 8,
        }
    }

    pub fn from_suffix(s: &str) -> Option<Width> {
        match s {
            "1" => Some(Width::B1),
            "2" => Some(Width::B2),
            "4" => Some(Width::B4),
            "8" => Some(Width::B8),
            _ => None,
        }
    }

    /// Mask keeping only the low `bytes()` bytes of a word.
    pub fn mask(self) -> u64 {
        match self {
            Width::B8 => u64::MAX,
            w => (1u64 << (8 * w.bytes() as u32)) - 1,
        }
    }
}

/// A register-or-immediate source operand. Data labels assemble to `Imm`
/// holding the label's static-segment address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    Reg(u8),
    Imm(u64),
}

/// Base of a memory operand: a register or an absolute (data label) address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemBase {
    Reg(u8),
    Abs(u64),
}

/// A memory operand `[base + offset]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemRef {
    pub base: MemBase,
    pub offset: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
}

/// Condition of a conditional jump, evaluated against the flags register.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    /// `jz`: last compare was equal.
    Eq,
    /// `jnz`: last compare was not equal.
    Ne,
    /// `jlt`: unsigned below.
    Lt,
    /// `jge`: unsigned at-or-above.
    Ge,
}

/// Trap instructions: the system call surface of the toy machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrapInsn {
    /// `alloc dst, size`: bump-allocate zeroed heap memory.
    Alloc { dst: u8, size: Operand },
    /// `free addr`: release a previous allocation (never recycled).
    Free { addr: Operand },
    /// `recv len_dst, buf, cap`: block for the next input message.
    Recv { len_dst: u8, buf: Operand, cap: Operand },
    /// `send buf, len`: emit an output message.
    Send { buf: Operand, len: Operand },
    /// `close`: close the connection; execution continues.
    Close,
    /// `shutdown_rd`: stop accepting input; execution continues.
    ShutdownRead,
    /// `halt`: stop the program.
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instruction {
    Mov { dst: u8, src: Operand },
    Load { width: Width, dst: u8, mem: MemRef },
    Store { width: Width, mem: MemRef, src: Operand },
    Alu { op: AluOp, dst: u8, src: Operand },
    Cmp { a: Operand, b: Operand },
    Jmp { target: usize },
    JmpIf { cond: Cond, target: usize },
    Call { target: usize },
    Ret,
    Trap(TrapInsn),
}

/// A loaded program: instructions plus the initial static segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    /// Code labels, name to instruction index.
    pub labels: BTreeMap<String, usize>,
    /// Data labels, name to static-segment address.
    pub data_labels: BTreeMap<String, u64>,
    /// Instruction index execution starts at.
    pub entry: usize,
    /// Initial content of the static segment.
    pub data: Vec<u8>,
}
