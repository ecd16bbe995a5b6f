//! A deterministic toy virtual machine used as the system under learning.
//!
//! The machine is register based with three disjoint data segments (static,
//! stack, heap) and a Harvard-style instruction store: the program counter
//! indexes instructions, never data. All multi-byte values are little endian.
//! Network and allocator effects are modeled as trap instructions so a
//! driver outside the VM owns scheduling and observation.

pub mod isa;
pub mod parser;
pub mod session;

pub use isa::{
    AluOp, Cond, Instruction, MemBase, MemRef, Operand, Program, TrapInsn, Width, GPR_COUNT,
    REG_COUNT, REG_FLAGS, REG_PC, REG_SP,
};
pub use parser::{load_program, ParseError};
pub use session::{
    heap_base_for_seed, EventKind, ExecutionEvent, Fault, FaultReason, LiveAlloc, NoTrace,
    RunOutcome, Status, StepOutcome, Tracer, VmConfig, VmContext, VmSession, DEFAULT_FUEL,
};

/// Base address of the static data segment.
pub const STATIC_BASE: u64 = 0x1000;
/// Upper bound on static data declared by a program.
pub const STATIC_CAP: usize = 4096;
/// Base address of the stack segment; the stack pointer starts at its top.
pub const STACK_BASE: u64 = 0x0010_0000;
/// Stack segment size in bytes.
pub const STACK_SIZE: usize = 4096;
/// Heap segment size in bytes; the bump allocator faults past this.
pub const HEAP_CAP: usize = 4096;
