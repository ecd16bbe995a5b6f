//! Execution sessions of the toy VM.
//!
//! A session owns the register file, the three data segments, the bump
//! allocator state and the connection state. Execution is fully
//! deterministic: the only ambient input is the seed, which perturbs the heap
//! base so that logically identical runs see different concrete pointers,
//! and the input messages pushed by the driver.
//!
//! Contract highlights:
//! * Allocation is bump-only and 16-byte aligned; freed memory is recorded
//!   but never recycled, so every address maps to at most one allocation.
//! * Fresh allocations read back as zero.
//! * After `shutdown_rd` (or `close`) a `recv` parks the session forever;
//!   queued input is never delivered.
//! * Every event carries a timestamp from a session-monotonic clock that the
//!   driver shares when it logs its own I/O records.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::isa::*;
use super::{HEAP_CAP, STACK_BASE, STACK_SIZE, STATIC_BASE};

/// Instruction budget for a single `run_until_trap` call; exhausting it is a
/// fault, which keeps runaway loops from hanging the learner.
pub const DEFAULT_FUEL: u64 = 200_000;

#[derive(Clone, Copy, Debug)]
pub struct VmConfig {
    pub fuel_per_run: u64,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig { fuel_per_run: DEFAULT_FUEL }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Running,
    AwaitingInput,
    Closed,
    Halted,
    Faulted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub pc: usize,
    pub reason: FaultReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultReason {
    OutOfBounds { addr: u64, width: u8 },
    StackOverflow,
    HeapExhausted { requested: u64 },
    InvalidFree { addr: u64 },
    FuelExhausted,
    BadReturn { target: u64 },
    PcOutOfRange,
}

/// One allocator record; `position` is the index in the session's combined
/// alloc/free log and is what snapshot alignment keys on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiveAlloc {
    pub addr: u64,
    pub size: u64,
    /// Call-site identifier: the instruction index of the `alloc`.
    pub context: u64,
    pub position: u32,
    pub freed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// An input message was copied into guest memory.
    ReadReturned { addr: u64, len: u64, payload: Vec<u8> },
    /// An output message is about to leave guest memory; the payload is
    /// captured before anything else executes.
    WriteAboutToExecute { addr: u64, len: u64, payload: Vec<u8> },
    Allocated { addr: u64, size: u64, context: u64, position: u32 },
    Freed { addr: u64, position: u32 },
    Closed,
    ShutdownRead,
    /// Synthesized by the watchpoint monitor, never by the VM itself.
    WatchpointRead { addr: u64, width: u8, pc: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionEvent {
    pub kind: EventKind,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Event(ExecutionEvent),
    /// Parked at `recv`; the pc stays on the `recv` so execution can resume
    /// once input arrives (or park again forever after a read shutdown).
    AwaitingInput,
    Halted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Event(ExecutionEvent),
    AwaitingInput,
    Halted,
}

/// Per-instruction observation hooks used by the taint tracker, watchpoint
/// monitor and invariant tests. Default impls are no-ops.
pub trait Tracer {
    fn mem_read(&mut self, _addr: u64, _width: u8, _value: u64) {}
    fn mem_write(&mut self, _addr: u64, _width: u8, _value: u64) {}
    fn branch(&mut self, _pc: usize, _taken: bool) {}
}

pub struct NoTrace;

impl Tracer for NoTrace {}

/// Complete serializable session state: registers, segments, allocator and
/// connection flags. This is both the snapshot payload and what a session
/// restores from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VmContext {
    pub regs: [u64; REG_COUNT],
    pub static_mem: Vec<u8>,
    pub stack: Vec<u8>,
    pub heap: Vec<u8>,
    pub seed: u64,
    pub heap_base: u64,
    pub bump: u64,
    pub clock: u64,
    pub instruction_count: u64,
    pub read_shutdown: bool,
    pub closed: bool,
    pub halted: bool,
    pub parked: bool,
    pub allocations: Vec<LiveAlloc>,
    pub next_position: u32,
    pub pending_input: Vec<Vec<u8>>,
}

impl VmContext {
    /// Canonical byte encoding, used for snapshot dumps and content hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            64 + self.static_mem.len() + self.stack.len() + self.heap.len(),
        );
        out.extend_from_slice(b"SNAPCTX1");
        for r in self.regs {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for v in [self.seed, self.heap_base, self.bump, self.clock, self.instruction_count] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(
            self.read_shutdown as u8
                | (self.closed as u8) << 1
                | (self.halted as u8) << 2
                | (self.parked as u8) << 3,
        );
        for seg in [&self.static_mem, &self.stack, &self.heap] {
            out.extend_from_slice(&(seg.len() as u32).to_le_bytes());
            out.extend_from_slice(seg);
        }
        out.extend_from_slice(&(self.allocations.len() as u32).to_le_bytes());
        for a in &self.allocations {
            out.extend_from_slice(&a.addr.to_le_bytes());
            out.extend_from_slice(&a.size.to_le_bytes());
            out.extend_from_slice(&a.context.to_le_bytes());
            out.extend_from_slice(&a.position.to_le_bytes());
            out.push(a.freed as u8);
        }
        out.extend_from_slice(&self.next_position.to_le_bytes());
        out.extend_from_slice(&(self.pending_input.len() as u32).to_le_bytes());
        for msg in &self.pending_input {
            out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
            out.extend_from_slice(msg);
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Heap segment base for a seed: a fixed region plus a seed-derived,
/// 16-byte-aligned offset, so pointer values drift across seeds.
pub fn heap_base_for_seed(seed: u64) -> u64 {
    0x4000_0000 + ((splitmix64(seed) & 0xffff) << 4)
}

enum Seg {
    Static,
    Stack,
    Heap,
}

pub struct VmSession {
    program: Arc<Program>,
    cfg: VmConfig,
    ctx: VmContext,
    fault: Option<Fault>,
}

impl VmSession {
    pub fn new(program: Arc<Program>, seed: u64, cfg: VmConfig) -> VmSession {
        let static_len = program.data.len().next_multiple_of(16).max(16);
        let mut static_mem = vec![0u8; static_len];
        static_mem[..program.data.len()].copy_from_slice(&program.data);
        let heap_base = heap_base_for_seed(seed);
        let mut regs = [0u64; REG_COUNT];
        regs[REG_SP as usize] = STACK_BASE + STACK_SIZE as u64;
        regs[REG_PC as usize] = program.entry as u64;
        VmSession {
            program,
            cfg,
            ctx: VmContext {
                regs,
                static_mem,
                stack: vec![0u8; STACK_SIZE],
                heap: vec![0u8; HEAP_CAP],
                seed,
                heap_base,
                bump: 0,
                clock: 0,
                instruction_count: 0,
                read_shutdown: false,
                closed: false,
                halted: false,
                parked: false,
                allocations: Vec::new(),
                next_position: 0,
                pending_input: Vec::new(),
            },
            fault: None,
        }
    }

    /// Rebuild a session from a snapshot, e.g. to replay execution from a
    /// watchpoint hit. The program must be the one the snapshot was taken on.
    pub fn restore(program: Arc<Program>, ctx: &VmContext, cfg: VmConfig) -> VmSession {
        VmSession { program, cfg, ctx: ctx.clone(), fault: None }
    }

    pub fn snapshot_memory(&self) -> VmContext {
        self.ctx.clone()
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn status(&self) -> Status {
        if self.fault.is_some() {
            Status::Faulted
        } else if self.ctx.halted {
            Status::Halted
        } else if self.ctx.parked {
            if self.ctx.closed {
                Status::Closed
            } else {
                Status::AwaitingInput
            }
        } else if self.ctx.closed {
            Status::Closed
        } else {
            Status::Running
        }
    }

    pub fn pc(&self) -> usize {
        self.ctx.regs[REG_PC as usize] as usize
    }

    pub fn reg(&self, i: u8) -> u64 {
        self.ctx.regs[i as usize]
    }

    pub fn seed(&self) -> u64 {
        self.ctx.seed
    }

    pub fn heap_base(&self) -> u64 {
        self.ctx.heap_base
    }

    pub fn instruction_count(&self) -> u64 {
        self.ctx.instruction_count
    }

    pub fn allocations(&self) -> &[LiveAlloc] {
        &self.ctx.allocations
    }

    /// The allocation whose slot contains `addr`, freed or not. Slots are
    /// never recycled, so the answer is unique.
    pub fn alloc_containing(&self, addr: u64) -> Option<&LiveAlloc> {
        self.ctx
            .allocations
            .iter()
            .find(|a| addr >= a.addr && addr < a.addr + a.size.max(1))
    }

    /// Valid address ranges of the three segments, in a fixed order.
    pub fn address_ranges(&self) -> [Range<u64>; 3] {
        [
            STATIC_BASE..STATIC_BASE + self.ctx.static_mem.len() as u64,
            STACK_BASE..STACK_BASE + STACK_SIZE as u64,
            self.ctx.heap_base..self.ctx.heap_base + HEAP_CAP as u64,
        ]
    }

    pub fn input_closed(&self) -> bool {
        self.ctx.read_shutdown || self.ctx.closed
    }

    pub fn push_input(&mut self, msg: Vec<u8>) {
        self.ctx.pending_input.push(msg);
        if !self.input_closed() {
            self.ctx.parked = false;
        }
    }

    /// Next tick of the session-monotonic clock. The driver uses this to
    /// stamp its own I/O log entries on the same timeline as VM events.
    pub fn next_tick(&mut self) -> u64 {
        let t = self.ctx.clock;
        self.ctx.clock += 1;
        t
    }

    /// Raw memory peek across segment boundaries is not allowed; returns
    /// `None` unless the whole range lies in one segment.
    pub fn read_mem(&self, addr: u64, len: usize) -> Option<Vec<u8>> {
        let (seg, off) = self.locate(addr, len as u64)?;
        let slice = match seg {
            Seg::Static => &self.ctx.static_mem,
            Seg::Stack => &self.ctx.stack,
            Seg::Heap => &self.ctx.heap,
        };
        Some(slice[off..off + len].to_vec())
    }

    /// Instrumentation poke used by analyses (value substitution); not
    /// reachable from guest code.
    pub fn write_mem(&mut self, addr: u64, bytes: &[u8]) -> bool {
        let Some((seg, off)) = self.locate(addr, bytes.len() as u64) else {
            return false;
        };
        let slice = match seg {
            Seg::Static => &mut self.ctx.static_mem,
            Seg::Stack => &mut self.ctx.stack,
            Seg::Heap => &mut self.ctx.heap,
        };
        slice[off..off + bytes.len()].copy_from_slice(bytes);
        true
    }

    pub fn current_instruction(&self) -> Option<&Instruction> {
        self.program.instructions.get(self.pc())
    }

    /// If the next instruction is a memory load, the address and width it
    /// will read, resolved against the current registers. Watchpoints use
    /// this to capture context before the read executes.
    pub fn peek_load(&self) -> Option<(u64, u8)> {
        match self.current_instruction()? {
            Instruction::Load { width, mem, .. } => {
                Some((self.resolve(*mem), width.bytes()))
            }
            _ => None,
        }
    }

    pub fn run_until_trap(&mut self) -> Result<RunOutcome, Fault> {
        let mut fuel = self.cfg.fuel_per_run;
        loop {
            if fuel == 0 {
                return Err(self.raise(FaultReason::FuelExhausted));
            }
            fuel -= 1;
            match self.step_traced(&mut NoTrace)? {
                StepOutcome::Continue => {}
                StepOutcome::Event(e) => return Ok(RunOutcome::Event(e)),
                StepOutcome::AwaitingInput => return Ok(RunOutcome::AwaitingInput),
                StepOutcome::Halted => return Ok(RunOutcome::Halted),
            }
        }
    }

    /// Execute one instruction, reporting memory accesses and branch
    /// decisions to `tracer`. Faults are sticky.
    pub fn step_traced(&mut self, tracer: &mut dyn Tracer) -> Result<StepOutcome, Fault> {
        if let Some(f) = self.fault {
            return Err(f);
        }
        if self.ctx.halted {
            return Ok(StepOutcome::Halted);
        }
        let pc = self.pc();
        let Some(insn) = self.program.instructions.get(pc).copied() else {
            return Err(self.raise(FaultReason::PcOutOfRange));
        };
        self.ctx.instruction_count += 1;

        macro_rules! fail {
            ($reason:expr) => {
                return Err(self.raise($reason))
            };
        }

        match insn {
            Instruction::Mov { dst, src } => {
                self.ctx.regs[dst as usize] = self.eval(src);
                self.advance(pc);
            }
            Instruction::Load { width, dst, mem } => {
                let addr = self.resolve(mem);
                let v = match self.read_u(addr, width) {
                    Some(v) => v,
                    None => fail!(FaultReason::OutOfBounds { addr, width: width.bytes() }),
                };
                tracer.mem_read(addr, width.bytes(), v);
                self.ctx.regs[dst as usize] = v;
                self.advance(pc);
            }
            Instruction::Store { width, mem, src } => {
                let addr = self.resolve(mem);
                let v = self.eval(src) & width.mask();
                if !self.write_u(addr, width, v) {
                    fail!(FaultReason::OutOfBounds { addr, width: width.bytes() });
                }
                tracer.mem_write(addr, width.bytes(), v);
                self.advance(pc);
            }
            Instruction::Alu { op, dst, src } => {
                let a = self.ctx.regs[dst as usize];
                let b = self.eval(src);
                self.ctx.regs[dst as usize] = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                    AluOp::Xor => a ^ b,
                };
                self.advance(pc);
            }
            Instruction::Cmp { a, b } => {
                let a = self.eval(a);
                let b = self.eval(b);
                self.ctx.regs[REG_FLAGS as usize] = (a == b) as u64 | ((a < b) as u64) << 1;
                self.advance(pc);
            }
            Instruction::Jmp { target } => {
                self.set_pc(target);
            }
            Instruction::JmpIf { cond, target } => {
                let flags = self.ctx.regs[REG_FLAGS as usize];
                let eq = flags & 1 != 0;
                let lt = flags & 2 != 0;
                let taken = match cond {
                    Cond::Eq => eq,
                    Cond::Ne => !eq,
                    Cond::Lt => lt,
                    Cond::Ge => !lt,
                };
                tracer.branch(pc, taken);
                if taken {
                    self.set_pc(target);
                } else {
                    self.advance(pc);
                }
            }
            Instruction::Call { target } => {
                let sp = self.ctx.regs[REG_SP as usize].wrapping_sub(8);
                if sp < STACK_BASE || sp + 8 > STACK_BASE + STACK_SIZE as u64 {
                    fail!(FaultReason::StackOverflow);
                }
                let ret = (pc + 1) as u64;
                self.write_u(sp, Width::B8, ret);
                tracer.mem_write(sp, 8, ret);
                self.ctx.regs[REG_SP as usize] = sp;
                self.set_pc(target);
            }
            Instruction::Ret => {
                let sp = self.ctx.regs[REG_SP as usize];
                if sp < STACK_BASE || sp + 8 > STACK_BASE + STACK_SIZE as u64 {
                    fail!(FaultReason::StackOverflow);
                }
                let target = self.read_u(sp, Width::B8).unwrap();
                tracer.mem_read(sp, 8, target);
                self.ctx.regs[REG_SP as usize] = sp + 8;
                if target as usize >= self.program.instructions.len() {
                    fail!(FaultReason::BadReturn { target });
                }
                self.set_pc(target as usize);
            }
            Instruction::Trap(trap) => return self.exec_trap(pc, trap, tracer),
        }
        Ok(StepOutcome::Continue)
    }

    fn exec_trap(
        &mut self,
        pc: usize,
        trap: TrapInsn,
        tracer: &mut dyn Tracer,
    ) -> Result<StepOutcome, Fault> {
        match trap {
            TrapInsn::Alloc { dst, size } => {
                let size = self.eval(size);
                let slot = size.next_multiple_of(16).max(16);
                if self.ctx.bump + slot > HEAP_CAP as u64 {
                    return Err(self.raise(FaultReason::HeapExhausted { requested: size }));
                }
                let addr = self.ctx.heap_base + self.ctx.bump;
                self.ctx.bump += slot;
                let position = self.ctx.next_position;
                self.ctx.next_position += 1;
                self.ctx.allocations.push(LiveAlloc {
                    addr,
                    size,
                    context: pc as u64,
                    position,
                    freed: false,
                });
                self.ctx.regs[dst as usize] = addr;
                self.advance(pc);
                Ok(StepOutcome::Event(self.event(EventKind::Allocated {
                    addr,
                    size,
                    context: pc as u64,
                    position,
                })))
            }
            TrapInsn::Free { addr } => {
                let addr = self.eval(addr);
                let Some(a) =
                    self.ctx.allocations.iter_mut().find(|a| a.addr == addr && !a.freed)
                else {
                    return Err(self.raise(FaultReason::InvalidFree { addr }));
                };
                a.freed = true;
                let position = self.ctx.next_position;
                self.ctx.next_position += 1;
                self.advance(pc);
                Ok(StepOutcome::Event(self.event(EventKind::Freed { addr, position })))
            }
            TrapInsn::Recv { len_dst, buf, cap } => {
                if self.input_closed() || self.ctx.pending_input.is_empty() {
                    self.ctx.parked = true;
                    return Ok(StepOutcome::AwaitingInput);
                }
                self.ctx.parked = false;
                let msg = self.ctx.pending_input.remove(0);
                let addr = self.eval(buf);
                let cap = self.eval(cap) as usize;
                let n = msg.len().min(cap);
                for (i, &b) in msg[..n].iter().enumerate() {
                    let a = addr + i as u64;
                    if !self.write_u(a, Width::B1, b as u64) {
                        return Err(self.raise(FaultReason::OutOfBounds { addr: a, width: 1 }));
                    }
                    tracer.mem_write(a, 1, b as u64);
                }
                self.ctx.regs[len_dst as usize] = n as u64;
                self.advance(pc);
                Ok(StepOutcome::Event(self.event(EventKind::ReadReturned {
                    addr,
                    len: n as u64,
                    payload: msg[..n].to_vec(),
                })))
            }
            TrapInsn::Send { buf, len } => {
                if self.ctx.closed {
                    // The connection is gone; the write is silently dropped.
                    self.advance(pc);
                    return Ok(StepOutcome::Continue);
                }
                let addr = self.eval(buf);
                let len = self.eval(len);
                let mut payload = Vec::with_capacity(len as usize);
                for i in 0..len {
                    let a = addr + i;
                    let Some(v) = self.read_u(a, Width::B1) else {
                        return Err(self.raise(FaultReason::OutOfBounds { addr: a, width: 1 }));
                    };
                    tracer.mem_read(a, 1, v);
                    payload.push(v as u8);
                }
                self.advance(pc);
                Ok(StepOutcome::Event(self.event(EventKind::WriteAboutToExecute {
                    addr,
                    len,
                    payload,
                })))
            }
            TrapInsn::Close => {
                self.advance(pc);
                if self.ctx.closed {
                    return Ok(StepOutcome::Continue);
                }
                self.ctx.closed = true;
                Ok(StepOutcome::Event(self.event(EventKind::Closed)))
            }
            TrapInsn::ShutdownRead => {
                self.advance(pc);
                if self.ctx.read_shutdown {
                    return Ok(StepOutcome::Continue);
                }
                self.ctx.read_shutdown = true;
                Ok(StepOutcome::Event(self.event(EventKind::ShutdownRead)))
            }
            TrapInsn::Halt => {
                self.ctx.halted = true;
                Ok(StepOutcome::Halted)
            }
        }
    }

    fn event(&mut self, kind: EventKind) -> ExecutionEvent {
        ExecutionEvent { kind, timestamp: self.next_tick() }
    }

    fn raise(&mut self, reason: FaultReason) -> Fault {
        let f = Fault { pc: self.pc(), reason };
        self.fault = Some(f);
        f
    }

    fn advance(&mut self, pc: usize) {
        self.ctx.regs[REG_PC as usize] = (pc + 1) as u64;
    }

    fn set_pc(&mut self, target: usize) {
        self.ctx.regs[REG_PC as usize] = target as u64;
    }

    fn eval(&self, op: Operand) -> u64 {
        match op {
            Operand::Reg(r) => self.ctx.regs[r as usize],
            Operand::Imm(v) => v,
        }
    }

    fn resolve(&self, mem: MemRef) -> u64 {
        let base = match mem.base {
            MemBase::Reg(r) => self.ctx.regs[r as usize],
            MemBase::Abs(a) => a,
        };
        base.wrapping_add(mem.offset as u64)
    }

    fn locate(&self, addr: u64, len: u64) -> Option<(Seg, usize)> {
        let end = addr.checked_add(len)?;
        let ranges = self.address_ranges();
        for (seg, range) in [Seg::Static, Seg::Stack, Seg::Heap].into_iter().zip(ranges) {
            if addr >= range.start && end <= range.end {
                return Some((seg, (addr - range.start) as usize));
            }
        }
        None
    }

    fn read_u(&self, addr: u64, width: Width) -> Option<u64> {
        let n = width.bytes() as usize;
        let (seg, off) = self.locate(addr, n as u64)?;
        let slice = match seg {
            Seg::Static => &self.ctx.static_mem,
            Seg::Stack => &self.ctx.stack,
            Seg::Heap => &self.ctx.heap,
        };
        let mut v = 0u64;
        for i in (0..n).rev() {
            v = v << 8 | slice[off + i] as u64;
        }
        Some(v)
    }

    fn write_u(&mut self, addr: u64, width: Width, v: u64) -> bool {
        let n = width.bytes() as usize;
        let Some((seg, off)) = self.locate(addr, n as u64) else {
            return false;
        };
        let slice = match seg {
            Seg::Static => &mut self.ctx.static_mem,
            Seg::Stack => &mut self.ctx.stack,
            Seg::Heap => &mut self.ctx.heap,
        };
        for i in 0..n {
            slice[off + i] = (v >> (8 * i)) as u8;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::parser::load_program;

    fn session(src: &str, seed: u64) -> VmSession {
        VmSession::new(Arc::new(load_program(src).unwrap()), seed, VmConfig::default())
    }

    const ECHO: &str = "\
start:
  alloc r6, 16
loop:
  recv r0, r6, 16
  send r6, r0
  jmp loop
";

    fn drain(sess: &mut VmSession) -> Vec<ExecutionEvent> {
        let mut events = Vec::new();
        loop {
            match sess.run_until_trap().unwrap() {
                RunOutcome::Event(e) => events.push(e),
                RunOutcome::AwaitingInput | RunOutcome::Halted => return events,
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_event_streams() {
        let runs: Vec<_> = (0..2)
            .map(|_| {
                let mut s = session(ECHO, 7);
                s.push_input(vec![1, 2, 3]);
                drain(&mut s)
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
        assert!(!runs[0].is_empty());
    }

    #[test]
    fn seeds_shift_heap_base_but_not_io() {
        let mut a = session(ECHO, 1);
        let mut b = session(ECHO, 2);
        assert_ne!(a.heap_base(), b.heap_base());
        a.push_input(vec![9]);
        b.push_input(vec![9]);
        let (ea, eb) = (drain(&mut a), drain(&mut b));
        let payloads = |evs: &[ExecutionEvent]| -> Vec<Vec<u8>> {
            evs.iter()
                .filter_map(|e| match &e.kind {
                    EventKind::WriteAboutToExecute { payload, .. } => Some(payload.clone()),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(payloads(&ea), payloads(&eb));
        assert_eq!(payloads(&ea), vec![vec![9u8]]);
    }

    #[test]
    fn fresh_allocations_are_zeroed_and_never_recycled() {
        let src = "\
start:
  alloc r0, 24
  store.8 [r0], 0xffffffffffffffff
  free r0
  alloc r1, 24
  load.8 r2, [r1]
  halt
";
        let mut s = session(src, 3);
        while !matches!(s.run_until_trap().unwrap(), RunOutcome::Halted) {}
        assert_eq!(s.reg(2), 0, "fresh allocation must read back zero");
        assert_ne!(s.reg(0), s.reg(1), "freed slots must not be recycled");
        assert_eq!(s.allocations().len(), 2);
    }

    #[test]
    fn snapshot_roundtrip_is_exact_and_restorable() {
        let mut s = session(ECHO, 11);
        s.push_input(vec![5, 6]);
        let _ = drain(&mut s);
        let snap = s.snapshot_memory();
        assert_eq!(snap, s.snapshot_memory(), "snapshot must be a pure copy");

        let mut restored = VmSession::restore(s.program().clone(), &snap, VmConfig::default());
        restored.push_input(vec![7]);
        s.push_input(vec![7]);
        assert_eq!(drain(&mut s), drain(&mut restored));
    }

    #[test]
    fn out_of_bounds_access_faults() {
        let mut s = session("start: load.8 r0, [r1]\nhalt\n", 0);
        let err = s.run_until_trap().unwrap_err();
        assert!(matches!(err.reason, FaultReason::OutOfBounds { addr: 0, .. }));
        assert_eq!(s.status(), Status::Faulted);
        // Faults are sticky.
        assert_eq!(s.run_until_trap().unwrap_err(), err);
    }

    #[test]
    fn runaway_loop_exhausts_fuel() {
        let mut s = session("spin: jmp spin\n", 0);
        let err = s.run_until_trap().unwrap_err();
        assert_eq!(err.reason, FaultReason::FuelExhausted);
    }

    #[test]
    fn recv_after_shutdown_parks_forever() {
        let src = "\
start:
  alloc r6, 16
  recv r0, r6, 16
  shutdown_rd
loop:
  recv r0, r6, 16
  jmp loop
";
        let mut s = session(src, 0);
        s.push_input(vec![1]);
        s.push_input(vec![2]);
        let events = drain(&mut s);
        let reads = events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::ReadReturned { .. }))
            .count();
        assert_eq!(reads, 1, "input after shutdown_rd must never be delivered");
        assert_eq!(s.status(), Status::AwaitingInput);
        s.push_input(vec![3]);
        assert_eq!(s.run_until_trap().unwrap(), RunOutcome::AwaitingInput);
    }

    #[test]
    fn event_timestamps_strictly_increase() {
        let mut s = session(ECHO, 5);
        s.push_input(vec![1]);
        s.push_input(vec![2]);
        let events = drain(&mut s);
        for w in events.windows(2) {
            assert!(w[0].timestamp < w[1].timestamp);
        }
    }

    #[test]
    fn step_tracing_reports_accesses_and_branches() {
        struct Counter {
            reads: Vec<(u64, u8, u64)>,
            writes: Vec<(u64, u8, u64)>,
            branches: Vec<(usize, bool)>,
        }
        impl Tracer for Counter {
            fn mem_read(&mut self, a: u64, w: u8, v: u64) {
                self.reads.push((a, w, v));
            }
            fn mem_write(&mut self, a: u64, w: u8, v: u64) {
                self.writes.push((a, w, v));
            }
            fn branch(&mut self, pc: usize, taken: bool) {
                self.branches.push((pc, taken));
            }
        }
        let src = "\
.zero cell 8
start:
  store.4 [cell], 0x01020304
  load.4 r1, [cell]
  cmp r1, 0x01020304
  jz done
  halt
done:
  halt
";
        let mut s = session(src, 0);
        let mut t = Counter { reads: Vec::new(), writes: Vec::new(), branches: Vec::new() };
        loop {
            match s.step_traced(&mut t).unwrap() {
                StepOutcome::Halted => break,
                _ => {}
            }
        }
        assert_eq!(t.writes, vec![(STATIC_BASE, 4, 0x01020304)]);
        assert_eq!(t.reads, vec![(STATIC_BASE, 4, 0x01020304)]);
        assert_eq!(t.branches, vec![(3, true)]);
    }
}
