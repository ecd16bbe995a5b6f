//! Taint-driven classification of watched memory reads.
//!
//! When two hypothesis states differ only in a few bytes of heap memory, the
//! deciding question is whether the implementation's *behavior* can ever
//! depend on those bytes. [`classify`] answers it for one captured read: the
//! machine is restored to the instant of the read, the watched bytes are
//! marked tainted, and taint is propagated through data movement and
//! arithmetic until it reaches a conditional branch. At that branch the run
//! forks: the recorded side continues as captured, and an alternate side is
//! produced by rewriting the watched location with a value that flips the
//! compare feeding the branch. If either side goes on to write candidate
//! state memory, the location is state-defining; a location whose value is
//! read, transformed, and stored without ever steering a branch is not.
//!
//! The compare inversion is solved directly from the toy ISA's semantics.
//! Values that reach a compare through plain add/sub chains are tracked as
//! `value = ±target + offset`, which makes the complementary assignment a
//! one-step rewrite; everything else falls back to a small candidate scan.
//! Every constructed assignment is validated by re-execution, so an
//! over-approximate track never produces a wrong fork, only a failed one.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::collections::{BTreeMap, BTreeSet};
use core::fmt;
use core::ops::Range;

use crate::memdiff::{align_allocations, CandidateSet, MemoryLocation};
use crate::monitor::{AccessKind, AllocKind, AllocationRecord, MemoryAccess, WatchpointHit};
use crate::vm::{
    AluOp, Cond, Instruction, MemRef, Operand, Program, StepOutcome, Tracer, TrapInsn, VmConfig,
    VmContext, VmSession, REG_COUNT, REG_FLAGS, REG_SP,
};

/// Default instruction budget per analysis phase: the pre-branch taint walk
/// and each fork get this many steps on their own.
pub const DEFAULT_WINDOW: u32 = 512;

/// Parameters of one classification.
#[derive(Clone)]
pub struct TaintConfig<'a> {
    /// Instruction window bounding each phase of the analysis.
    pub window: u32,
    /// Candidate state memory; a fork writing any of these is the verdict.
    pub candidates: &'a CandidateSet,
    /// Program counter of the read that triggered the watchpoint.
    pub start_pc: usize,
    /// The location whose influence is being tested, in base coordinates.
    pub target: MemoryLocation,
}

impl<'a> TaintConfig<'a> {
    pub fn new(candidates: &'a CandidateSet, start_pc: usize, target: MemoryLocation) -> Self {
        TaintConfig { window: DEFAULT_WINDOW, candidates, start_pc, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerdictKind {
    /// Some fork of a taint-conditioned branch writes candidate state memory.
    StateDefining,
    /// No branch inside the window depends on the location, or both forks
    /// leave candidate memory alone.
    NotStateDefining,
    /// A tainted branch exists but no alternate assignment could be made to
    /// flip it, so the forked side stays unobserved.
    Inconclusive,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::StateDefining => "StateDefining",
            VerdictKind::NotStateDefining => "NotStateDefining",
            VerdictKind::Inconclusive => "Inconclusive",
        }
    }
}

/// Outcome of one classification. `StateDefining` always carries both
/// evidence pcs; the other kinds keep whatever was established before the
/// analysis stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub kind: VerdictKind,
    /// The first taint-conditioned branch, when one was reached.
    pub branch_pc: Option<usize>,
    /// The state-memory write that decided a `StateDefining` verdict.
    pub write_pc: Option<usize>,
}

impl Verdict {
    fn not_state_defining(branch_pc: Option<usize>) -> Verdict {
        Verdict { kind: VerdictKind::NotStateDefining, branch_pc, write_pc: None }
    }

    fn state_defining(branch_pc: usize, write_pc: usize) -> Verdict {
        Verdict {
            kind: VerdictKind::StateDefining,
            branch_pc: Some(branch_pc),
            write_pc: Some(write_pc),
        }
    }

    /// One JSON line per verdict; instruction indices stand in for source
    /// lines since toy programs carry no debug table.
    pub fn json(&self) -> serde_json::Value {
        serde_json::json!({
            "verdict": self.kind.as_str(),
            "branch_pc": self.branch_pc,
            "write_pc": self.write_pc,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataflowError {
    /// The captured context cannot be replayed against this configuration.
    RestoreFailure(String),
}

impl fmt::Display for DataflowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataflowError::RestoreFailure(why) => write!(f, "restore failure: {why}"),
        }
    }
}

/// True when the first access overlapping `range` is a read; a location the
/// trace never touches counts as read-first by convention, so write-first
/// gating only ever skips locations with positive evidence of an overwrite.
pub fn read_before_write(accesses: &[MemoryAccess], range: &Range<u64>) -> bool {
    for a in accesses {
        if a.addr < range.end && a.addr + a.width as u64 > range.start {
            return a.kind == AccessKind::Read;
        }
    }
    true
}

/// Allocation rows equivalent to what the monitor would have logged for this
/// context, for aligning base-coordinate locations onto the captured run.
fn alloc_records(ctx: &VmContext) -> Vec<AllocationRecord> {
    ctx.allocations
        .iter()
        .map(|a| AllocationRecord {
            position: a.position,
            kind: AllocKind::Alloc,
            size: a.size,
            context: a.context,
            address: a.addr,
            timestamp: 0,
        })
        .collect()
}

// --- taint lattice -------------------------------------------------------

/// What one register or memory span carries, relative to the target value t.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Taint {
    Clean,
    /// Depends on t in a shape the tracker lost.
    Opaque,
    /// Exactly `±t + off` (wrapping 64-bit).
    Affine { neg: bool, off: u64 },
}

impl Taint {
    fn tainted(self) -> bool {
        self != Taint::Clean
    }
}

fn join(a: Taint, b: Taint) -> Taint {
    if a.tainted() || b.tainted() {
        Taint::Opaque
    } else {
        Taint::Clean
    }
}

/// Byte-granular memory taint plus exact-span value tracking, so a stored
/// affine value survives a store/load round trip of the same width.
#[derive(Default)]
struct MemTaint {
    bytes: BTreeSet<u64>,
    spans: BTreeMap<u64, (u8, Taint)>,
}

impl MemTaint {
    fn store(&mut self, addr: u64, n: u8, t: Taint) {
        let end = addr + n as u64;
        let stale: Vec<u64> = self
            .spans
            .range(addr.saturating_sub(7)..end)
            .filter(|(&a, &(w, _))| a + w as u64 > addr)
            .map(|(&a, _)| a)
            .collect();
        for a in stale {
            self.spans.remove(&a);
        }
        if t.tainted() {
            self.bytes.extend(addr..end);
            self.spans.insert(addr, (n, t));
        } else {
            let clean: Vec<u64> = self.bytes.range(addr..end).copied().collect();
            for a in clean {
                self.bytes.remove(&a);
            }
        }
    }

    fn load(&self, addr: u64, n: u8) -> Taint {
        if self.bytes.range(addr..addr + n as u64).next().is_none() {
            return Taint::Clean;
        }
        match self.spans.get(&addr) {
            Some(&(w, t)) if w == n => t,
            _ => Taint::Opaque,
        }
    }
}

/// The compare whose flags the first tainted branch consumed.
#[derive(Clone, Copy, Debug)]
struct CmpRecord {
    a_val: u64,
    b_val: u64,
    a_taint: Taint,
    b_taint: Taint,
}

struct TaintState {
    regs: [Taint; REG_COUNT],
    mem: MemTaint,
    last_cmp: Option<CmpRecord>,
}

impl TaintState {
    fn seeded(target: &Range<u64>) -> TaintState {
        let mut mem = MemTaint::default();
        let size = target.end - target.start;
        mem.bytes.extend(target.clone());
        if matches!(size, 1 | 2 | 4 | 8) {
            mem.spans.insert(target.start, (size as u8, Taint::Affine { neg: false, off: 0 }));
        }
        TaintState { regs: [Taint::Clean; REG_COUNT], mem, last_cmp: None }
    }

    fn operand(&self, op: Operand) -> Taint {
        match op {
            Operand::Reg(r) => self.regs[r as usize],
            Operand::Imm(_) => Taint::Clean,
        }
    }
}

fn operand_value(sess: &VmSession, op: Operand) -> u64 {
    match op {
        Operand::Reg(r) => sess.reg(r),
        Operand::Imm(v) => v,
    }
}

fn mem_addr(sess: &VmSession, mem: MemRef) -> u64 {
    let base = match mem.base {
        crate::vm::MemBase::Reg(r) => sess.reg(r),
        crate::vm::MemBase::Abs(a) => a,
    };
    base.wrapping_add(mem.offset as u64)
}

fn alu_taint(op: AluOp, a: u64, at: Taint, b: u64, bt: Taint) -> Taint {
    if !at.tainted() && !bt.tainted() {
        return Taint::Clean;
    }
    match op {
        AluOp::Add => match (at, bt) {
            (Taint::Affine { neg, off }, Taint::Clean) => {
                Taint::Affine { neg, off: off.wrapping_add(b) }
            }
            (Taint::Clean, Taint::Affine { neg, off }) => {
                Taint::Affine { neg, off: off.wrapping_add(a) }
            }
            _ => Taint::Opaque,
        },
        AluOp::Sub => match (at, bt) {
            (Taint::Affine { neg, off }, Taint::Clean) => {
                Taint::Affine { neg, off: off.wrapping_sub(b) }
            }
            (Taint::Clean, Taint::Affine { neg, off }) => {
                Taint::Affine { neg: !neg, off: a.wrapping_sub(off) }
            }
            _ => Taint::Opaque,
        },
        AluOp::And | AluOp::Or | AluOp::Xor => Taint::Opaque,
    }
}

/// Why the taint walk stopped before finding a tainted branch.
enum WalkEnd {
    Fork { branch_pc: usize, taken: bool, cmp: Option<CmpRecord>, cond: Cond },
    Quiet,
}

/// Run the pre-fork phase: step at most `window` instructions, transferring
/// taint per instruction, until a branch consumes tainted flags.
fn taint_walk(sess: &mut VmSession, ts: &mut TaintState, window: u32) -> WalkEnd {
    let mut probe = TakenProbe::default();
    for _ in 0..window {
        let Some(insn) = sess.current_instruction().copied() else {
            return WalkEnd::Quiet;
        };
        if let Instruction::JmpIf { cond, .. } = insn {
            if ts.regs[REG_FLAGS as usize].tainted() {
                let branch_pc = sess.pc();
                probe.taken = None;
                if sess.step_traced(&mut probe).is_err() {
                    return WalkEnd::Quiet;
                }
                let taken = probe.taken.unwrap_or(false);
                return WalkEnd::Fork { branch_pc, taken, cmp: ts.last_cmp, cond };
            }
        }

        // Pre-step facts the transfer needs: addresses and operand values
        // resolve against the registers the instruction itself will see.
        enum Pending {
            SetReg(u8, Taint),
            StoreMem(u64, u8, Taint),
            SetFlags(Taint),
            ClearDelivered(u64),
            PushRet(u64),
            Nothing,
        }
        let pending = match insn {
            Instruction::Mov { dst, src } => Pending::SetReg(dst, ts.operand(src)),
            Instruction::Load { width, dst, mem } => {
                let addr = mem_addr(sess, mem);
                Pending::SetReg(dst, ts.mem.load(addr, width.bytes()))
            }
            Instruction::Store { width, mem, src } => {
                let addr = mem_addr(sess, mem);
                Pending::StoreMem(addr, width.bytes(), ts.operand(src))
            }
            Instruction::Alu { op, dst, src } => {
                let a = sess.reg(dst);
                let b = operand_value(sess, src);
                Pending::SetReg(dst, alu_taint(op, a, ts.regs[dst as usize], b, ts.operand(src)))
            }
            Instruction::Cmp { a, b } => {
                let rec = CmpRecord {
                    a_val: operand_value(sess, a),
                    b_val: operand_value(sess, b),
                    a_taint: ts.operand(a),
                    b_taint: ts.operand(b),
                };
                ts.last_cmp = Some(rec);
                Pending::SetFlags(join(rec.a_taint, rec.b_taint))
            }
            Instruction::Call { .. } => Pending::PushRet(sess.reg(REG_SP).wrapping_sub(8)),
            Instruction::Trap(TrapInsn::Alloc { dst, .. }) => {
                Pending::SetReg(dst, Taint::Clean)
            }
            Instruction::Trap(TrapInsn::Recv { len_dst, buf, .. }) => {
                // Fresh input is untainted; the delivered range is cleared
                // below once the step reveals the actual length.
                ts.regs[len_dst as usize] = Taint::Clean;
                Pending::ClearDelivered(operand_value(sess, buf))
            }
            _ => Pending::Nothing,
        };

        let outcome = match sess.step_traced(&mut crate::vm::NoTrace) {
            Ok(o) => o,
            Err(_) => return WalkEnd::Quiet,
        };

        match pending {
            Pending::SetReg(r, t) => ts.regs[r as usize] = t,
            Pending::StoreMem(addr, n, t) => ts.mem.store(addr, n, t),
            Pending::SetFlags(t) => ts.regs[REG_FLAGS as usize] = t,
            Pending::PushRet(sp) => ts.mem.store(sp, 8, Taint::Clean),
            Pending::ClearDelivered(addr) => {
                if let StepOutcome::Event(ref e) = outcome {
                    if let crate::vm::EventKind::ReadReturned { len, .. } = e.kind {
                        ts.mem.store(addr, len.min(255) as u8, Taint::Clean);
                    }
                }
            }
            Pending::Nothing => {}
        }

        match outcome {
            StepOutcome::Continue | StepOutcome::Event(_) => {}
            StepOutcome::AwaitingInput | StepOutcome::Halted => return WalkEnd::Quiet,
        }
    }
    WalkEnd::Quiet
}

/// Records the decision of the first branch executed at a given pc.
#[derive(Default)]
struct TakenProbe {
    taken: Option<bool>,
}

impl Tracer for TakenProbe {
    fn mem_read(&mut self, _addr: u64, _width: u8, _value: u64) {}
    fn mem_write(&mut self, _addr: u64, _width: u8, _value: u64) {}
    fn branch(&mut self, _pc: usize, taken: bool) {
        self.taken.get_or_insert(taken);
    }
}

/// Watches for the first write into any candidate range.
struct WriteWatcher<'r> {
    pc: usize,
    ranges: &'r [Range<u64>],
    first_write: Option<usize>,
}

impl Tracer for WriteWatcher<'_> {
    fn mem_read(&mut self, _addr: u64, _width: u8, _value: u64) {}
    fn mem_write(&mut self, addr: u64, width: u8, _value: u64) {
        if self.first_write.is_none()
            && self.ranges.iter().any(|r| addr < r.end && addr + width as u64 > r.start)
        {
            self.first_write = Some(self.pc);
        }
    }
    fn branch(&mut self, _pc: usize, _taken: bool) {}
}

/// Continue a forked session for at most `window` instructions (or until a
/// return, park, halt, or fault) and report the first candidate write.
fn run_fork(sess: &mut VmSession, candidates: &[Range<u64>], window: u32) -> Option<usize> {
    let mut watcher = WriteWatcher { pc: 0, ranges: candidates, first_write: None };
    for _ in 0..window {
        let at_return = matches!(sess.current_instruction(), Some(Instruction::Ret));
        watcher.pc = sess.pc();
        match sess.step_traced(&mut watcher) {
            Ok(StepOutcome::Continue) | Ok(StepOutcome::Event(_)) => {}
            _ => break,
        }
        if watcher.first_write.is_some() || at_return {
            break;
        }
    }
    watcher.first_write
}

/// The relation the alternate assignment must establish between the two
/// compare operands.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Rel {
    Eq,
    Ne,
    Lt,
    Ge,
}

fn required_relation(cond: Cond, want_taken: bool) -> Rel {
    match (cond, want_taken) {
        (Cond::Eq, true) | (Cond::Ne, false) => Rel::Eq,
        (Cond::Eq, false) | (Cond::Ne, true) => Rel::Ne,
        (Cond::Lt, true) | (Cond::Ge, false) => Rel::Lt,
        (Cond::Lt, false) | (Cond::Ge, true) => Rel::Ge,
    }
}

/// Pick a value for the affine operand that satisfies `rel` against the
/// fixed side. `affine_is_lhs` says which argument of the unsigned compare
/// the affine value occupies.
fn pick_operand_value(rel: Rel, fixed: u64, affine_is_lhs: bool) -> Option<u64> {
    if affine_is_lhs {
        match rel {
            Rel::Eq => Some(fixed),
            Rel::Ne => Some(fixed.wrapping_add(1)),
            Rel::Lt => fixed.checked_sub(1),
            Rel::Ge => Some(fixed),
        }
    } else {
        match rel {
            Rel::Eq => Some(fixed),
            Rel::Ne => Some(fixed.wrapping_add(1)),
            Rel::Lt => fixed.checked_add(1),
            Rel::Ge => Some(0),
        }
    }
}

/// Invert `x = ±t + off` back to the target value t.
fn un_affine(neg: bool, off: u64, x: u64) -> u64 {
    if neg {
        off.wrapping_sub(x)
    } else {
        x.wrapping_sub(off)
    }
}

fn le_value(bytes: &[u8]) -> u64 {
    bytes.iter().take(8).rev().fold(0u64, |acc, &b| acc << 8 | b as u64)
}

fn le_bytes(v: u64, n: usize) -> Vec<u8> {
    (0..n).map(|i| (v >> (8 * i)) as u8).collect()
}

/// Alternate target values worth trying, best guess first. Everything here
/// is validated by re-execution, so the list only has to contain one value
/// that actually flips the branch.
fn alternate_values(
    fork: &WalkEnd,
    size: u64,
    recorded: Option<u64>,
) -> Vec<u64> {
    let WalkEnd::Fork { taken, cmp, cond, .. } = fork else { return Vec::new() };
    if size == 0 || size > 8 {
        return Vec::new();
    }
    let size_max = if size == 8 { u64::MAX } else { (1u64 << (8 * size)) - 1 };
    let mut out: Vec<u64> = Vec::new();
    let mut push = |v: u64| {
        if v <= size_max && Some(v) != recorded && !out.contains(&v) {
            out.push(v);
        }
    };

    if let Some(rec) = cmp {
        let rel = required_relation(*cond, !taken);
        let solved = match (rec.a_taint, rec.b_taint) {
            (Taint::Affine { neg, off }, Taint::Clean) => {
                pick_operand_value(rel, rec.b_val, true).map(|x| un_affine(neg, off, x))
            }
            (Taint::Clean, Taint::Affine { neg, off }) => {
                pick_operand_value(rel, rec.a_val, false).map(|x| un_affine(neg, off, x))
            }
            _ => None,
        };
        if let Some(t) = solved {
            push(t);
        }
        // Scan fallback: aim the raw target at the clean side's value, on
        // the common case that the target reaches the compare unchanged.
        let fixed = if rec.a_taint.tainted() { rec.b_val } else { rec.a_val };
        push(fixed);
        push(fixed.wrapping_add(1));
        push(fixed.wrapping_sub(1));
    }
    push(0);
    push(1);
    push(size_max);
    out
}

/// Tracks the alternate run: the branch decision at the fork pc, then any
/// candidate write on the far side.
struct AltTracer<'r> {
    branch_pc: usize,
    want_taken: bool,
    pc: usize,
    flip: Option<bool>,
    ranges: &'r [Range<u64>],
    first_write: Option<usize>,
}

impl Tracer for AltTracer<'_> {
    fn mem_read(&mut self, _addr: u64, _width: u8, _value: u64) {}
    fn mem_write(&mut self, addr: u64, width: u8, _value: u64) {
        if self.flip == Some(true)
            && self.first_write.is_none()
            && self.ranges.iter().any(|r| addr < r.end && addr + width as u64 > r.start)
        {
            self.first_write = Some(self.pc);
        }
    }
    fn branch(&mut self, pc: usize, taken: bool) {
        if pc == self.branch_pc && self.flip.is_none() {
            self.flip = Some(taken == self.want_taken);
        }
    }
}

enum AltRun {
    Flipped { write_pc: Option<usize> },
    NotFlipped,
}

/// Replay from the captured context with `value` substituted into the
/// target, check the fork branch goes the other way, and watch the far side
/// for candidate writes.
fn try_alternate(
    program: &Arc<Program>,
    ctx: &VmContext,
    target: &Range<u64>,
    value: u64,
    branch_pc: usize,
    want_taken: bool,
    candidates: &[Range<u64>],
    window: u32,
) -> AltRun {
    let mut sess = VmSession::restore(Arc::clone(program), ctx, VmConfig::default());
    let size = (target.end - target.start) as usize;
    if !sess.write_mem(target.start, &le_bytes(value, size)) {
        return AltRun::NotFlipped;
    }
    let mut tracer = AltTracer {
        branch_pc,
        want_taken,
        pc: 0,
        flip: None,
        ranges: candidates,
        first_write: None,
    };
    // Budgeted like the two phases it replays: one window to re-reach the
    // branch, one window on the far side.
    let mut post_steps = 0u32;
    for _ in 0..2 * window {
        if tracer.flip == Some(false) {
            return AltRun::NotFlipped;
        }
        if tracer.flip == Some(true) {
            if tracer.first_write.is_some() || post_steps >= window {
                break;
            }
            post_steps += 1;
        }
        let at_return = matches!(sess.current_instruction(), Some(Instruction::Ret));
        tracer.pc = sess.pc();
        match sess.step_traced(&mut tracer) {
            Ok(StepOutcome::Continue) | Ok(StepOutcome::Event(_)) => {}
            _ => break,
        }
        if at_return && tracer.flip.is_some() {
            break;
        }
    }
    match tracer.flip {
        Some(true) => AltRun::Flipped { write_pc: tracer.first_write },
        _ => AltRun::NotFlipped,
    }
}

/// Classify one watchpoint hit against candidate state memory.
pub fn classify(
    program: &Arc<Program>,
    hit: &WatchpointHit,
    cfg: &TaintConfig<'_>,
) -> Result<Verdict, DataflowError> {
    let records = alloc_records(&hit.context);
    let map = align_allocations(&records, &cfg.candidates.base_log);
    let target = map.resolve(&cfg.target).ok_or_else(|| {
        DataflowError::RestoreFailure(String::from(
            "target location is unmapped in the captured context",
        ))
    })?;
    let candidate_ranges: Vec<Range<u64>> = cfg
        .candidates
        .locations
        .iter()
        .filter_map(|loc| map.resolve(loc))
        .collect();

    let mut sess = VmSession::restore(Arc::clone(program), &hit.context, VmConfig::default());
    if sess.pc() > program.instructions.len() {
        return Err(DataflowError::RestoreFailure(String::from(
            "captured program counter is out of range",
        )));
    }
    let size = target.end - target.start;
    let recorded_value =
        if size <= 8 { sess.read_mem(target.start, size as usize).map(|b| le_value(&b)) } else { None };

    // Phase 1: follow the taint to the first conditioned branch.
    let mut ts = TaintState::seeded(&target);
    let walk = taint_walk(&mut sess, &mut ts, cfg.window);
    let WalkEnd::Fork { branch_pc, taken, .. } = walk else {
        return Ok(Verdict::not_state_defining(None));
    };

    // Phase 2: the recorded side, continuing the same session past the
    // branch it just took.
    if let Some(write_pc) = run_fork(&mut sess, &candidate_ranges, cfg.window) {
        return Ok(Verdict::state_defining(branch_pc, write_pc));
    }

    // Phase 3: the alternate side, re-run with a substituted target value.
    for value in alternate_values(&walk, size, recorded_value) {
        match try_alternate(
            program,
            &hit.context,
            &target,
            value,
            branch_pc,
            !taken,
            &candidate_ranges,
            cfg.window,
        ) {
            AltRun::Flipped { write_pc: Some(write_pc) } => {
                return Ok(Verdict::state_defining(branch_pc, write_pc));
            }
            AltRun::Flipped { write_pc: None } => {
                return Ok(Verdict::not_state_defining(Some(branch_pc)));
            }
            AltRun::NotFlipped => continue,
        }
    }
    Ok(Verdict {
        kind: VerdictKind::Inconclusive,
        branch_pc: Some(branch_pc),
        write_pc: None,
    })
}
