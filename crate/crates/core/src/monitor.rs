//! Execution monitor: snapshot scheduling, allocation logging, alignment of
//! snapshots with I/O events, and read watchpoints.
//!
//! Snapshots are taken at three trigger points: after every delivered input,
//! just before every output leaves, and whenever the session parks at a read
//! with the connection open. The park snapshot is the latest state preceding
//! the next read, so it wins the alignment for its query index; that rule
//! covers outputs followed by silent state changes. Sessions that tear down
//! mid-query get a terminal marker instead of further mappings.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::harness::{
    Harness, HarnessError, IoEntry, QueryOptions, RunObserver, TerminalEvent,
};
use crate::memdiff::{self, AllocationMap, MemoryLocation};
use crate::vm::{
    EventKind, ExecutionEvent, Fault, FaultReason, StepOutcome, Tracer, VmContext, VmSession,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SnapshotId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotTrigger {
    /// An input message was just copied into guest memory.
    AfterRead = 0,
    /// An output message is about to leave guest memory.
    BeforeWrite = 1,
    /// The session parked at a read; state after the previous input is final.
    BeforeRead = 2,
}

impl SnapshotTrigger {
    fn from_byte(b: u8) -> Option<SnapshotTrigger> {
        match b {
            0 => Some(SnapshotTrigger::AfterRead),
            1 => Some(SnapshotTrigger::BeforeWrite),
            2 => Some(SnapshotTrigger::BeforeRead),
            _ => None,
        }
    }
}

/// One snapshot event within a run. The payload lives in the store; metas
/// stay chronological within their run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotMeta {
    pub id: SnapshotId,
    pub trigger: SnapshotTrigger,
    /// Input position whose processing this snapshot reflects; -1 covers
    /// session setup before the first input.
    pub query_index: i64,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocKind {
    Alloc,
    Free,
}

/// One allocator event. Free rows carry zero size/context; `position` is the
/// session-global log index that snapshot alignment keys on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocationRecord {
    pub position: u32,
    pub kind: AllocKind,
    pub size: u64,
    /// Call-site identifier of the `alloc`, zero for frees.
    pub context: u64,
    pub address: u64,
    pub timestamp: u64,
}

/// Which snapshot stands for the state after each processed input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventAlignment {
    /// mapping[k] is the post-state snapshot of input k; covers every
    /// processed input and nothing beyond a terminal.
    pub mapping: Vec<SnapshotId>,
    pub terminal: Option<(TerminalEvent, usize)>,
}

/// Everything one monitored query produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitoredRun {
    pub query: Vec<String>,
    pub outputs: Vec<String>,
    pub io_log: Vec<IoEntry>,
    pub events: Vec<ExecutionEvent>,
    pub snapshots: Vec<SnapshotMeta>,
    pub alloc_log: Vec<AllocationRecord>,
    pub alignment: EventAlignment,
    /// Park snapshot before the first input, when the session got that far.
    pub initial_snapshot: Option<SnapshotId>,
    pub fault: Option<Fault>,
}

#[derive(Debug)]
pub enum MonitorError {
    Harness(HarnessError),
    /// The session faulted; partial logs are preserved for post-mortems.
    SessionFault { fault: Fault, partial: Box<MonitoredRun> },
    /// The location does not exist under the replayed prefix's allocations.
    LocationUnmapped(MemoryLocation),
    /// Two distinct channel subsets reproduce the harness I/O equally well.
    PatternAmbiguous,
    /// A snapshot dump could not be decoded at the given byte offset.
    BadDump { offset: usize },
}

impl From<HarnessError> for MonitorError {
    fn from(e: HarnessError) -> MonitorError {
        MonitorError::Harness(e)
    }
}

impl core::fmt::Display for MonitorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MonitorError::Harness(e) => write!(f, "{e}"),
            MonitorError::SessionFault { fault, .. } => {
                write!(f, "session faulted at pc {}: {:?}", fault.pc, fault.reason)
            }
            MonitorError::LocationUnmapped(loc) => write!(
                f,
                "location alloc {} offset {} size {} is not mapped under this prefix",
                loc.alloc.0, loc.offset, loc.size
            ),
            MonitorError::PatternAmbiguous => {
                write!(f, "multiple minimal channel subsets reproduce the I/O trace")
            }
            MonitorError::BadDump { offset } => {
                write!(f, "snapshot dump is malformed at byte {offset}")
            }
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Canonical bytes with run-position noise (clock, instruction count) masked
/// out, so identical states reached at different times compare equal.
fn normalized_bytes(ctx: &VmContext) -> Vec<u8> {
    let mut norm = ctx.clone();
    norm.clock = 0;
    norm.instruction_count = 0;
    norm.to_bytes()
}

pub fn state_hash(ctx: &VmContext) -> u64 {
    fnv1a(&normalized_bytes(ctx))
}

/// Content-addressed snapshot storage. Payloads deduplicate on state content;
/// disk and memory stay proportional to distinct states, not to queries.
/// Single-threaded by itself; wrap in a lock to share across sessions.
#[derive(Default)]
pub struct SnapshotStore {
    contents: Vec<Arc<VmContext>>,
    norms: Vec<Vec<u8>>,
    index: BTreeMap<u64, Vec<SnapshotId>>,
}

impl SnapshotStore {
    pub fn new() -> SnapshotStore {
        SnapshotStore::default()
    }

    pub fn insert(&mut self, ctx: VmContext) -> SnapshotId {
        let norm = normalized_bytes(&ctx);
        let hash = fnv1a(&norm);
        let bucket = self.index.entry(hash).or_default();
        for &id in bucket.iter() {
            if self.norms[id.0 as usize] == norm {
                return id;
            }
        }
        let id = SnapshotId(self.contents.len() as u32);
        self.contents.push(Arc::new(ctx));
        self.norms.push(norm);
        bucket.push(id);
        id
    }

    pub fn get(&self, id: SnapshotId) -> &Arc<VmContext> {
        &self.contents[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }
}

struct MonitorObserver<'a> {
    store: &'a mut SnapshotStore,
    snapshots: Vec<SnapshotMeta>,
    alloc_log: Vec<AllocationRecord>,
    events: Vec<ExecutionEvent>,
    terminal: Option<(TerminalEvent, usize)>,
    fault: Option<Fault>,
    initial: Option<SnapshotId>,
}

impl<'a> MonitorObserver<'a> {
    fn new(store: &'a mut SnapshotStore) -> MonitorObserver<'a> {
        MonitorObserver {
            store,
            snapshots: Vec::new(),
            alloc_log: Vec::new(),
            events: Vec::new(),
            terminal: None,
            fault: None,
            initial: None,
        }
    }

    fn snap(
        &mut self,
        ctx: VmContext,
        trigger: SnapshotTrigger,
        query_index: i64,
        timestamp: u64,
    ) -> SnapshotId {
        let id = self.store.insert(ctx);
        self.snapshots.push(SnapshotMeta { id, trigger, query_index, timestamp });
        id
    }
}

impl RunObserver for MonitorObserver<'_> {
    fn event(&mut self, session: &VmSession, event: &ExecutionEvent, query_index: i64) {
        self.events.push(event.clone());
        match &event.kind {
            EventKind::ReadReturned { .. } => {
                self.snap(
                    session.snapshot_memory(),
                    SnapshotTrigger::AfterRead,
                    query_index,
                    event.timestamp,
                );
            }
            EventKind::WriteAboutToExecute { .. } => {
                self.snap(
                    session.snapshot_memory(),
                    SnapshotTrigger::BeforeWrite,
                    query_index,
                    event.timestamp,
                );
            }
            EventKind::Allocated { addr, size, context, position } => {
                self.alloc_log.push(AllocationRecord {
                    position: *position,
                    kind: AllocKind::Alloc,
                    size: *size,
                    context: *context,
                    address: *addr,
                    timestamp: event.timestamp,
                });
            }
            EventKind::Freed { addr, position } => {
                self.alloc_log.push(AllocationRecord {
                    position: *position,
                    kind: AllocKind::Free,
                    size: 0,
                    context: 0,
                    address: *addr,
                    timestamp: event.timestamp,
                });
            }
            _ => {}
        }
    }

    fn parked(&mut self, session: &mut VmSession, processed: i64) {
        let ts = session.next_tick();
        let id = self.snap(session.snapshot_memory(), SnapshotTrigger::BeforeRead, processed, ts);
        if processed < 0 {
            self.initial = Some(id);
        }
    }

    fn terminal(&mut self, event: TerminalEvent, query_index: usize) {
        if self.terminal.is_none() {
            self.terminal = Some((event, query_index));
        }
    }

    fn faulted(&mut self, fault: &Fault, _query_index: i64) {
        self.fault = Some(*fault);
    }
}

/// mapping[k] = latest snapshot tagged k, for the longest gap-free prefix of
/// query indices. Later snapshots within one index win, which is exactly the
/// latest-before-next-read rule.
fn build_mapping(snapshots: &[SnapshotMeta]) -> Vec<SnapshotId> {
    let mut latest: BTreeMap<usize, SnapshotId> = BTreeMap::new();
    for meta in snapshots {
        if meta.query_index >= 0 {
            latest.insert(meta.query_index as usize, meta.id);
        }
    }
    let mut mapping = Vec::with_capacity(latest.len());
    for k in 0.. {
        match latest.get(&k) {
            Some(&id) => mapping.push(id),
            None => break,
        }
    }
    mapping
}

/// The monitor proper: owns the deduplicating snapshot store shared by all
/// runs it drives.
#[derive(Default)]
pub struct Monitor {
    store: SnapshotStore,
}

/// Outcome of probing a query whose final input answered with silence.
#[derive(Debug)]
pub enum TailProbe {
    /// Some follow-up input was read; this snapshot is the settled post-state
    /// of the original query.
    Settled { snapshot: SnapshotId, probe: String, run: MonitoredRun },
    /// No follow-up input is ever read: the state is exploration-closed.
    ExplorationClosed { terminal: Option<(TerminalEvent, usize)> },
}

impl Monitor {
    pub fn new() -> Monitor {
        Monitor::default()
    }

    pub fn store(&self) -> &SnapshotStore {
        &self.store
    }

    /// Run one query under full observation. A session fault surfaces as an
    /// error carrying everything logged up to the fault.
    pub fn run_monitored(
        &mut self,
        harness: &Harness,
        inputs: &[String],
        opts: &QueryOptions,
    ) -> Result<MonitoredRun, MonitorError> {
        let mut observer = MonitorObserver::new(&mut self.store);
        let result = harness.execute_observed(inputs, opts, &mut observer)?;
        let MonitorObserver {
            snapshots, alloc_log, events, terminal, fault, initial, ..
        } = observer;
        let alignment = EventAlignment { mapping: build_mapping(&snapshots), terminal };
        let run = MonitoredRun {
            query: result.query,
            outputs: result.outputs,
            io_log: result.io_log,
            events,
            snapshots,
            alloc_log,
            alignment,
            initial_snapshot: initial,
            fault,
        };
        match fault {
            Some(fault) => Err(MonitorError::SessionFault { fault, partial: Box::new(run) }),
            None => Ok(run),
        }
    }

    /// Resolve the post-state of a query whose final input was silent: try
    /// q followed by one extra input per alphabet symbol until some run reads
    /// that extra input, and take the park snapshot right before that read.
    pub fn probe_silent_tail(
        &mut self,
        harness: &Harness,
        q: &[String],
        opts: &QueryOptions,
    ) -> Result<TailProbe, MonitorError> {
        debug_assert!(!q.is_empty());
        let symbols = harness.alphabet().inputs.clone();
        let mut terminal = None;
        for probe in symbols {
            let mut extended = q.to_vec();
            extended.push(probe.clone());
            let run = self.run_monitored(harness, &extended, opts)?;
            let extra = q.len() as i64;
            let read_extra = run.snapshots.iter().any(|m| {
                m.trigger == SnapshotTrigger::AfterRead && m.query_index == extra
            });
            if read_extra {
                let snapshot = run.alignment.mapping[q.len() - 1];
                return Ok(TailProbe::Settled { snapshot, probe, run });
            }
            terminal = terminal.or(run.alignment.terminal);
        }
        Ok(TailProbe::ExplorationClosed { terminal })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// One traced memory access during probe processing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryAccess {
    pub pc: usize,
    pub addr: u64,
    pub width: u8,
    pub value: u64,
    pub kind: AccessKind,
}

/// A read overlapping the watched location, with the full machine context at
/// the instruction that performed it.
#[derive(Clone, Debug)]
pub struct WatchpointHit {
    pub context: VmContext,
    pub pc: usize,
    pub addr: u64,
    pub width: u8,
}

/// Everything observed while processing the probe input under a watchpoint.
#[derive(Debug)]
pub struct WatchOutcome {
    pub hits: Vec<WatchpointHit>,
    /// Full access trace from probe delivery to the next park or exit.
    pub accesses: Vec<MemoryAccess>,
    pub replies: Vec<Vec<u8>>,
    pub terminal: Option<TerminalEvent>,
    pub fault: Option<Fault>,
    /// Concrete byte range the location resolved to in this session.
    pub watched: core::ops::Range<u64>,
    /// Base-to-run allocation correspondence for this replay, so traced
    /// access addresses can be translated back into allocation-relative form.
    pub map: AllocationMap,
}

struct WatchTracer<'a> {
    range: core::ops::Range<u64>,
    current_pc: usize,
    accesses: &'a mut Vec<MemoryAccess>,
    step_reads: Vec<(u64, u8)>,
}

impl WatchTracer<'_> {
    fn overlaps(&self, addr: u64, width: u8) -> bool {
        addr < self.range.end && addr + width as u64 > self.range.start
    }
}

impl Tracer for WatchTracer<'_> {
    fn mem_read(&mut self, addr: u64, width: u8, value: u64) {
        self.accesses.push(MemoryAccess {
            pc: self.current_pc,
            addr,
            width,
            value,
            kind: AccessKind::Read,
        });
        if self.overlaps(addr, width) {
            self.step_reads.push((addr, width));
        }
    }

    fn mem_write(&mut self, addr: u64, width: u8, value: u64) {
        self.accesses.push(MemoryAccess {
            pc: self.current_pc,
            addr,
            width,
            value,
            kind: AccessKind::Write,
        });
    }
}

/// Replay `prefix` unwatched, arm a read watchpoint on `loc`, send `probe`,
/// and single-step until the session next waits for input or exits. Every
/// read overlapping the location yields a hit with the context captured
/// before the reading instruction executed (trap reads, which leave memory
/// untouched, capture right after instead).
pub fn watch_reads(
    harness: &Harness,
    prefix: &[String],
    loc: &MemoryLocation,
    probe: &str,
    base_log: &[AllocationRecord],
    opts: &QueryOptions,
) -> Result<WatchOutcome, MonitorError> {
    let mut collector = AllocCollector::default();
    let mut driver = crate::harness::SessionDriver::new(harness, opts);
    driver.pump_setup(&mut collector);
    for (k, symbol) in prefix.iter().enumerate() {
        driver.feed(k, symbol, &mut collector)?;
    }
    if let Some(fault) = driver.fault {
        return Err(MonitorError::SessionFault {
            fault,
            partial: Box::new(empty_run(prefix.to_vec())),
        });
    }
    let map = memdiff::align_allocations(&collector.log, base_log);
    let range = map
        .resolve(loc)
        .ok_or_else(|| MonitorError::LocationUnmapped(loc.clone()))?;

    let mut outcome = WatchOutcome {
        hits: Vec::new(),
        accesses: Vec::new(),
        replies: Vec::new(),
        terminal: driver.terminal.map(|(t, _)| t),
        fault: None,
        watched: range.clone(),
        map,
    };
    if driver.terminal.is_some() {
        // The connection is already down; the probe can never be read.
        return Ok(outcome);
    }

    let frame = driver.encode(probe)?;
    driver.session.push_input(frame);
    let mut tracer = WatchTracer {
        range,
        current_pc: 0,
        accesses: &mut outcome.accesses,
        step_reads: Vec::new(),
    };
    let budget = opts.vm.fuel_per_run;
    let mut steps = 0u64;
    loop {
        if steps >= budget {
            outcome.fault = Some(Fault { pc: driver.session.pc(), reason: FaultReason::FuelExhausted });
            break;
        }
        steps += 1;
        // A plain load's context must be caught before it executes; decode
        // the target ahead of the step.
        let pending = driver.session.peek_load().and_then(|(addr, width)| {
            let t = &tracer;
            if t.overlaps(addr, width) {
                Some((driver.session.snapshot_memory(), driver.session.pc()))
            } else {
                None
            }
        });
        tracer.current_pc = driver.session.pc();
        tracer.step_reads.clear();
        let outcome_step = match driver.session.step_traced(&mut tracer) {
            Ok(o) => o,
            Err(fault) => {
                outcome.fault = Some(fault);
                break;
            }
        };
        if !tracer.step_reads.is_empty() {
            let (context, pc) = match pending {
                Some((ctx, pc)) => (ctx, pc),
                // Trap reads do not mutate memory, so the post-step context
                // still shows the state the read saw.
                None => (driver.session.snapshot_memory(), tracer.current_pc),
            };
            for &(addr, width) in &tracer.step_reads {
                outcome.hits.push(WatchpointHit { context: context.clone(), pc, addr, width });
            }
        }
        match outcome_step {
            StepOutcome::Continue => {}
            StepOutcome::Event(event) => match event.kind {
                EventKind::WriteAboutToExecute { payload, .. } => outcome.replies.push(payload),
                EventKind::Closed => {
                    outcome.terminal.get_or_insert(TerminalEvent::Closed);
                }
                EventKind::ShutdownRead => {
                    outcome.terminal.get_or_insert(TerminalEvent::ShutdownRead);
                }
                _ => {}
            },
            StepOutcome::AwaitingInput => break,
            StepOutcome::Halted => {
                outcome.terminal.get_or_insert(TerminalEvent::Closed);
                break;
            }
        }
    }
    Ok(outcome)
}

fn empty_run(query: Vec<String>) -> MonitoredRun {
    MonitoredRun {
        query,
        outputs: Vec::new(),
        io_log: Vec::new(),
        events: Vec::new(),
        snapshots: Vec::new(),
        alloc_log: Vec::new(),
        alignment: EventAlignment { mapping: Vec::new(), terminal: None },
        initial_snapshot: None,
        fault: None,
    }
}

/// Observer that keeps only the allocation log; watchpoint replays use it.
#[derive(Default)]
struct AllocCollector {
    log: Vec<AllocationRecord>,
    terminal: Option<(TerminalEvent, usize)>,
}

impl RunObserver for AllocCollector {
    fn event(&mut self, _session: &VmSession, event: &ExecutionEvent, _query_index: i64) {
        match &event.kind {
            EventKind::Allocated { addr, size, context, position } => {
                self.log.push(AllocationRecord {
                    position: *position,
                    kind: AllocKind::Alloc,
                    size: *size,
                    context: *context,
                    address: *addr,
                    timestamp: event.timestamp,
                });
            }
            EventKind::Freed { addr, position } => {
                self.log.push(AllocationRecord {
                    position: *position,
                    kind: AllocKind::Free,
                    size: 0,
                    context: 0,
                    address: *addr,
                    timestamp: event.timestamp,
                });
            }
            _ => {}
        }
    }

    fn terminal(&mut self, event: TerminalEvent, query_index: usize) {
        if self.terminal.is_none() {
            self.terminal = Some((event, query_index));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrapKind {
    Receive,
    Send,
}

/// One I/O channel: a trap kind plus its fixed buffer parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelPattern {
    pub trap: TrapKind,
    pub buffer: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloseKind {
    Close,
    ShutdownRead,
}

/// How the implementation realizes protocol I/O, inferred from one trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoPatternSet {
    pub input: Vec<ChannelPattern>,
    /// Empty for silent protocols.
    pub output: Vec<ChannelPattern>,
    /// Close is the designated teardown trap by construction; a read
    /// shutdown joins it when the trace shows one.
    pub close: Vec<CloseKind>,
}

/// Find, per direction, the minimal set of channels whose merged traffic
/// reproduces the harness frame sequence exactly. Two distinct minimal sets
/// mean the implementation multiplexes in a way we cannot tell apart.
pub fn infer_io_patterns(
    events: &[ExecutionEvent],
    io_log: &[IoEntry],
) -> Result<IoPatternSet, MonitorError> {
    use crate::harness::Direction;

    let sent: Vec<&[u8]> = io_log
        .iter()
        .filter(|e| e.direction == Direction::Sent)
        .map(|e| e.bytes.as_slice())
        .collect();
    let received: Vec<&[u8]> = io_log
        .iter()
        .filter(|e| e.direction == Direction::Received)
        .map(|e| e.bytes.as_slice())
        .collect();

    let reads: Vec<(u64, &[u8])> = events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::ReadReturned { addr, payload, .. } => Some((*addr, payload.as_slice())),
            _ => None,
        })
        .collect();
    let writes: Vec<(u64, &[u8])> = events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::WriteAboutToExecute { addr, payload, .. } => {
                Some((*addr, payload.as_slice()))
            }
            _ => None,
        })
        .collect();

    let input = minimal_channels(&reads, &sent)?;
    let output = minimal_channels(&writes, &received)?;

    let mut close = alloc::vec![CloseKind::Close];
    if events.iter().any(|e| e.kind == EventKind::ShutdownRead) {
        close.push(CloseKind::ShutdownRead);
    }
    Ok(IoPatternSet {
        input: input.into_iter().map(|b| ChannelPattern { trap: TrapKind::Receive, buffer: b }).collect(),
        output: output.into_iter().map(|b| ChannelPattern { trap: TrapKind::Send, buffer: b }).collect(),
        close,
    })
}

/// Channels are keyed by buffer address. Returns the unique minimal subset
/// whose in-order merged payloads equal `expected`.
fn minimal_channels(
    traffic: &[(u64, &[u8])],
    expected: &[&[u8]],
) -> Result<Vec<u64>, MonitorError> {
    let mut buffers: Vec<u64> = traffic.iter().map(|(b, _)| *b).collect();
    buffers.sort_unstable();
    buffers.dedup();
    if expected.is_empty() {
        return Ok(Vec::new());
    }
    let n = buffers.len();
    debug_assert!(n < 16, "channel explosion");
    let mut minimal: Vec<u32> = Vec::new();
    for mask in 1u32..(1 << n) {
        let merged: Vec<&[u8]> = traffic
            .iter()
            .filter(|(b, _)| {
                let i = buffers.iter().position(|x| x == b).unwrap();
                mask & (1 << i) != 0
            })
            .map(|(_, p)| *p)
            .collect();
        if merged == expected {
            minimal.push(mask);
        }
    }
    // Keep only set-minimal solutions.
    let mins: Vec<u32> = minimal
        .iter()
        .copied()
        .filter(|&m| !minimal.iter().any(|&o| o != m && o & m == o))
        .collect();
    match mins.as_slice() {
        [] => Err(MonitorError::PatternAmbiguous),
        [one] => Ok(buffers
            .iter()
            .enumerate()
            .filter(|(i, _)| one & (1 << i) != 0)
            .map(|(_, b)| *b)
            .collect()),
        _ => Err(MonitorError::PatternAmbiguous),
    }
}

/// Framed snapshot dump for one query: per record a 21-byte header
/// (timestamp u64 LE, trigger byte, query index i64 LE, payload length
/// u32 LE) followed by the context's canonical bytes.
pub fn encode_snapshot_dump(run: &MonitoredRun, store: &SnapshotStore) -> Vec<u8> {
    let mut out = Vec::new();
    for meta in &run.snapshots {
        let body = store.get(meta.id).to_bytes();
        out.extend_from_slice(&meta.timestamp.to_le_bytes());
        out.push(meta.trigger as u8);
        out.extend_from_slice(&meta.query_index.to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

/// Decoded dump record: header fields plus the raw context bytes.
pub type DumpRecord = (u64, SnapshotTrigger, i64, Vec<u8>);

pub fn decode_snapshot_dump(bytes: &[u8]) -> Result<Vec<DumpRecord>, MonitorError> {
    let mut records = Vec::new();
    let mut at = 0usize;
    while at < bytes.len() {
        let bad = |offset| MonitorError::BadDump { offset };
        let need = |n: usize, at: usize| {
            if at + n > bytes.len() {
                Err(bad(at))
            } else {
                Ok(&bytes[at..at + n])
            }
        };
        let ts = u64::from_le_bytes(need(8, at)?.try_into().unwrap());
        let trigger = SnapshotTrigger::from_byte(need(1, at + 8)?[0]).ok_or(bad(at + 8))?;
        let qidx = i64::from_le_bytes(need(8, at + 9)?.try_into().unwrap());
        let len = u32::from_le_bytes(need(4, at + 17)?.try_into().unwrap()) as usize;
        let body = need(len, at + 21)?.to_vec();
        records.push((ts, trigger, qidx, body));
        at += 21 + len;
    }
    Ok(records)
}

/// Line-oriented allocation log: `pos kind size context addr ts`.
pub fn format_alloc_log(log: &[AllocationRecord]) -> String {
    use core::fmt::Write;
    let mut out = String::new();
    for r in log {
        let kind = match r.kind {
            AllocKind::Alloc => "alloc",
            AllocKind::Free => "free",
        };
        let _ = writeln!(
            out,
            "{} {} {} {} {:#x} {}",
            r.position, kind, r.size, r.context, r.address, r.timestamp
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Direction;
    use crate::memdiff::AllocId;
    use crate::protocols;

    fn word(symbols: &[&str]) -> Vec<String> {
        symbols.iter().map(|s| (*s).into()).collect()
    }

    fn harness(name: &str) -> Harness {
        Harness::new(protocols::by_name(name).unwrap()).unwrap()
    }

    fn meta_for(run: &MonitoredRun, id: SnapshotId) -> SnapshotMeta {
        *run.snapshots.iter().rev().find(|m| m.id == id).unwrap()
    }

    #[test]
    fn bad_message_sets_shutdown_terminal_at_index_zero() {
        let h = harness("partial-shutdown");
        let mut mon = Monitor::new();
        let run = mon.run_monitored(&h, &word(&["ping"]), &QueryOptions::default()).unwrap();
        assert_eq!(run.alignment.terminal, Some((TerminalEvent::ShutdownRead, 0)));
        assert_eq!(run.outputs, ["ALERT"]);
        // The alert write was snapshotted and carries the mapping for 0.
        assert_eq!(run.alignment.mapping.len(), 1);
        assert_eq!(meta_for(&run, run.alignment.mapping[0]).trigger, SnapshotTrigger::BeforeWrite);
    }

    #[test]
    fn happy_flow_alignment_is_total_without_terminal() {
        let h = harness("backdoor(12)");
        let mut mon = Monitor::new();
        let flow = h.spec().happy_flow.clone();
        let run = mon.run_monitored(&h, &flow, &QueryOptions::default()).unwrap();
        assert_eq!(run.alignment.terminal, None);
        assert_eq!(run.alignment.mapping.len(), flow.len());
        assert!(run.initial_snapshot.is_some());
    }

    #[test]
    fn silent_input_maps_to_the_park_snapshot() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let run = mon.run_monitored(&h, &word(&["msg"]), &QueryOptions::default()).unwrap();
        assert_eq!(run.outputs, ["EMPTY"]);
        let meta = meta_for(&run, run.alignment.mapping[0]);
        assert_eq!(meta.trigger, SnapshotTrigger::BeforeRead);
        assert_eq!(meta.query_index, 0);
    }

    #[test]
    fn state_change_after_output_prefers_the_later_park_snapshot() {
        // Second msg acks first and bumps the tally afterwards; the pre-write
        // and park snapshots must differ and the park one must win.
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let run = mon.run_monitored(&h, &word(&["msg", "msg"]), &QueryOptions::default()).unwrap();
        let write_snap = run
            .snapshots
            .iter()
            .find(|m| m.trigger == SnapshotTrigger::BeforeWrite && m.query_index == 1)
            .unwrap();
        let chosen = meta_for(&run, run.alignment.mapping[1]);
        assert_eq!(chosen.trigger, SnapshotTrigger::BeforeRead);
        assert_ne!(write_snap.id, chosen.id, "tally bump after the ack must change state");
    }

    #[test]
    fn identical_states_deduplicate_across_runs() {
        let h = harness("backdoor(3)");
        let mut mon = Monitor::new();
        let q = word(&["init", "init"]);
        mon.run_monitored(&h, &q, &QueryOptions::default()).unwrap();
        let after_first = mon.store().len();
        let run2 = mon.run_monitored(&h, &q, &QueryOptions::default()).unwrap();
        assert_eq!(mon.store().len(), after_first, "re-running adds no new states");
        let run1_ids = run2.alignment.mapping.clone();
        assert_eq!(run1_ids.len(), 2);
    }

    #[test]
    fn silent_tail_settles_via_a_follow_up_read() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let q = word(&["msg"]);
        let direct = mon.run_monitored(&h, &q, &QueryOptions::default()).unwrap();
        match mon.probe_silent_tail(&h, &q, &QueryOptions::default()).unwrap() {
            TailProbe::Settled { snapshot, probe, .. } => {
                assert_eq!(probe, "msg");
                assert_eq!(snapshot, direct.alignment.mapping[0], "park state dedups to same id");
            }
            TailProbe::ExplorationClosed { .. } => panic!("counter-loop accepts more input"),
        }
    }

    #[test]
    fn silent_tail_after_shutdown_is_exploration_closed() {
        let h = harness("partial-shutdown");
        let mut mon = Monitor::new();
        // ping mutes the session; the absorbed hello is the silent tail.
        let q = word(&["ping", "hello"]);
        match mon.probe_silent_tail(&h, &q, &QueryOptions::default()).unwrap() {
            TailProbe::ExplorationClosed { terminal } => {
                assert_eq!(terminal, Some((TerminalEvent::ShutdownRead, 0)));
            }
            TailProbe::Settled { .. } => panic!("muted session cannot read"),
        }
    }

    fn state_alloc_loc(log: &[AllocationRecord], offset: u64, size: u64) -> MemoryLocation {
        // All corpus programs allocate their state block first.
        let first = log.iter().find(|r| r.kind == AllocKind::Alloc).unwrap();
        MemoryLocation { alloc: AllocId(first.position), offset, size, inferred_type: None }
    }

    #[test]
    fn watch_sees_the_tally_increment_behind_the_ack() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let base = mon
            .run_monitored(&h, &word(&["msg", "msg"]), &QueryOptions::default())
            .unwrap();
        let loc = state_alloc_loc(&base.alloc_log, 2, 2);
        let out = watch_reads(&h, &word(&["msg"]), &loc, "msg", &base.alloc_log, &QueryOptions::default())
            .unwrap();
        assert!(!out.hits.is_empty(), "increment must read the tally");
        assert_eq!(out.replies.len(), 1, "ack precedes the increment yet both are seen");
        for hit in &out.hits {
            assert!(hit.addr >= out.watched.start && hit.addr < out.watched.end);
        }
    }

    #[test]
    fn watch_sees_the_retry_counter_compare() {
        let h = harness("handshake-bypass(5)");
        let mut mon = Monitor::new();
        let base = mon
            .run_monitored(&h, &word(&["hello", "hello"]), &QueryOptions::default())
            .unwrap();
        let loc = state_alloc_loc(&base.alloc_log, 4, 4);
        let out = watch_reads(&h, &word(&["hello"]), &loc, "hello", &base.alloc_log, &QueryOptions::default())
            .unwrap();
        assert!(!out.hits.is_empty(), "saturation check reads the counter");
        // Context snapshots are pre-read: the counter is still 0 in each hit.
        let first = &out.hits[0];
        assert_eq!(first.context.heap[(out.watched.start - first.context.heap_base) as usize], 0);
    }

    #[test]
    fn unread_location_yields_no_hits() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let base = mon
            .run_monitored(&h, &word(&["msg", "msg"]), &QueryOptions::default())
            .unwrap();
        let loc = state_alloc_loc(&base.alloc_log, 2, 2);
        let out = watch_reads(&h, &word(&["msg"]), &loc, "probe", &base.alloc_log, &QueryOptions::default())
            .unwrap();
        assert!(out.hits.is_empty(), "probe handler never touches the tally");
        assert!(!out.accesses.is_empty(), "the trace itself is not empty");
    }

    #[test]
    fn unmapped_location_is_an_error() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let base = mon
            .run_monitored(&h, &word(&["msg"]), &QueryOptions::default())
            .unwrap();
        let loc = MemoryLocation { alloc: AllocId(999), offset: 0, size: 1, inferred_type: None };
        let err = watch_reads(&h, &word(&["msg"]), &loc, "msg", &base.alloc_log, &QueryOptions::default())
            .unwrap_err();
        assert!(matches!(err, MonitorError::LocationUnmapped(_)));
    }

    #[test]
    fn patterns_recover_single_channels_from_a_happy_trace() {
        let h = harness("backdoor(12)");
        let mut mon = Monitor::new();
        let flow = h.spec().happy_flow.clone();
        let run = mon.run_monitored(&h, &flow, &QueryOptions::default()).unwrap();
        let p = infer_io_patterns(&run.events, &run.io_log).unwrap();
        assert_eq!(p.input.len(), 1);
        assert_eq!(p.input[0].trap, TrapKind::Receive);
        assert_eq!(p.output.len(), 1);
        assert_eq!(p.output[0].trap, TrapKind::Send);
        assert_eq!(p.close, [CloseKind::Close]);
    }

    #[test]
    fn silent_trace_has_empty_output_pattern() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let run = mon.run_monitored(&h, &word(&["msg"]), &QueryOptions::default()).unwrap();
        let p = infer_io_patterns(&run.events, &run.io_log).unwrap();
        assert!(p.output.is_empty());
        assert_eq!(p.input.len(), 1);
    }

    #[test]
    fn duplicate_channels_are_ambiguous() {
        let mk = |addr: u64, payload: &[u8]| ExecutionEvent {
            kind: EventKind::ReadReturned { addr, len: payload.len() as u64, payload: payload.to_vec() },
            timestamp: 1,
        };
        let events = alloc::vec![mk(0x100, &[1, 2]), mk(0x200, &[1, 2])];
        let io_log = alloc::vec![IoEntry {
            timestamp: 0,
            direction: Direction::Sent,
            bytes: alloc::vec![1, 2],
        }];
        let err = infer_io_patterns(&events, &io_log).unwrap_err();
        assert!(matches!(err, MonitorError::PatternAmbiguous));
    }

    #[test]
    fn dump_round_trips() {
        let h = harness("backdoor(3)");
        let mut mon = Monitor::new();
        let run = mon.run_monitored(&h, &word(&["auth", "data"]), &QueryOptions::default()).unwrap();
        let bytes = encode_snapshot_dump(&run, mon.store());
        let records = decode_snapshot_dump(&bytes).unwrap();
        assert_eq!(records.len(), run.snapshots.len());
        for (rec, meta) in records.iter().zip(&run.snapshots) {
            assert_eq!(rec.0, meta.timestamp);
            assert_eq!(rec.1, meta.trigger);
            assert_eq!(rec.2, meta.query_index);
            assert_eq!(rec.3, mon.store().get(meta.id).to_bytes());
        }
        assert!(matches!(
            decode_snapshot_dump(&bytes[..bytes.len() - 3]),
            Err(MonitorError::BadDump { .. })
        ));
    }

    #[test]
    fn alloc_log_lines_match_records() {
        let h = harness("early-keys");
        let mut mon = Monitor::new();
        let run = mon.run_monitored(&h, &word(&["keyx"]), &QueryOptions::default()).unwrap();
        let text = format_alloc_log(&run.alloc_log);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), run.alloc_log.len());
        assert!(!lines.is_empty());
        for (line, rec) in lines.iter().zip(&run.alloc_log) {
            let fields: Vec<&str> = line.split(' ').collect();
            assert_eq!(fields.len(), 6);
            assert_eq!(fields[0].parse::<u32>().unwrap(), rec.position);
            assert_eq!(fields[2].parse::<u64>().unwrap(), rec.size);
        }
    }

    #[test]
    fn session_fault_surfaces_with_partial_logs() {
        use crate::protocols::{InputCoding, PayloadTemplate, ProtocolSpec, ReferenceMachine};
        let spec = ProtocolSpec {
            name: "crashy".into(),
            family: "crashy".into(),
            params: BTreeMap::new(),
            program_source: "\
.entry start\n\
start:\n\
  alloc r6, 16\n\
loop:\n\
  recv r0, r6, 16\n\
  mov r2, 0x90000000\n\
  store.8 [r2], r1\n\
  jmp loop\n"
                .into(),
            inputs: alloc::vec![InputCoding {
                symbol: "poke".into(),
                header: 1,
                payload: PayloadTemplate::Static(Vec::new()),
            }],
            outputs: Vec::new(),
            happy_flow: word(&["poke"]),
            reference: ReferenceMachine::Infinite,
        };
        let h = Harness::new(spec).unwrap();
        let mut mon = Monitor::new();
        match mon.run_monitored(&h, &word(&["poke"]), &QueryOptions::default()) {
            Err(MonitorError::SessionFault { partial, .. }) => {
                assert_eq!(partial.outputs, ["FAULT"]);
                assert!(partial.initial_snapshot.is_some());
                assert!(partial
                    .snapshots
                    .iter()
                    .any(|m| m.trigger == SnapshotTrigger::AfterRead));
            }
            other => panic!("expected a session fault, got {other:?}"),
        }
    }
}
