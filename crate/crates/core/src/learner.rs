//! Grey-box learner: infers a Mealy machine by keying observed sessions on
//! candidate state memory, then collapsing states whose memory differences
//! never condition future behaviour.
//!
//! The loop has three phases. Bootstrap runs the happy flow and its one-input
//! extensions twice each, diffs the aligned snapshots into a candidate set,
//! and seeds the hypothesis from those same runs. Exploration dequeues
//! completion queries in length order, interning one state per distinct
//! (valuation, terminal) pair. After each length class a merge pass classifies
//! every differing location of each eligible state pair; a pair merges only
//! when no location is state-defining, and the union closes over successors
//! so determinism is preserved.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cell::Cell;
use core::cmp::Ordering;

use serde::Serialize;

use crate::dataflow::{
    classify, read_before_write, TaintConfig, VerdictKind, DEFAULT_WINDOW,
};
use crate::harness::{Harness, HarnessError, QueryOptions};
use crate::memdiff::{
    align_allocations, build_groups, diff_snapshots, gen_bootstrap, infer_types, minimize,
    pick_base_log, project, AllocationMap, CandidateSet, DiffGroup, GroupMember, MemdiffError,
    MemoryLocation, TypedAccess,
};
use crate::model::{Model, TerminalKind, OUTPUT_CLOSED, OUTPUT_FAULT};
use crate::monitor::{watch_reads, AllocationRecord, Monitor, MonitorError, MonitoredRun};
use crate::protocols::ProtocolSpec;
use crate::vm::{
    VmConfig, VmContext, HEAP_CAP, STACK_BASE, STACK_SIZE, STATIC_BASE, STATIC_CAP,
};
use crate::memdiff::AllocId;

/// Cached monitored runs beyond this count are returned but not retained;
/// long exploration on unbounded machines would otherwise hold every run.
const QUERY_CACHE_CAP: usize = 4096;

/// Time source for the learning budget. Kept abstract so the core stays
/// freestanding; binaries plug in a wall clock, tests a counting one.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

/// Clock that never advances; learning runs without a budget.
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// Clock advancing a fixed step per reading, for deterministic budget tests.
pub struct TickClock {
    step: u64,
    now: Cell<u64>,
}

impl TickClock {
    pub fn new(step: u64) -> TickClock {
        TickClock { step, now: Cell::new(0) }
    }
}

impl Clock for TickClock {
    fn now_ms(&self) -> u64 {
        let v = self.now.get();
        self.now.set(v + self.step);
        v
    }
}

/// Learner parameters. Defaults match the tool's shipped configuration.
#[derive(Clone, Debug)]
pub struct LearnConfig {
    /// Repetitions appended to each happy-flow prefix during bootstrap.
    pub bootstrap_repeat: usize,
    /// Probe depth bounding merge eligibility: candidate pairs must agree on
    /// I/O to this depth and lie within this many transitions of each other.
    pub probe_depth: usize,
    /// Instruction window for each classification phase.
    pub window: u32,
    pub seed: u64,
    /// Wall budget; exceeding it stops learning with a flagged partial model.
    pub time_bound_ms: Option<u64>,
    /// Abstract outputs whose inputs are skipped when probing a location;
    /// watching a session that closes or faults on the probe yields nothing.
    pub disabled_outputs: BTreeSet<String>,
}

impl Default for LearnConfig {
    fn default() -> LearnConfig {
        let mut disabled = BTreeSet::new();
        disabled.insert(OUTPUT_CLOSED.to_owned());
        disabled.insert(OUTPUT_FAULT.to_owned());
        LearnConfig {
            bootstrap_repeat: 3,
            probe_depth: 3,
            window: DEFAULT_WINDOW,
            seed: 0,
            time_bound_ms: None,
            disabled_outputs: disabled,
        }
    }
}

/// Run accounting, serialized into the report.
#[derive(Clone, Debug, Default, Serialize)]
pub struct LearnStats {
    /// Candidate locations the final classification pass worked against.
    pub classifying_mem_locations: usize,
    /// Distinct allocations those locations live in.
    pub classifying_mem_allocations: usize,
    /// States ever interned, before merging.
    pub mem_states: usize,
    /// Live states after merging.
    pub io_states: usize,
    /// Every session execution: monitored queries plus watchpoint replays.
    pub total_queries: u64,
    /// Monitored input/output queries (bootstrap, completion, eligibility).
    pub io_mem_queries: u64,
    /// Watchpoint replays issued during classification.
    pub watchpoint_queries: u64,
    /// Read hits those replays produced.
    pub watchpoint_hits: u64,
    pub total_time_ms: u64,
    pub merges: u64,
    /// Queries answered from the hypothesis or the run cache, not the VM.
    pub reused_queries: u64,
    pub time_bound_exceeded: bool,
    /// Set by the black-box baseline when its query budget ran out.
    pub query_cap_exceeded: bool,
}

/// One dataflow verdict, tied to the probe that produced it.
#[derive(Clone, Debug, Serialize)]
pub struct ClassificationRecord {
    /// Access word of the state the probe ran from, space-joined.
    pub state: String,
    pub input: String,
    pub alloc_id: u32,
    pub offset: u64,
    pub size: u64,
    pub verdict: String,
    pub branch_pc: Option<usize>,
    pub write_pc: Option<usize>,
}

/// A considered state pair, identified by access words.
#[derive(Clone, Debug, Serialize)]
pub struct PairRecord {
    pub base: String,
    pub merge: String,
    pub reason: String,
}

/// One live model state with the word that reaches it.
#[derive(Clone, Debug, Serialize)]
pub struct StateRecord {
    pub id: usize,
    pub access_word: Vec<String>,
    pub terminal: TerminalKind,
}

/// Everything a learning run produces.
#[derive(Clone, Debug)]
pub struct LearnReport {
    pub model: Model,
    pub stats: LearnStats,
    pub candidates: CandidateSet,
    pub classifications: Vec<ClassificationRecord>,
    pub merged_pairs: Vec<PairRecord>,
    pub kept_pairs: Vec<PairRecord>,
    pub states: Vec<StateRecord>,
}

impl LearnReport {
    pub fn to_json(&self) -> serde_json::Value {
        let model = serde_json::from_str::<serde_json::Value>(&self.model.to_json())
            .unwrap_or(serde_json::Value::Null);
        serde_json::json!({
            "model": model,
            "stats": serde_json::to_value(&self.stats).unwrap_or(serde_json::Value::Null),
            "candidates": self.candidates.to_json(),
            "classifications": serde_json::to_value(&self.classifications)
                .unwrap_or(serde_json::Value::Null),
            "merged_pairs": serde_json::to_value(&self.merged_pairs)
                .unwrap_or(serde_json::Value::Null),
            "kept_pairs": serde_json::to_value(&self.kept_pairs)
                .unwrap_or(serde_json::Value::Null),
            "states": serde_json::to_value(&self.states).unwrap_or(serde_json::Value::Null),
        })
    }
}

/// Differing locations of one state pair and their fresh verdicts.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub base: Vec<String>,
    pub merge: Vec<String>,
    pub differing: Vec<MemoryLocation>,
    pub verdicts: Vec<ClassificationRecord>,
}

#[derive(Debug)]
pub enum LearnError {
    Harness(HarnessError),
    Monitor(Box<MonitorError>),
    Diff(MemdiffError),
    /// The protocol declares no happy flow; nothing seeds the bootstrap.
    EmptyHappyFlow,
    /// Observations contradict the state abstraction; the model is unsound.
    Inconsistent(String),
}

impl core::fmt::Display for LearnError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LearnError::Harness(e) => write!(f, "harness: {e}"),
            LearnError::Monitor(e) => write!(f, "monitor: {e}"),
            LearnError::Diff(e) => write!(f, "snapshot diffing: {e}"),
            LearnError::EmptyHappyFlow => write!(f, "protocol has an empty happy flow"),
            LearnError::Inconsistent(why) => write!(f, "inconsistent observations: {why}"),
        }
    }
}

impl From<HarnessError> for LearnError {
    fn from(e: HarnessError) -> LearnError {
        LearnError::Harness(e)
    }
}

impl From<MonitorError> for LearnError {
    fn from(e: MonitorError) -> LearnError {
        LearnError::Monitor(Box::new(e))
    }
}

impl From<MemdiffError> for LearnError {
    fn from(e: MemdiffError) -> LearnError {
        LearnError::Diff(e)
    }
}

/// What a state is keyed on: candidate memory projected through the run's
/// allocation map, plus how the session ended there.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct StateKey {
    valuation: Vec<u8>,
    terminal: TerminalKind,
}

struct StateInfo {
    key: StateKey,
    /// Shortest known word reaching this state, shortlex order.
    access: Vec<String>,
    /// Outgoing edges on raw state indices; resolve through the union-find.
    transitions: BTreeMap<String, (String, usize)>,
    terminal: TerminalKind,
    /// Park snapshot the key was projected from; the fault sink has none.
    snapshot: Option<Arc<VmContext>>,
    map: AllocationMap,
}

/// Outcome of probing one differing location, cached per (state, loc, input).
#[derive(Clone, Debug)]
enum LocOutcome {
    Clear,
    Defining(String),
    Undecided(String),
    Unmapped(String),
}

enum Check {
    Merged,
    Ineligible,
    Kept(String),
}

type ProbeKey = (Vec<String>, (u32, u64, u64), String);

struct Learner<'c> {
    harness: Harness,
    monitor: Monitor,
    alphabet: Vec<String>,
    cfg: LearnConfig,
    clock: &'c dyn Clock,
    start_ms: u64,

    cache: BTreeMap<(u64, u8, Vec<String>), Arc<MonitoredRun>>,
    base_log: Vec<AllocationRecord>,
    cands: CandidateSet,
    groups: Vec<DiffGroup>,
    members: Vec<GroupMember>,

    states: Vec<StateInfo>,
    keys: BTreeMap<StateKey, usize>,
    uf: Vec<usize>,
    fault_state: Option<usize>,
    queue: BTreeSet<(usize, Vec<String>)>,

    /// Bytes with permanent state-defining evidence; pairs differing in any
    /// of them are kept without re-probing.
    sd_bytes: BTreeSet<(u32, u64)>,
    /// Traced accesses in base coordinates, feeding type widening.
    accesses: BTreeSet<(u32, u64, u8)>,
    probe_cache: BTreeMap<ProbeKey, LocOutcome>,

    stats: LearnStats,
    classifications: Vec<ClassificationRecord>,
    merged_pairs: Vec<PairRecord>,
    kept_pairs: BTreeMap<(String, String), String>,
}

fn shortlex(a: &[String], b: &[String]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

fn join(word: &[String]) -> String {
    word.join(" ")
}

fn translate(map: &AllocationMap, addr: u64) -> Option<(AllocId, u64)> {
    map.pairs()
        .iter()
        .find(|p| addr >= p.address && addr < p.address + p.size)
        .map(|p| (p.base, addr - p.address))
}

impl<'c> Learner<'c> {
    fn new(
        spec: ProtocolSpec,
        cfg: LearnConfig,
        clock: &'c dyn Clock,
    ) -> Result<Learner<'c>, LearnError> {
        let harness = Harness::new(spec)?;
        let alphabet = harness.spec().input_symbols();
        let start_ms = clock.now_ms();
        Ok(Learner {
            harness,
            monitor: Monitor::new(),
            alphabet,
            cfg,
            clock,
            start_ms,
            cache: BTreeMap::new(),
            base_log: Vec::new(),
            cands: CandidateSet {
                locations: Vec::new(),
                base_log: Vec::new(),
                rejected: BTreeSet::new(),
            },
            groups: Vec::new(),
            members: Vec::new(),
            states: Vec::new(),
            keys: BTreeMap::new(),
            uf: Vec::new(),
            fault_state: None,
            queue: BTreeSet::new(),
            sd_bytes: BTreeSet::new(),
            accesses: BTreeSet::new(),
            probe_cache: BTreeMap::new(),
            stats: LearnStats::default(),
            classifications: Vec::new(),
            merged_pairs: Vec::new(),
            kept_pairs: BTreeMap::new(),
        })
    }

    fn base_opts(&self) -> QueryOptions {
        QueryOptions { seed: self.cfg.seed, nonce: 0, vm: VmConfig::default() }
    }

    fn deadline_hit(&self) -> bool {
        match self.cfg.time_bound_ms {
            Some(bound) => self.clock.now_ms().saturating_sub(self.start_ms) >= bound,
            None => false,
        }
    }

    /// Run one monitored query, answering from the cache when an earlier run
    /// covers it as a prefix. Faulting runs are kept; their partial logs are
    /// exactly what the fold needs.
    fn engine_run(
        &mut self,
        query: &[String],
        opts: &QueryOptions,
    ) -> Result<Arc<MonitoredRun>, LearnError> {
        let probe = (opts.seed, opts.nonce, query.to_vec());
        let covering = self
            .cache
            .range(probe.clone()..)
            .take_while(|(k, _)| k.0 == opts.seed && k.1 == opts.nonce && k.2.starts_with(query))
            .map(|(_, run)| Arc::clone(run))
            .next();
        if let Some(run) = covering {
            self.stats.reused_queries += 1;
            return Ok(run);
        }
        let run = match self.monitor.run_monitored(&self.harness, query, opts) {
            Ok(run) => run,
            Err(MonitorError::SessionFault { partial, .. }) => *partial,
            Err(e) => return Err(e.into()),
        };
        self.stats.total_queries += 1;
        self.stats.io_mem_queries += 1;
        let run = Arc::new(run);
        if self.cache.len() < QUERY_CACHE_CAP {
            self.cache.insert(probe, Arc::clone(&run));
        }
        Ok(run)
    }

    fn key_for(
        &self,
        snapshot: &Arc<VmContext>,
        map: &AllocationMap,
        terminal: TerminalKind,
    ) -> StateKey {
        let member = GroupMember { snapshot: Arc::clone(snapshot), map: map.clone() };
        StateKey { valuation: project(&member, &self.cands.locations), terminal }
    }

    /// Look up or create the state for `key`, remembering the shortest word
    /// reaching it. New non-terminal states enqueue one completion query per
    /// input symbol.
    fn intern(
        &mut self,
        key: StateKey,
        access: Vec<String>,
        snapshot: &Arc<VmContext>,
        map: &AllocationMap,
    ) -> usize {
        if let Some(&idx) = self.keys.get(&key) {
            if shortlex(&access, &self.states[idx].access) == Ordering::Less {
                self.states[idx].access = access.clone();
            }
            let root = self.find(idx);
            if shortlex(&access, &self.states[root].access) == Ordering::Less {
                self.states[root].access = access;
            }
            return idx;
        }
        let idx = self.states.len();
        let terminal = key.terminal;
        self.states.push(StateInfo {
            key: key.clone(),
            access: access.clone(),
            transitions: BTreeMap::new(),
            terminal,
            snapshot: Some(Arc::clone(snapshot)),
            map: map.clone(),
        });
        self.keys.insert(key, idx);
        self.uf.push(idx);
        if terminal == TerminalKind::None {
            for input in &self.alphabet {
                let mut q = access.clone();
                q.push(input.clone());
                self.queue.insert((q.len(), q));
            }
        }
        idx
    }

    /// Absorbing state for faulted sessions. Kept out of the key table so an
    /// empty candidate set cannot alias it with a real terminal state.
    fn fault_sink(&mut self, access: Vec<String>) -> usize {
        if let Some(idx) = self.fault_state {
            return idx;
        }
        let idx = self.states.len();
        self.states.push(StateInfo {
            key: StateKey { valuation: Vec::new(), terminal: TerminalKind::Closed },
            access,
            transitions: BTreeMap::new(),
            terminal: TerminalKind::Closed,
            snapshot: None,
            map: AllocationMap::default(),
        });
        self.uf.push(idx);
        self.fault_state = Some(idx);
        idx
    }

    fn link(&mut self, from: usize, input: &str, output: &str, to: usize) -> Result<(), LearnError> {
        let root = self.find(from);
        match self.states[root].transitions.get(input) {
            Some((o, t)) => {
                if o != output || self.find(*t) != self.find(to) {
                    return Err(LearnError::Inconsistent(format!(
                        "state `{}` answers `{input}` with `{o}` and `{output}`",
                        join(&self.states[root].access),
                    )));
                }
                Ok(())
            }
            None => {
                self.states[root].transitions.insert(input.to_owned(), (output.to_owned(), to));
                Ok(())
            }
        }
    }

    /// Intern every state along `run`, up to `limit` inputs, and record the
    /// transitions between them.
    fn fold(&mut self, run: &MonitoredRun, limit: usize) -> Result<(), LearnError> {
        let Some(init) = run.initial_snapshot else {
            // The session died before its first read; nothing was observed.
            return Ok(());
        };
        let map = align_allocations(&run.alloc_log, &self.base_log);
        let snapshot = Arc::clone(self.monitor.store().get(init));
        let key = self.key_for(&snapshot, &map, TerminalKind::None);
        let mut cur = self.intern(key, Vec::new(), &snapshot, &map);

        let n = limit.min(run.query.len());
        for k in 0..n {
            let input = run.query[k].clone();
            if k >= run.alignment.mapping.len() {
                // No post-state snapshot: the session faulted here, or an
                // earlier terminal already absorbed this input.
                if run.outputs.get(k).map(String::as_str) == Some(OUTPUT_FAULT) {
                    let sink = self.fault_sink(run.query[..=k].to_vec());
                    self.link(cur, &input, OUTPUT_FAULT, sink)?;
                }
                break;
            }
            let output = run
                .outputs
                .get(k)
                .cloned()
                .ok_or_else(|| LearnError::Inconsistent("missing output".to_owned()))?;
            let terminal = match run.alignment.terminal {
                Some((event, at)) if at == k => event.kind(),
                _ => TerminalKind::None,
            };
            let snapshot = Arc::clone(self.monitor.store().get(run.alignment.mapping[k]));
            let key = self.key_for(&snapshot, &map, terminal);
            let next = self.intern(key, run.query[..=k].to_vec(), &snapshot, &map);
            self.link(cur, &input, &output, next)?;
            cur = next;
            if terminal != TerminalKind::None {
                break;
            }
        }
        Ok(())
    }

    fn find(&self, mut i: usize) -> usize {
        while self.uf[i] != i {
            i = self.uf[i];
        }
        i
    }

    /// Output and (resolved) successor of `state` under `input`, including
    /// the implicit self-loop of terminal states.
    fn output_of(&self, state: usize, input: &str) -> Option<(String, usize)> {
        let root = self.find(state);
        if let Some((o, t)) = self.states[root].transitions.get(input) {
            return Some((o.clone(), self.find(*t)));
        }
        self.states[root].terminal.loop_output().map(|o| (o.to_owned(), root))
    }

    fn path_defined(&self, query: &[String]) -> bool {
        let mut s = self.find(0);
        for input in query {
            match self.output_of(s, input) {
                Some((_, t)) => s = t,
                None => return false,
            }
        }
        true
    }

    // Bootstrap: run the plan twice per query under varied seed and nonce,
    // diff the aligned snapshots, minimize, and seed the hypothesis from the
    // very same runs.
    fn bootstrap(&mut self) -> Result<(), LearnError> {
        let plan = gen_bootstrap(self.harness.spec(), self.cfg.bootstrap_repeat.max(1));
        if plan.happy_flow.is_empty() {
            return Err(LearnError::EmptyHappyFlow);
        }
        let mut runs = Vec::new();
        for query in &plan.queries {
            for rep in 0..plan.repeats {
                let opts = QueryOptions {
                    seed: self.cfg.seed.wrapping_add(rep as u64),
                    nonce: rep as u8,
                    vm: VmConfig::default(),
                };
                runs.push(self.engine_run(query, &opts)?);
            }
        }
        let owned: Vec<MonitoredRun> = runs.iter().map(|r| MonitoredRun::clone(r)).collect();
        self.base_log = pick_base_log(&owned, &plan.happy_flow).to_vec();
        self.groups = build_groups(&owned, &self.base_log, self.monitor.store());
        let cands = diff_snapshots(&self.groups, &self.base_log)?;
        self.members = self.groups.iter().flat_map(|g| g.members.iter().cloned()).collect();

        let mut addr_space = alloc::vec![
            STATIC_BASE..STATIC_BASE + STATIC_CAP as u64,
            STACK_BASE..STACK_BASE + STACK_SIZE as u64,
        ];
        let heap_bases: BTreeSet<u64> =
            self.members.iter().map(|m| m.snapshot.heap_base).collect();
        addr_space.extend(heap_bases.into_iter().map(|b| b..b + HEAP_CAP as u64));
        self.cands = minimize(&cands, &self.members, &addr_space);

        for run in &runs {
            let limit = run.query.len();
            self.fold(run, limit)?;
        }
        if self.states.is_empty() {
            return Err(LearnError::Inconsistent(
                "no run reached its first read; nothing to learn from".to_owned(),
            ));
        }
        Ok(())
    }

    /// Execute every queued query of the shortest pending length.
    fn drain_shortest_class(&mut self) -> Result<(), LearnError> {
        let Some(len) = self.queue.iter().next().map(|e| e.0) else {
            return Ok(());
        };
        while let Some(entry) = self.queue.iter().next().cloned() {
            if entry.0 != len {
                break;
            }
            self.queue.remove(&entry);
            if self.deadline_hit() {
                self.stats.time_bound_exceeded = true;
                return Ok(());
            }
            if self.path_defined(&entry.1) {
                self.stats.reused_queries += 1;
                continue;
            }
            let opts = self.base_opts();
            let run = self.engine_run(&entry.1, &opts)?;
            self.fold(&run, entry.1.len())?;
        }
        Ok(())
    }

    fn run_to_fixpoint(&mut self) -> Result<(), LearnError> {
        loop {
            if self.stats.time_bound_exceeded {
                return Ok(());
            }
            if !self.queue.is_empty() {
                self.drain_shortest_class()?;
                if self.stats.time_bound_exceeded {
                    return Ok(());
                }
            }
            self.merge_pass()?;
            if self.stats.time_bound_exceeded || self.queue.is_empty() {
                return Ok(());
            }
        }
    }

    /// Re-run type inference over everything traced so far; on a layout
    /// change, re-project every state and union key collisions outright (a
    /// collision means the refined layout cannot tell the states apart).
    fn retype(&mut self) -> Result<(), LearnError> {
        if self.accesses.is_empty() {
            return Ok(());
        }
        let typed: Vec<TypedAccess> = self
            .accesses
            .iter()
            .map(|&(alloc, offset, width)| TypedAccess { alloc: AllocId(alloc), offset, width })
            .collect();
        let new = infer_types(&typed, &self.cands, &self.groups);
        if new.locations == self.cands.locations {
            return Ok(());
        }
        self.cands = new;
        self.keys.clear();
        let mut collisions = Vec::new();
        for idx in 0..self.states.len() {
            let Some(snapshot) = self.states[idx].snapshot.clone() else {
                continue;
            };
            let map = self.states[idx].map.clone();
            let key = self.key_for(&snapshot, &map, self.states[idx].terminal);
            self.states[idx].key = key.clone();
            match self.keys.get(&key) {
                Some(&first) => collisions.push((first, idx)),
                None => {
                    self.keys.insert(key, idx);
                }
            }
        }
        for (a, b) in collisions {
            if self.find(a) != self.find(b) {
                self.union_states(a, b).map_err(|why| {
                    LearnError::Inconsistent(format!("re-keyed states disagree: {why}"))
                })?;
                self.stats.merges += 1;
                self.merged_pairs.push(PairRecord {
                    base: join(&self.states[self.find(a)].access),
                    merge: join(&self.states[b].access),
                    reason: "identical valuation under widened types".to_owned(),
                });
            }
        }
        Ok(())
    }

    fn sorted_roots(&self) -> Vec<usize> {
        let mut roots: Vec<usize> =
            (0..self.states.len()).filter(|&i| self.find(i) == i).collect();
        roots.sort_by(|&a, &b| {
            shortlex(&self.states[a].access, &self.states[b].access).then(a.cmp(&b))
        });
        roots
    }

    /// Classify every eligible pair, restarting from scratch after each
    /// merge; on return no eligible pair can merge under current knowledge.
    fn merge_pass(&mut self) -> Result<(), LearnError> {
        'restart: loop {
            if self.deadline_hit() {
                self.stats.time_bound_exceeded = true;
                return Ok(());
            }
            self.retype()?;
            let roots = self.sorted_roots();
            for bi in 0..roots.len() {
                for mi in bi + 1..roots.len() {
                    if self.deadline_hit() {
                        self.stats.time_bound_exceeded = true;
                        return Ok(());
                    }
                    let (base, merge) = (roots[bi], roots[mi]);
                    match self.merge_check(base, merge)? {
                        Check::Merged => {
                            self.stats.merges += 1;
                            self.merged_pairs.push(PairRecord {
                                base: join(&self.states[self.find(base)].access),
                                merge: join(&self.states[merge].access),
                                reason: "no differing location is state-defining".to_owned(),
                            });
                            continue 'restart;
                        }
                        Check::Ineligible => {}
                        Check::Kept(reason) => {
                            self.kept_pairs.insert(
                                (
                                    join(&self.states[base].access),
                                    join(&self.states[merge].access),
                                ),
                                reason,
                            );
                        }
                    }
                }
            }
            return Ok(());
        }
    }

    fn merge_check(&mut self, base: usize, merge: usize) -> Result<Check, LearnError> {
        if !self.reachable_within(base, merge, self.cfg.probe_depth) {
            return Ok(Check::Ineligible);
        }
        if !self.io_equivalent(base, merge)? {
            return Ok(Check::Ineligible);
        }
        let diffs = self.differing_locations(base, merge);
        if diffs.is_empty() {
            // Equal valuations under different keys only happens across
            // terminal kinds (or against the fault sink); never mergeable.
            return Ok(Check::Ineligible);
        }
        for loc in &diffs {
            let cached = (loc.offset..loc.offset + loc.size)
                .any(|o| self.sd_bytes.contains(&(loc.alloc.0, o)));
            if cached {
                return Ok(Check::Kept(format!(
                    "cached state-defining evidence covers alloc {} offset {}",
                    loc.alloc.0, loc.offset
                )));
            }
        }
        for loc in &diffs {
            match self.classify_location(base, merge, loc)? {
                LocOutcome::Clear => {}
                LocOutcome::Defining(why)
                | LocOutcome::Undecided(why)
                | LocOutcome::Unmapped(why) => return Ok(Check::Kept(why)),
            }
        }
        // Everything differing is provably inert; union, closing over
        // successors. A conflict inside the closure rolls the merge back.
        let saved_uf = self.uf.clone();
        let saved: Vec<BTreeMap<String, (String, usize)>> =
            self.states.iter().map(|s| s.transitions.clone()).collect();
        match self.union_states(base, merge) {
            Ok(()) => Ok(Check::Merged),
            Err(why) => {
                self.uf = saved_uf;
                for (state, trans) in self.states.iter_mut().zip(saved) {
                    state.transitions = trans;
                }
                Ok(Check::Kept(format!("merge rolled back: {why}")))
            }
        }
    }

    /// Directed reachability: can `to` be reached from `from` in at most
    /// `depth` transitions? Merging folds that path into a cycle.
    fn reachable_within(&self, from: usize, to: usize, depth: usize) -> bool {
        let target = self.find(to);
        let start = self.find(from);
        let mut seen = BTreeSet::new();
        seen.insert(start);
        let mut frontier = alloc::vec![start];
        for _ in 0..depth {
            let mut next = Vec::new();
            for s in frontier {
                for (_, (_, t)) in &self.states[s].transitions {
                    let r = self.find(*t);
                    if r == target {
                        return true;
                    }
                    if seen.insert(r) {
                        next.push(r);
                    }
                }
            }
            if next.is_empty() {
                return false;
            }
            frontier = next;
        }
        false
    }

    /// Product walk to the probe depth; undefined inputs are resolved by
    /// running the state's access word extended with that input.
    fn io_equivalent(&mut self, a: usize, b: usize) -> Result<bool, LearnError> {
        let alphabet = self.alphabet.clone();
        let mut seen = BTreeSet::new();
        let mut frontier = alloc::vec![(self.find(a), self.find(b))];
        seen.insert((self.find(a), self.find(b)));
        for _ in 0..self.cfg.probe_depth {
            let mut next = Vec::new();
            for (x, y) in frontier {
                for input in &alphabet {
                    let ox = self.probed_output(x, input)?;
                    let oy = self.probed_output(y, input)?;
                    match (ox, oy) {
                        (None, None) => {}
                        (Some((o1, t1)), Some((o2, t2))) => {
                            if o1 != o2 {
                                return Ok(false);
                            }
                            if t1 != t2 && seen.insert((t1, t2)) {
                                next.push((t1, t2));
                            }
                        }
                        _ => return Ok(false),
                    }
                }
            }
            frontier = next;
        }
        Ok(true)
    }

    fn probed_output(&mut self, state: usize, input: &str) -> Result<Option<(String, usize)>, LearnError> {
        if let Some(found) = self.output_of(state, input) {
            return Ok(Some(found));
        }
        let mut query = self.states[self.find(state)].access.clone();
        query.push(input.to_owned());
        let opts = self.base_opts();
        let run = self.engine_run(&query, &opts)?;
        self.fold(&run, query.len())?;
        Ok(self.output_of(state, input))
    }

    fn differing_locations(&self, a: usize, b: usize) -> Vec<MemoryLocation> {
        let va = &self.states[self.find(a)].key.valuation;
        let vb = &self.states[self.find(b)].key.valuation;
        if va.len() != vb.len() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut off = 0usize;
        for loc in &self.cands.locations {
            let n = loc.size as usize;
            if va[off..off + n] != vb[off..off + n] {
                out.push(loc.clone());
            }
            off += n;
        }
        out
    }

    /// Watch every read of `loc` on every live probe from both states and
    /// classify each hit. The first state-defining hit decides; its bytes are
    /// cached so later pairs differing there never re-probe.
    fn classify_location(
        &mut self,
        base: usize,
        merge: usize,
        loc: &MemoryLocation,
    ) -> Result<LocOutcome, LearnError> {
        let alphabet = self.alphabet.clone();
        for state in [base, merge] {
            let access = self.states[self.find(state)].access.clone();
            for input in &alphabet {
                if let Some((output, _)) = self.output_of(state, input) {
                    if self.cfg.disabled_outputs.contains(&output) {
                        continue;
                    }
                }
                let probe_key =
                    (access.clone(), (loc.alloc.0, loc.offset, loc.size), input.clone());
                if let Some(cached) = self.probe_cache.get(&probe_key) {
                    match cached.clone() {
                        LocOutcome::Clear => continue,
                        other => return Ok(other),
                    }
                }
                let outcome = self.watch_and_classify(&access, loc, input)?;
                self.probe_cache.insert(probe_key, outcome.clone());
                match outcome {
                    LocOutcome::Clear => {}
                    LocOutcome::Defining(_) => {
                        for o in loc.offset..loc.offset + loc.size {
                            self.sd_bytes.insert((loc.alloc.0, o));
                        }
                        return Ok(outcome);
                    }
                    other => return Ok(other),
                }
            }
        }
        Ok(LocOutcome::Clear)
    }

    fn watch_and_classify(
        &mut self,
        access: &[String],
        loc: &MemoryLocation,
        input: &str,
    ) -> Result<LocOutcome, LearnError> {
        let opts = self.base_opts();
        let out = match watch_reads(&self.harness, access, loc, input, &self.cands.base_log, &opts)
        {
            Ok(out) => out,
            Err(MonitorError::LocationUnmapped(l)) => {
                return Ok(LocOutcome::Unmapped(format!(
                    "alloc {} offset {} is unmapped under `{}`",
                    l.alloc.0,
                    l.offset,
                    join(access)
                )));
            }
            Err(e) => return Err(e.into()),
        };
        self.stats.watchpoint_queries += 1;
        self.stats.total_queries += 1;
        self.stats.watchpoint_hits += out.hits.len() as u64;
        for acc in &out.accesses {
            if let Some((alloc, offset)) = translate(&out.map, acc.addr) {
                self.accesses.insert((alloc.0, offset, acc.width));
            }
        }
        if out.hits.is_empty() {
            return Ok(LocOutcome::Clear);
        }
        // A location freshly written before its first read carries no state
        // into this input; whatever was diffed there was already dead.
        if !read_before_write(&out.accesses, &out.watched) {
            return Ok(LocOutcome::Clear);
        }
        for hit in &out.hits {
            let tc = TaintConfig {
                window: self.cfg.window,
                candidates: &self.cands,
                start_pc: hit.pc,
                target: loc.clone(),
            };
            let verdict = match classify(self.harness.program(), hit, &tc) {
                Ok(v) => v,
                Err(e) => {
                    return Ok(LocOutcome::Undecided(format!(
                        "classification failed at pc {}: {e}",
                        hit.pc
                    )));
                }
            };
            self.classifications.push(ClassificationRecord {
                state: join(access),
                input: input.to_owned(),
                alloc_id: loc.alloc.0,
                offset: loc.offset,
                size: loc.size,
                verdict: verdict.kind.as_str().to_owned(),
                branch_pc: verdict.branch_pc,
                write_pc: verdict.write_pc,
            });
            match verdict.kind {
                VerdictKind::NotStateDefining => {}
                VerdictKind::StateDefining => {
                    return Ok(LocOutcome::Defining(format!(
                        "alloc {} offset {} is state-defining under `{input}` from `{}` \
                         (branch {:?}, write {:?})",
                        loc.alloc.0,
                        loc.offset,
                        join(access),
                        verdict.branch_pc,
                        verdict.write_pc,
                    )));
                }
                VerdictKind::Inconclusive => {
                    return Ok(LocOutcome::Undecided(format!(
                        "inconclusive read of alloc {} offset {} under `{input}` from `{}`",
                        loc.alloc.0,
                        loc.offset,
                        join(access),
                    )));
                }
            }
        }
        Ok(LocOutcome::Clear)
    }

    /// Union with congruence closure: once two states are equal, shared
    /// inputs force their successors equal too. Orientation keeps the
    /// shortlex-smaller access word as the representative.
    fn union_states(&mut self, a: usize, b: usize) -> Result<(), String> {
        let mut work = alloc::vec![(a, b)];
        while let Some((x, y)) = work.pop() {
            let (rx, ry) = (self.find(x), self.find(y));
            if rx == ry {
                continue;
            }
            let (keep, gone) =
                if shortlex(&self.states[rx].access, &self.states[ry].access) == Ordering::Greater
                {
                    (ry, rx)
                } else {
                    (rx, ry)
                };
            if self.states[keep].terminal != self.states[gone].terminal {
                return Err(format!(
                    "terminal kinds differ: {:?} vs {:?}",
                    self.states[keep].terminal, self.states[gone].terminal
                ));
            }
            self.uf[gone] = keep;
            let gone_trans = core::mem::take(&mut self.states[gone].transitions);
            for (input, (output, to)) in gone_trans {
                match self.states[keep].transitions.get(&input) {
                    None => {
                        self.states[keep].transitions.insert(input, (output, to));
                    }
                    Some((o, t)) => {
                        if *o != output {
                            return Err(format!(
                                "output conflict on `{input}`: `{o}` vs `{output}`"
                            ));
                        }
                        work.push((*t, to));
                    }
                }
            }
        }
        Ok(())
    }

    fn build_model(&self) -> Result<(Model, Vec<StateRecord>), LearnError> {
        let roots = self.sorted_roots();
        let mut model = Model::new();
        let mut ids = BTreeMap::new();
        let mut records = Vec::new();
        for (n, &root) in roots.iter().enumerate() {
            let id = model.add_state(self.states[root].terminal);
            ids.insert(root, id);
            records.push(StateRecord {
                id: n,
                access_word: self.states[root].access.clone(),
                terminal: self.states[root].terminal,
            });
        }
        let initial = self.find(0);
        model.set_initial(*ids.get(&initial).ok_or_else(|| {
            LearnError::Inconsistent("initial state is not a live root".to_owned())
        })?);
        for &root in &roots {
            for (input, (output, to)) in &self.states[root].transitions {
                model
                    .add_transition(ids[&root], input, output, ids[&self.find(*to)])
                    .map_err(|e| LearnError::Inconsistent(format!("{e:?}")))?;
            }
        }
        Ok((model, records))
    }

    fn report(&mut self) -> Result<LearnReport, LearnError> {
        let (model, states) = self.build_model()?;
        self.stats.classifying_mem_locations = self.cands.locations.len();
        self.stats.classifying_mem_allocations = self
            .cands
            .locations
            .iter()
            .map(|l| l.alloc)
            .collect::<BTreeSet<_>>()
            .len();
        self.stats.mem_states = self.states.len();
        self.stats.io_states = states.len();
        self.stats.total_time_ms = self.clock.now_ms().saturating_sub(self.start_ms);
        Ok(LearnReport {
            model,
            stats: self.stats.clone(),
            candidates: self.cands.clone(),
            classifications: self.classifications.clone(),
            merged_pairs: self.merged_pairs.clone(),
            kept_pairs: self
                .kept_pairs
                .iter()
                .map(|((base, merge), reason)| PairRecord {
                    base: base.clone(),
                    merge: merge.clone(),
                    reason: reason.clone(),
                })
                .collect(),
            states,
        })
    }
}

fn learn_full<'c>(
    spec: &ProtocolSpec,
    cfg: &LearnConfig,
    clock: &'c dyn Clock,
) -> Result<(Learner<'c>, LearnReport), LearnError> {
    let mut learner = Learner::new(spec.clone(), cfg.clone(), clock)?;
    learner.bootstrap()?;
    learner.run_to_fixpoint()?;
    let report = learner.report()?;
    Ok((learner, report))
}

/// Learn a model of `spec` under `cfg`. Exceeding the time bound is not an
/// error; the report flags it and carries the partial model.
pub fn learn(
    spec: &ProtocolSpec,
    cfg: &LearnConfig,
    clock: &dyn Clock,
) -> Result<LearnReport, LearnError> {
    learn_full(spec, cfg, clock).map(|(_, report)| report)
}

/// Re-learn and then re-classify the differing locations of two model states
/// (by report id), with fresh probes, for post-mortem inspection.
pub fn explain(
    spec: &ProtocolSpec,
    cfg: &LearnConfig,
    clock: &dyn Clock,
    base: usize,
    merge: usize,
) -> Result<Explanation, LearnError> {
    let (mut learner, report) = learn_full(spec, cfg, clock)?;
    let roots = learner.sorted_roots();
    let b = *roots
        .get(base)
        .ok_or_else(|| LearnError::Inconsistent(format!("no state {base}")))?;
    let m = *roots
        .get(merge)
        .ok_or_else(|| LearnError::Inconsistent(format!("no state {merge}")))?;
    let differing = learner.differing_locations(b, m);
    learner.probe_cache.clear();
    let before = learner.classifications.len();
    for loc in &differing {
        let _ = learner.classify_location(b, m, loc)?;
    }
    let verdicts = learner.classifications[before..].to_vec();
    drop(report);
    Ok(Explanation {
        base: learner.states[b].access.clone(),
        merge: learner.states[m].access.clone(),
        differing,
        verdicts,
    })
}
