//! Phase-1 memory analysis: bootstrap query generation, allocation alignment
//! across runs, snapshot diffing into the candidate location set M,
//! minimization of M, and access-based type inference.
//!
//! Everything here is a pure function over logs and snapshots. Allocations
//! are identified by their position in one chosen base log; other runs are
//! aligned to it by matching size and calling context in log order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::ops::Range;

use crate::monitor::{AllocKind, AllocationRecord, MonitoredRun, SnapshotStore};
use crate::protocols::ProtocolSpec;
use crate::vm::VmContext;

/// Identity of an allocation: its position in the base allocation log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AllocId(pub u32);

/// A contiguous slice of one allocation, the unit of candidate state memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryLocation {
    pub alloc: AllocId,
    pub offset: u64,
    pub size: u64,
    /// Access width once the traced replays have shown one (1/2/4/8).
    pub inferred_type: Option<u8>,
}

impl MemoryLocation {
    fn bytes(&self) -> impl Iterator<Item = u64> + '_ {
        self.offset..self.offset + self.size
    }
}

/// The candidate set M plus the bookkeeping later passes need: the base log
/// the locations refer to and the bytes diffing threw out as inconstant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub locations: Vec<MemoryLocation>,
    pub base_log: Vec<AllocationRecord>,
    pub rejected: BTreeSet<(AllocId, u64)>,
}

impl CandidateSet {
    /// `[{allocId, offset, size, type}]`, the post-mortem dump format.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.locations
                .iter()
                .map(|l| {
                    serde_json::json!({
                        "allocId": l.alloc.0,
                        "offset": l.offset,
                        "size": l.size,
                        "type": l.inferred_type,
                    })
                })
                .collect(),
        )
    }

    fn byte_set(&self) -> BTreeSet<(AllocId, u64)> {
        self.locations
            .iter()
            .flat_map(|l| l.bytes().map(move |b| (l.alloc, b)))
            .collect()
    }
}

/// The bootstrap plan BF: the happy flow b0 plus every prefix of it extended
/// by one input repeated T times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootstrapPlan {
    pub happy_flow: Vec<String>,
    pub t: usize,
    pub queries: Vec<Vec<String>>,
    /// Executions per query; at least two, so every group can be diffed.
    pub repeats: usize,
}

/// pre: t >= 1. The plan holds |queries| = 1 + |b0| * |I| by construction;
/// textual duplicates (possible for small t) are kept, re-running one is
/// harmless and the count invariant stays exact.
pub fn gen_bootstrap(spec: &ProtocolSpec, t: usize) -> BootstrapPlan {
    debug_assert!(t >= 1);
    let b0 = spec.happy_flow.clone();
    let inputs = spec.input_symbols();
    let mut queries = Vec::with_capacity(1 + b0.len() * inputs.len());
    queries.push(b0.clone());
    for plen in 1..=b0.len() {
        for i in &inputs {
            let mut q = b0[..plen].to_vec();
            q.extend(core::iter::repeat_n(i.clone(), t));
            queries.push(q);
        }
    }
    BootstrapPlan { happy_flow: b0, t, queries, repeats: 2 }
}

/// One base-to-run allocation correspondence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignedAlloc {
    pub base: AllocId,
    pub run_position: u32,
    /// Address of the allocation in the run this map belongs to.
    pub address: u64,
    pub size: u64,
    pub context: u64,
}

/// Partial, injective mapping from base allocations to one run's.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AllocationMap {
    pairs: Vec<AlignedAlloc>,
}

impl AllocationMap {
    pub fn pairs(&self) -> &[AlignedAlloc] {
        &self.pairs
    }

    pub fn lookup(&self, base: AllocId) -> Option<&AlignedAlloc> {
        self.pairs.iter().find(|p| p.base == base)
    }

    /// Concrete byte range of a location in this run's address space; None
    /// when the base allocation is unmapped or the location overruns it.
    pub fn resolve(&self, loc: &MemoryLocation) -> Option<Range<u64>> {
        let pair = self.lookup(loc.alloc)?;
        if loc.offset + loc.size > pair.size {
            return None;
        }
        let start = pair.address + loc.offset;
        Some(start..start + loc.size)
    }
}

/// Greedy in-order matching: walk the base log by position; each base
/// allocation takes the first unconsumed run allocation agreeing on size and
/// calling context. Swapped log order across runs therefore still aligns.
pub fn align_allocations(run_log: &[AllocationRecord], base_log: &[AllocationRecord]) -> AllocationMap {
    let mut run_allocs: Vec<&AllocationRecord> =
        run_log.iter().filter(|r| r.kind == AllocKind::Alloc).collect();
    run_allocs.sort_by_key(|r| r.position);
    let mut consumed = alloc::vec![false; run_allocs.len()];
    let mut base_allocs: Vec<&AllocationRecord> =
        base_log.iter().filter(|r| r.kind == AllocKind::Alloc).collect();
    base_allocs.sort_by_key(|r| r.position);

    let mut pairs = Vec::new();
    for base in base_allocs {
        for (i, run) in run_allocs.iter().enumerate() {
            if !consumed[i] && run.size == base.size && run.context == base.context {
                consumed[i] = true;
                pairs.push(AlignedAlloc {
                    base: AllocId(base.position),
                    run_position: run.position,
                    address: run.address,
                    size: run.size,
                    context: run.context,
                });
                break;
            }
        }
    }
    AllocationMap { pairs }
}

/// The base log is the largest log among the happy-flow runs.
pub fn pick_base_log<'a>(runs: &'a [MonitoredRun], happy_flow: &[String]) -> &'a [AllocationRecord] {
    runs.iter()
        .filter(|r| r.query == happy_flow)
        .chain(runs.iter())
        .max_by_key(|r| r.alloc_log.len())
        .map(|r| r.alloc_log.as_slice())
        .unwrap_or(&[])
}

/// Abstract I/O word a snapshot is grouped under: the inputs processed so
/// far and the outputs they produced.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// One aligned snapshot inside a group.
#[derive(Clone, Debug)]
pub struct GroupMember {
    pub snapshot: Arc<VmContext>,
    pub map: AllocationMap,
}

impl GroupMember {
    /// Value of one base byte in this member; unmapped allocations read as
    /// the default value 0.
    pub fn read_byte(&self, alloc: AllocId, offset: u64) -> u8 {
        match self.map.lookup(alloc) {
            Some(pair) if offset < pair.size => heap_byte(&self.snapshot, pair.address + offset),
            _ => 0,
        }
    }

    fn read_word(&self, alloc: AllocId, offset: u64) -> u64 {
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.read_byte(alloc, offset + i as u64);
        }
        u64::from_le_bytes(bytes)
    }
}

fn heap_byte(ctx: &VmContext, addr: u64) -> u8 {
    let Some(i) = addr.checked_sub(ctx.heap_base) else { return 0 };
    ctx.heap.get(i as usize).copied().unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct DiffGroup {
    pub key: GroupKey,
    pub members: Vec<GroupMember>,
}

/// Group every aligned snapshot of the given runs by the abstract I/O word
/// of its query prefix. The empty word groups the initial park snapshots.
pub fn build_groups(
    runs: &[MonitoredRun],
    base_log: &[AllocationRecord],
    store: &SnapshotStore,
) -> Vec<DiffGroup> {
    let mut groups: BTreeMap<GroupKey, Vec<GroupMember>> = BTreeMap::new();
    for run in runs {
        let map = align_allocations(&run.alloc_log, base_log);
        if let Some(init) = run.initial_snapshot {
            groups
                .entry(GroupKey { inputs: Vec::new(), outputs: Vec::new() })
                .or_default()
                .push(GroupMember { snapshot: store.get(init).clone(), map: map.clone() });
        }
        for (k, &snap) in run.alignment.mapping.iter().enumerate() {
            let key = GroupKey {
                inputs: run.query[..=k].to_vec(),
                outputs: run.outputs[..=k].to_vec(),
            };
            groups
                .entry(key)
                .or_default()
                .push(GroupMember { snapshot: store.get(snap).clone(), map: map.clone() });
        }
    }
    groups
        .into_iter()
        .map(|(key, members)| DiffGroup { key, members })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MemdiffError {
    /// A diff group with fewer than two snapshots cannot vote on constancy.
    InsufficientRuns { key: GroupKey, have: usize },
}

impl core::fmt::Display for MemdiffError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MemdiffError::InsufficientRuns { key, have } => write!(
                f,
                "group {:?}/{:?} has {have} snapshot(s); diffing needs at least 2",
                key.inputs, key.outputs
            ),
        }
    }
}

/// Diff snapshots into the candidate set M. A byte survives iff its value is
/// constant within every group and non-default (non-zero) in at least one
/// group; bytes breaking constancy land in `rejected`.
pub fn diff_snapshots(
    groups: &[DiffGroup],
    base_log: &[AllocationRecord],
) -> Result<CandidateSet, MemdiffError> {
    for g in groups {
        if g.members.len() < 2 {
            return Err(MemdiffError::InsufficientRuns {
                key: g.key.clone(),
                have: g.members.len(),
            });
        }
    }
    let mut locations = Vec::new();
    let mut rejected = BTreeSet::new();
    for alloc in base_log.iter().filter(|r| r.kind == AllocKind::Alloc) {
        let id = AllocId(alloc.position);
        let mut run_start: Option<u64> = None;
        for offset in 0..=alloc.size {
            let keep = offset < alloc.size && {
                let mut constant = true;
                let mut nonzero = false;
                for g in groups {
                    let v0 = g.members[0].read_byte(id, offset);
                    if g.members.iter().any(|m| m.read_byte(id, offset) != v0) {
                        constant = false;
                        break;
                    }
                    nonzero |= v0 != 0;
                }
                if !constant {
                    rejected.insert((id, offset));
                }
                constant && nonzero
            };
            match (keep, run_start) {
                (true, None) => run_start = Some(offset),
                (false, Some(start)) => {
                    locations.push(MemoryLocation {
                        alloc: id,
                        offset: start,
                        size: offset - start,
                        inferred_type: None,
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    Ok(CandidateSet { locations, base_log: base_log.to_vec(), rejected })
}

/// Minimize M: drop word-sized locations holding address-space values in any
/// snapshot, whole allocations whose entire content never changes, and
/// constant runs longer than 32 bytes inside locations.
pub fn minimize(
    cands: &CandidateSet,
    members: &[GroupMember],
    addr_space: &[Range<u64>],
) -> CandidateSet {
    let in_space = |v: u64| addr_space.iter().any(|r| r.contains(&v));
    let byte_constant = |alloc: AllocId, offset: u64| {
        let Some((first, rest)) = members.split_first() else { return true };
        let v0 = first.read_byte(alloc, offset);
        rest.iter().all(|m| m.read_byte(alloc, offset) == v0)
    };

    // (1) pointer-valued locations
    let mut kept: Vec<MemoryLocation> = cands
        .locations
        .iter()
        .filter(|l| {
            !(l.size == 8
                && members.iter().any(|m| in_space(m.read_word(l.alloc, l.offset))))
        })
        .cloned()
        .collect();

    // (2) allocations whose whole content is constant across all snapshots
    let hosted: BTreeSet<AllocId> = kept.iter().map(|l| l.alloc).collect();
    let mut constant_allocs = BTreeSet::new();
    for alloc in cands.base_log.iter().filter(|r| r.kind == AllocKind::Alloc) {
        let id = AllocId(alloc.position);
        if hosted.contains(&id) && (0..alloc.size).all(|off| byte_constant(id, off)) {
            constant_allocs.insert(id);
        }
    }
    kept.retain(|l| !constant_allocs.contains(&l.alloc));

    // (3) constant runs longer than 32 bytes, removed at byte granularity
    let mut final_locs = Vec::new();
    for loc in kept {
        let flags: Vec<bool> = loc.bytes().map(|b| byte_constant(loc.alloc, b)).collect();
        let mut drop = alloc::vec![false; flags.len()];
        let mut i = 0;
        while i < flags.len() {
            if flags[i] {
                let mut j = i;
                while j < flags.len() && flags[j] {
                    j += 1;
                }
                if j - i > 32 {
                    drop[i..j].iter_mut().for_each(|d| *d = true);
                }
                i = j;
            } else {
                i += 1;
            }
        }
        push_runs(&mut final_locs, loc.alloc, loc.offset, &drop);
    }
    CandidateSet {
        locations: final_locs,
        base_log: cands.base_log.clone(),
        rejected: cands.rejected.clone(),
    }
}

/// Emit one location per maximal run of non-dropped bytes.
fn push_runs(out: &mut Vec<MemoryLocation>, alloc: AllocId, base_offset: u64, drop: &[bool]) {
    let mut start = None;
    for (i, &d) in drop.iter().chain(core::iter::once(&true)).enumerate() {
        match (d, start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(MemoryLocation {
                    alloc,
                    offset: base_offset + s as u64,
                    size: (i - s) as u64,
                    inferred_type: None,
                });
                start = None;
            }
            _ => {}
        }
    }
}

/// One traced access translated to base coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TypedAccess {
    pub alloc: AllocId,
    pub offset: u64,
    pub width: u8,
}

/// Infer location types from traced accesses. Each distinct access start
/// becomes an anchor sized by its widest access, clipped at the next anchor;
/// anchored ranges may widen beyond the diffed bytes, and any previously
/// rejected byte they swallow is re-tested for group constancy and removed
/// if it still varies (splitting the range). Diffed bytes no access covers
/// stay as untyped locations.
pub fn infer_types(
    accesses: &[TypedAccess],
    cands: &CandidateSet,
    groups: &[DiffGroup],
) -> CandidateSet {
    let candidate_bytes = cands.byte_set();
    let alloc_size: BTreeMap<AllocId, u64> = cands
        .base_log
        .iter()
        .filter(|r| r.kind == AllocKind::Alloc)
        .map(|r| (AllocId(r.position), r.size))
        .collect();

    let group_constant = |alloc: AllocId, offset: u64| {
        groups.iter().all(|g| {
            let v0 = g.members[0].read_byte(alloc, offset);
            g.members.iter().all(|m| m.read_byte(alloc, offset) == v0)
        })
    };

    // Anchors per allocation: only accesses touching candidate bytes count.
    let mut anchors: BTreeMap<AllocId, BTreeMap<u64, u8>> = BTreeMap::new();
    for a in accesses {
        let touches_candidate =
            (a.offset..a.offset + a.width as u64).any(|b| candidate_bytes.contains(&(a.alloc, b)));
        if !touches_candidate {
            continue;
        }
        let w = anchors.entry(a.alloc).or_default().entry(a.offset).or_insert(0);
        *w = (*w).max(a.width);
    }

    let mut locations = Vec::new();
    let mut anchored_bytes: BTreeSet<(AllocId, u64)> = BTreeSet::new();
    for (&alloc, starts) in &anchors {
        let cap = alloc_size.get(&alloc).copied().unwrap_or(u64::MAX);
        let offsets: Vec<u64> = starts.keys().copied().collect();
        for (i, &start) in offsets.iter().enumerate() {
            let width = starts[&start] as u64;
            let natural_end = (start + width).min(cap);
            let end = match offsets.get(i + 1) {
                Some(&next) => natural_end.min(next),
                None => natural_end,
            };
            if end <= start {
                continue;
            }
            for b in start..end {
                anchored_bytes.insert((alloc, b));
            }
            // Re-test previously rejected bytes this range swallowed.
            let drop: Vec<bool> = (start..end)
                .map(|b| cands.rejected.contains(&(alloc, b)) && !group_constant(alloc, b))
                .collect();
            let before = locations.len();
            push_runs(&mut locations, alloc, start, &drop);
            let clipped_len = end - start;
            for loc in &mut locations[before..] {
                let whole = loc.offset == start && loc.size == clipped_len;
                if whole && matches!(loc.size, 1 | 2 | 4 | 8) {
                    loc.inferred_type = Some(loc.size as u8);
                }
            }
        }
    }

    // Candidate bytes not covered by any anchor survive untyped.
    let mut leftovers: BTreeMap<AllocId, Vec<u64>> = BTreeMap::new();
    for &(alloc, b) in candidate_bytes.difference(&anchored_bytes) {
        leftovers.entry(alloc).or_default().push(b);
    }
    for (alloc, bytes) in leftovers {
        let mut start = bytes[0];
        let mut prev = bytes[0];
        for &b in &bytes[1..] {
            if b != prev + 1 {
                locations.push(MemoryLocation {
                    alloc,
                    offset: start,
                    size: prev - start + 1,
                    inferred_type: None,
                });
                start = b;
            }
            prev = b;
        }
        locations.push(MemoryLocation {
            alloc,
            offset: start,
            size: prev - start + 1,
            inferred_type: None,
        });
    }

    locations.sort_by_key(|l| (l.alloc, l.offset));
    CandidateSet {
        locations,
        base_log: cands.base_log.clone(),
        rejected: cands.rejected.clone(),
    }
}

/// Concatenated value bytes of every location under one member's alignment;
/// this is the state valuation the learner keys on.
pub fn project(member: &GroupMember, locations: &[MemoryLocation]) -> Vec<u8> {
    let mut out = Vec::new();
    for loc in locations {
        for b in loc.bytes() {
            out.push(member.read_byte(loc.alloc, b));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Harness, QueryOptions};
    use crate::monitor::Monitor;
    use crate::protocols;
    use crate::vm::REG_COUNT;

    fn harness(name: &str) -> Harness {
        Harness::new(protocols::by_name(name).unwrap()).unwrap()
    }

    fn word(symbols: &[&str]) -> Vec<String> {
        symbols.iter().map(|s| (*s).into()).collect()
    }

    #[test]
    fn bootstrap_count_matches_the_formula() {
        // |b0| = 4 and |I| = 4 must give 17 queries, longest 4 + 3.
        let mut spec = protocols::by_name("partial-shutdown").unwrap();
        spec.happy_flow = word(&["hello", "ping", "data", "bye"]);
        let plan = gen_bootstrap(&spec, 3);
        assert_eq!(plan.queries.len(), 17);
        assert_eq!(plan.queries.iter().map(|q| q.len()).max(), Some(7));
        assert!(plan.repeats >= 2);
    }

    #[test]
    fn bootstrap_t1_appends_single_inputs() {
        let spec = protocols::by_name("counter-loop").unwrap();
        let plan = gen_bootstrap(&spec, 1);
        for q in &plan.queries[1..] {
            assert!(q.len() <= spec.happy_flow.len() + 1);
        }
        assert_eq!(plan.queries.len(), 1 + 2 * 2);
    }

    #[test]
    fn bootstrap_contains_the_repeated_init_mutation() {
        let spec = protocols::by_name("backdoor(12)").unwrap();
        let plan = gen_bootstrap(&spec, 3);
        let want = word(&["init", "init", "init", "init"]);
        assert!(plan.queries.contains(&want));
    }

    fn rec(position: u32, size: u64, context: u64, address: u64) -> AllocationRecord {
        AllocationRecord {
            position,
            kind: AllocKind::Alloc,
            size,
            context,
            address,
            timestamp: position as u64,
        }
    }

    #[test]
    fn identical_logs_align_as_identity() {
        let log = [rec(0, 16, 7, 0x1000), rec(1, 32, 9, 0x1010)];
        let map = align_allocations(&log, &log);
        assert_eq!(map.pairs().len(), 2);
        for (pair, r) in map.pairs().iter().zip(&log) {
            assert_eq!(pair.base, AllocId(r.position));
            assert_eq!(pair.run_position, r.position);
            assert_eq!(pair.address, r.address);
        }
    }

    #[test]
    fn missing_trailing_allocation_leaves_it_unmapped() {
        let base = [rec(0, 16, 7, 0x1000), rec(1, 32, 9, 0x1010)];
        let run = [rec(0, 16, 7, 0x2000)];
        let map = align_allocations(&run, &base);
        assert_eq!(map.pairs().len(), 1);
        assert!(map.lookup(AllocId(1)).is_none());
    }

    #[test]
    fn swapped_order_matches_by_context() {
        let base = [rec(0, 16, 7, 0x1000), rec(1, 16, 9, 0x1010)];
        let run = [rec(0, 16, 9, 0x2000), rec(1, 16, 7, 0x2010)];
        let map = align_allocations(&run, &base);
        let a = map.lookup(AllocId(0)).unwrap();
        let b = map.lookup(AllocId(1)).unwrap();
        assert_eq!(a.context, 7);
        assert_eq!(a.address, 0x2010);
        assert_eq!(b.context, 9);
        assert_eq!(b.address, 0x2000);
    }

    /// Run the bootstrap plan twice per query with alternating nonces and
    /// return (groups, base log) ready for diffing.
    fn bootstrap_groups(h: &Harness, t: usize) -> (Monitor, Vec<DiffGroup>, Vec<AllocationRecord>) {
        let mut mon = Monitor::new();
        let plan = gen_bootstrap(h.spec(), t);
        let mut runs = Vec::new();
        for q in &plan.queries {
            for rep in 0..plan.repeats {
                let opts = QueryOptions { nonce: rep as u8, ..QueryOptions::default() };
                runs.push(mon.run_monitored(h, q, &opts).unwrap());
            }
        }
        let base = pick_base_log(&runs, &plan.happy_flow).to_vec();
        let groups = build_groups(&runs, &base, mon.store());
        (mon, groups, base)
    }

    #[test]
    fn diffing_keeps_state_bytes_and_rejects_the_nonce() {
        let h = harness("backdoor(3)");
        let (_mon, groups, base) = bootstrap_groups(&h, 3);
        let cands = diff_snapshots(&groups, &base).unwrap();
        let state = AllocId(base[0].position);
        let in_m = |alloc, off| {
            cands
                .locations
                .iter()
                .any(|l| l.alloc == alloc && off >= l.offset && off < l.offset + l.size)
        };
        assert!(in_m(state, 0), "mode byte is state");
        assert!(in_m(state, 4), "count low byte is state");
        assert!(!in_m(state, 12), "never-written tail byte is not state");
        // Nonce lands one past the header in the receive buffer and varies
        // within groups, so it must be rejected, not kept.
        assert!(!cands.rejected.is_empty());
        let rejected_allocs: BTreeSet<AllocId> =
            cands.rejected.iter().map(|(a, _)| *a).collect();
        assert!(rejected_allocs.iter().any(|a| *a != state), "rejects hit a message buffer");
    }

    #[test]
    fn groups_of_one_are_refused() {
        let h = harness("counter-loop");
        let mut mon = Monitor::new();
        let run = mon
            .run_monitored(&h, &word(&["msg"]), &QueryOptions::default())
            .unwrap();
        let base = run.alloc_log.clone();
        let groups = build_groups(core::slice::from_ref(&run), &base, mon.store());
        let err = diff_snapshots(&groups, &base).unwrap_err();
        assert!(matches!(err, MemdiffError::InsufficientRuns { have: 1, .. }));
    }

    fn blank_ctx(heap: Vec<u8>, heap_base: u64) -> VmContext {
        VmContext {
            regs: [0; REG_COUNT],
            static_mem: Vec::new(),
            stack: Vec::new(),
            heap,
            seed: 0,
            heap_base,
            bump: heap_base,
            clock: 0,
            instruction_count: 0,
            read_shutdown: false,
            closed: false,
            halted: false,
            parked: true,
            allocations: Vec::new(),
            next_position: 0,
            pending_input: Vec::new(),
        }
    }

    fn synthetic_member(heap: Vec<u8>, base: &[AllocationRecord]) -> GroupMember {
        let heap_base = base[0].address;
        let map = align_allocations(base, base);
        GroupMember { snapshot: Arc::new(blank_ctx(heap, heap_base)), map }
    }

    #[test]
    fn pointer_valued_words_are_minimized_away() {
        let hb = 0x4000_0000u64;
        let base = [rec(0, 16, 7, hb)];
        let mut heap = alloc::vec![0u8; 16];
        heap[..8].copy_from_slice(&hb.to_le_bytes()); // self-referential pointer
        heap[8..16].copy_from_slice(&0x1234u64.to_le_bytes());
        let m = synthetic_member(heap, &base);
        let cands = CandidateSet {
            locations: alloc::vec![
                MemoryLocation { alloc: AllocId(0), offset: 0, size: 8, inferred_type: None },
                MemoryLocation { alloc: AllocId(0), offset: 8, size: 8, inferred_type: None },
            ],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        // Two members with one differing byte elsewhere keep the alloc from
        // counting as wholly constant.
        let mut heap2 = alloc::vec![0u8; 16];
        heap2[..8].copy_from_slice(&hb.to_le_bytes());
        heap2[8..16].copy_from_slice(&0x9876u64.to_le_bytes());
        let m2 = synthetic_member(heap2, &base);
        let out = minimize(&cands, &[m, m2], &[hb..hb + 4096]);
        assert_eq!(out.locations.len(), 1);
        assert_eq!(out.locations[0].offset, 8);
    }

    #[test]
    fn wholly_constant_allocations_are_minimized_away() {
        let hb = 0x4000_0000u64;
        let base = [rec(0, 64, 7, hb), rec(1, 16, 9, hb + 64)];
        let mut heap = alloc::vec![0xAAu8; 64];
        heap.extend_from_slice(&[1; 16]);
        let m1 = synthetic_member(heap.clone(), &base);
        let mut heap2 = heap.clone();
        heap2[64] = 2; // the small alloc varies, the big one never does
        let m2 = synthetic_member(heap2, &base);
        let cands = CandidateSet {
            locations: alloc::vec![
                MemoryLocation { alloc: AllocId(0), offset: 0, size: 16, inferred_type: None },
                MemoryLocation { alloc: AllocId(1), offset: 1, size: 4, inferred_type: None },
            ],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let out = minimize(&cands, &[m1, m2], &[]);
        assert_eq!(out.locations.len(), 1);
        assert_eq!(out.locations[0].alloc, AllocId(1));
    }

    #[test]
    fn long_constant_runs_split_their_location() {
        let hb = 0x4000_0000u64;
        let base = [rec(0, 64, 7, hb)];
        // Bytes 0 and 41 vary across members; 1..41 is a 40-byte constant
        // run that must fall out, splitting the location.
        let mut heap1 = alloc::vec![3u8; 64];
        let mut heap2 = alloc::vec![3u8; 64];
        heap1[0] = 1;
        heap2[0] = 2;
        heap1[41] = 5;
        heap2[41] = 6;
        let m1 = synthetic_member(heap1, &base);
        let m2 = synthetic_member(heap2, &base);
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(0),
                offset: 0,
                size: 42,
                inferred_type: None,
            }],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let out = minimize(&cands, &[m1, m2], &[]);
        let sizes: Vec<(u64, u64)> = out.locations.iter().map(|l| (l.offset, l.size)).collect();
        assert_eq!(sizes, [(0, 1), (41, 1)]);
    }

    #[test]
    fn short_constant_runs_survive_minimization() {
        let hb = 0x4000_0000u64;
        let base = [rec(0, 40, 7, hb)];
        let mut heap1 = alloc::vec![3u8; 40];
        let mut heap2 = alloc::vec![3u8; 40];
        heap1[0] = 1;
        heap2[0] = 2;
        let m1 = synthetic_member(heap1, &base);
        let m2 = synthetic_member(heap2, &base);
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(0),
                offset: 1,
                size: 32,
                inferred_type: None,
            }],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let out = minimize(&cands, &[m1, m2], &[]);
        assert_eq!(out.locations, cands.locations, "32 bytes is not larger than 32");
    }

    fn no_groups() -> Vec<DiffGroup> {
        Vec::new()
    }

    #[test]
    fn overlapped_accesses_clip_to_non_overlapping_types() {
        let base = [rec(0, 16, 7, 0x4000_0000)];
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(0),
                offset: 0,
                size: 6,
                inferred_type: None,
            }],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let accesses = [
            TypedAccess { alloc: AllocId(0), offset: 0, width: 4 },
            TypedAccess { alloc: AllocId(0), offset: 2, width: 4 },
        ];
        let out = infer_types(&accesses, &cands, &no_groups());
        let shapes: Vec<(u64, u64, Option<u8>)> =
            out.locations.iter().map(|l| (l.offset, l.size, l.inferred_type)).collect();
        assert_eq!(shapes, [(0, 2, Some(2)), (2, 4, Some(4))]);
    }

    #[test]
    fn narrow_access_types_a_single_byte() {
        let base = [rec(0, 16, 7, 0x4000_0000)];
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(0),
                offset: 3,
                size: 1,
                inferred_type: None,
            }],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let accesses = [TypedAccess { alloc: AllocId(0), offset: 3, width: 1 }];
        let out = infer_types(&accesses, &cands, &no_groups());
        assert_eq!(out.locations[0].inferred_type, Some(1));
        assert_eq!(out.locations[0].size, 1);
    }

    #[test]
    fn wide_access_widens_a_narrow_candidate() {
        // Counter low byte in M; its top three bytes were always zero. A
        // 4-byte load widens the location to the full word.
        let base = [rec(0, 16, 7, 0x4000_0000)];
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(0),
                offset: 4,
                size: 1,
                inferred_type: None,
            }],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let accesses = [TypedAccess { alloc: AllocId(0), offset: 4, width: 4 }];
        let out = infer_types(&accesses, &cands, &no_groups());
        assert_eq!(out.locations.len(), 1);
        let l = &out.locations[0];
        assert_eq!((l.offset, l.size, l.inferred_type), (4, 4, Some(4)));
    }

    #[test]
    fn widening_over_a_rejected_byte_splits_and_drops_the_type() {
        let hb = 0x4000_0000u64;
        let base = [rec(0, 16, 7, hb)];
        // Byte 6 varies within the single group: rejected then and still
        // inconstant now, so the widened range must shed it.
        let mut heap1 = alloc::vec![0u8; 16];
        let mut heap2 = alloc::vec![0u8; 16];
        heap1[4] = 1;
        heap2[4] = 1;
        heap1[6] = 9;
        heap2[6] = 7;
        let g = DiffGroup {
            key: GroupKey { inputs: Vec::new(), outputs: Vec::new() },
            members: alloc::vec![
                synthetic_member(heap1, &base),
                synthetic_member(heap2, &base)
            ],
        };
        let mut rejected = BTreeSet::new();
        rejected.insert((AllocId(0), 6));
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(0),
                offset: 4,
                size: 1,
                inferred_type: None,
            }],
            base_log: base.to_vec(),
            rejected,
        };
        let accesses = [TypedAccess { alloc: AllocId(0), offset: 4, width: 4 }];
        let out = infer_types(&accesses, &cands, &[g]);
        let shapes: Vec<(u64, u64, Option<u8>)> =
            out.locations.iter().map(|l| (l.offset, l.size, l.inferred_type)).collect();
        assert_eq!(shapes, [(4, 2, None), (7, 1, None)]);
    }

    #[test]
    fn uncovered_candidate_bytes_stay_untyped() {
        let base = [rec(0, 16, 7, 0x4000_0000)];
        let cands = CandidateSet {
            locations: alloc::vec![
                MemoryLocation { alloc: AllocId(0), offset: 0, size: 2, inferred_type: None },
                MemoryLocation { alloc: AllocId(0), offset: 8, size: 2, inferred_type: None },
            ],
            base_log: base.to_vec(),
            rejected: BTreeSet::new(),
        };
        let accesses = [TypedAccess { alloc: AllocId(0), offset: 0, width: 2 }];
        let out = infer_types(&accesses, &cands, &no_groups());
        let shapes: Vec<(u64, u64, Option<u8>)> =
            out.locations.iter().map(|l| (l.offset, l.size, l.inferred_type)).collect();
        assert_eq!(shapes, [(0, 2, Some(2)), (8, 2, None)]);
    }

    #[test]
    fn candidate_json_has_the_agreed_fields() {
        let cands = CandidateSet {
            locations: alloc::vec![MemoryLocation {
                alloc: AllocId(3),
                offset: 4,
                size: 2,
                inferred_type: Some(2),
            }],
            base_log: Vec::new(),
            rejected: BTreeSet::new(),
        };
        let v = cands.to_json();
        assert_eq!(v[0]["allocId"], 3);
        assert_eq!(v[0]["offset"], 4);
        assert_eq!(v[0]["size"], 2);
        assert_eq!(v[0]["type"], 2);
    }
}
