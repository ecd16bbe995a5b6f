//! Test harness: drives a VM session through an abstract input word.
//!
//! The harness owns the wire codec. Each abstract input becomes a frame of
//! header byte, payload template expansion and one trailing nonce byte; each
//! reply frame is decoded back to an abstract output symbol. A query always
//! runs in a fresh session, which is what "reset" means here. Faults and
//! connection teardown never surface as errors: they become the reserved
//! output symbols FAULT, CLOSED and EMPTY.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::model::{TerminalKind, OUTPUT_CLOSED, OUTPUT_EMPTY, OUTPUT_FAULT};
use crate::protocols::{
    PayloadCheck, PayloadTemplate, ProtocolSpec, OUTPUT_DECRYPT_ERROR,
};
use crate::vm::{
    EventKind, ExecutionEvent, Fault, ParseError, Program, RunOutcome, VmConfig, VmSession,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    /// Ordered input symbols; the order fixes exploration order everywhere.
    pub inputs: Vec<String>,
    /// Output symbols including the reserved ones.
    pub outputs: Vec<String>,
}

impl Alphabet {
    pub const RESERVED: [&'static str; 4] =
        [OUTPUT_EMPTY, OUTPUT_CLOSED, OUTPUT_FAULT, OUTPUT_DECRYPT_ERROR];

    pub fn for_spec(spec: &ProtocolSpec) -> Alphabet {
        let mut outputs: Vec<String> = spec.outputs.iter().map(|o| o.symbol.clone()).collect();
        for r in Self::RESERVED {
            if !outputs.iter().any(|o| o == r) {
                outputs.push(r.to_string());
            }
        }
        Alphabet { inputs: spec.input_symbols(), outputs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One concrete frame crossing the wire, on the session's monotonic clock.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoEntry {
    pub timestamp: u64,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryResult {
    pub query: Vec<String>,
    pub outputs: Vec<String>,
    pub io_log: Vec<IoEntry>,
}

/// Why a session stopped accepting input for good.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalEvent {
    Closed,
    ShutdownRead,
}

impl TerminalEvent {
    pub fn kind(self) -> TerminalKind {
        match self {
            TerminalEvent::Closed => TerminalKind::Closed,
            TerminalEvent::ShutdownRead => TerminalKind::ShutdownRead,
        }
    }

    /// The output every input after the terminal point observes.
    pub fn absorbed_output(self) -> &'static str {
        match self {
            TerminalEvent::Closed => OUTPUT_CLOSED,
            TerminalEvent::ShutdownRead => OUTPUT_EMPTY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HarnessError {
    BadProgram(ParseError),
    UnknownSymbol(String),
    EmptyQuery,
}

impl core::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HarnessError::BadProgram(e) => write!(f, "program does not assemble: {e}"),
            HarnessError::UnknownSymbol(s) => write!(f, "input symbol {s:?} not in alphabet"),
            HarnessError::EmptyQuery => write!(f, "query must contain at least one input"),
        }
    }
}

/// Hooks for observing a driven session. The monitor implements this; plain
/// queries run with [`NullObserver`]. `query_index` is the position of the
/// input being processed, or -1 during session setup.
pub trait RunObserver {
    fn event(&mut self, _session: &VmSession, _event: &ExecutionEvent, _query_index: i64) {}
    /// The session parked at a `recv` with the connection still fully open:
    /// the state after input `processed` (or the initial state for -1) is on
    /// display. Parks after close/shutdown/halt do not reach this hook.
    fn parked(&mut self, _session: &mut VmSession, _processed: i64) {}
    fn terminal(&mut self, _event: TerminalEvent, _query_index: usize) {}
    fn faulted(&mut self, _fault: &Fault, _query_index: i64) {}
}

pub struct NullObserver;

impl RunObserver for NullObserver {}

#[derive(Clone, Copy, Debug)]
pub struct QueryOptions {
    pub seed: u64,
    /// Trailing byte appended to every input frame of this run. Bootstrap
    /// repeats vary it; everything else uses 0.
    pub nonce: u8,
    pub vm: VmConfig,
}

impl Default for QueryOptions {
    fn default() -> Self {
        QueryOptions { seed: 0, nonce: 0, vm: VmConfig::default() }
    }
}

impl QueryOptions {
    pub fn seeded(seed: u64) -> QueryOptions {
        QueryOptions { seed, ..QueryOptions::default() }
    }
}

/// Per-session codec state: counter templates advance as frames are encoded.
pub(crate) struct CodecState {
    counters: alloc::collections::BTreeMap<String, u64>,
    nonce: u8,
}

impl CodecState {
    fn new(nonce: u8) -> CodecState {
        CodecState { counters: alloc::collections::BTreeMap::new(), nonce }
    }

    fn encode(&mut self, spec: &ProtocolSpec, symbol: &str) -> Result<Vec<u8>, HarnessError> {
        let coding = spec
            .input_coding(symbol)
            .ok_or_else(|| HarnessError::UnknownSymbol(symbol.to_string()))?;
        let mut frame = alloc::vec![coding.header];
        match &coding.payload {
            PayloadTemplate::Static(bytes) => frame.extend_from_slice(bytes),
            PayloadTemplate::CounterEcho => {
                let c = self.counters.entry(symbol.to_string()).or_insert(0);
                frame.extend_from_slice(&c.to_le_bytes());
                *c += 1;
            }
        }
        frame.push(self.nonce);
        Ok(frame)
    }
}

fn decode_frame(spec: &ProtocolSpec, frame: &[u8]) -> String {
    let raw = || {
        let mut s = String::from("RAW(");
        for b in frame {
            s.push_str(&format!("{b:02x}"));
        }
        s.push(')');
        s
    };
    let Some((&header, payload)) = frame.split_first() else {
        return raw();
    };
    for coding in &spec.outputs {
        if coding.header != header {
            continue;
        }
        return match &coding.check {
            PayloadCheck::Any => coding.symbol.clone(),
            PayloadCheck::Exact(bytes) => {
                if payload == &bytes[..] {
                    coding.symbol.clone()
                } else {
                    raw()
                }
            }
            PayloadCheck::Encrypted { key, plaintext } => {
                let matches = payload.len() == plaintext.len()
                    && payload.iter().zip(plaintext).all(|(b, p)| b ^ key == *p);
                if matches {
                    coding.symbol.clone()
                } else {
                    OUTPUT_DECRYPT_ERROR.to_string()
                }
            }
        };
    }
    raw()
}

/// A protocol spec with its program assembled once, ready to drive sessions.
pub struct Harness {
    spec: ProtocolSpec,
    program: Arc<Program>,
    alphabet: Alphabet,
}

impl Harness {
    pub fn new(spec: ProtocolSpec) -> Result<Harness, HarnessError> {
        let program = Arc::new(spec.program().map_err(HarnessError::BadProgram)?);
        let alphabet = Alphabet::for_spec(&spec);
        Ok(Harness { spec, program, alphabet })
    }

    pub fn spec(&self) -> &ProtocolSpec {
        &self.spec
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn execute_query(
        &self,
        query: &[String],
        opts: &QueryOptions,
    ) -> Result<QueryResult, HarnessError> {
        self.execute_observed(query, opts, &mut NullObserver)
    }

    pub fn execute_observed(
        &self,
        query: &[String],
        opts: &QueryOptions,
        observer: &mut dyn RunObserver,
    ) -> Result<QueryResult, HarnessError> {
        if query.is_empty() {
            return Err(HarnessError::EmptyQuery);
        }
        let mut driver = SessionDriver::new(self, opts);
        driver.pump_setup(observer);
        let mut outputs = Vec::with_capacity(query.len());
        for (k, symbol) in query.iter().enumerate() {
            outputs.push(driver.feed(k, symbol, observer)?);
        }
        Ok(QueryResult { query: query.to_vec(), outputs, io_log: driver.io_log })
    }
}

/// Stepwise control over one driven session; `execute_observed` is the plain
/// front end, the monitor's watchpoint replays take the wheel directly.
pub(crate) struct SessionDriver<'h> {
    harness: &'h Harness,
    pub(crate) session: VmSession,
    codec: CodecState,
    pub(crate) io_log: Vec<IoEntry>,
    pub(crate) terminal: Option<(TerminalEvent, usize)>,
    pub(crate) fault: Option<Fault>,
}

impl<'h> SessionDriver<'h> {
    pub(crate) fn new(harness: &'h Harness, opts: &QueryOptions) -> SessionDriver<'h> {
        SessionDriver {
            harness,
            session: VmSession::new(harness.program.clone(), opts.seed, opts.vm),
            codec: CodecState::new(opts.nonce),
            io_log: Vec::new(),
            terminal: None,
            fault: None,
        }
    }

    /// Run the program up to its first read; allocation events during setup
    /// carry query index -1.
    pub(crate) fn pump_setup(&mut self, observer: &mut dyn RunObserver) {
        self.pump(-1, observer);
    }

    pub(crate) fn encode(&mut self, symbol: &str) -> Result<Vec<u8>, HarnessError> {
        self.codec.encode(&self.harness.spec, symbol)
    }

    /// Feed one input symbol and pump until the session parks again; returns
    /// the abstract output observed for this symbol.
    pub(crate) fn feed(
        &mut self,
        k: usize,
        symbol: &str,
        observer: &mut dyn RunObserver,
    ) -> Result<String, HarnessError> {
        if self.fault.is_some() {
            return Ok(OUTPUT_FAULT.to_string());
        }
        if let Some((t, _)) = self.terminal {
            return Ok(t.absorbed_output().to_string());
        }
        let frame = self.encode(symbol)?;
        let ts = self.session.next_tick();
        self.io_log.push(IoEntry { timestamp: ts, direction: Direction::Sent, bytes: frame.clone() });
        self.session.push_input(frame);
        let replies = self.pump(k as i64, observer);
        Ok(self.abstract_output(k, &replies))
    }

    fn abstract_output(&self, k: usize, replies: &[Vec<u8>]) -> String {
        if self.fault.is_some() {
            return OUTPUT_FAULT.to_string();
        }
        match replies {
            [] => match self.terminal {
                Some((t, at)) if at == k => match t {
                    TerminalEvent::Closed => OUTPUT_CLOSED.to_string(),
                    TerminalEvent::ShutdownRead => OUTPUT_EMPTY.to_string(),
                },
                _ => OUTPUT_EMPTY.to_string(),
            },
            frames => {
                let decoded: Vec<String> =
                    frames.iter().map(|f| decode_frame(&self.harness.spec, f)).collect();
                decoded.join("+")
            }
        }
    }

    /// Advance until the session parks at a read, halts or faults; forwards
    /// events to the observer and returns reply payloads seen on the way.
    fn pump(&mut self, k: i64, observer: &mut dyn RunObserver) -> Vec<Vec<u8>> {
        let mut replies = Vec::new();
        loop {
            match self.session.run_until_trap() {
                Ok(RunOutcome::Event(event)) => {
                    match &event.kind {
                        EventKind::WriteAboutToExecute { payload, .. } => {
                            self.io_log.push(IoEntry {
                                timestamp: event.timestamp,
                                direction: Direction::Received,
                                bytes: payload.clone(),
                            });
                            replies.push(payload.clone());
                        }
                        EventKind::Closed => self.note_terminal(TerminalEvent::Closed, k, observer),
                        EventKind::ShutdownRead => {
                            self.note_terminal(TerminalEvent::ShutdownRead, k, observer)
                        }
                        _ => {}
                    }
                    observer.event(&self.session, &event, k);
                }
                Ok(RunOutcome::AwaitingInput) => {
                    if self.terminal.is_none() {
                        observer.parked(&mut self.session, k);
                    }
                    return replies;
                }
                Ok(RunOutcome::Halted) => {
                    // A worker that exits without closing tears the transport
                    // down with it; observers see that as a close.
                    self.note_terminal(TerminalEvent::Closed, k, observer);
                    return replies;
                }
                Err(fault) => {
                    self.fault = Some(fault);
                    observer.faulted(&fault, k);
                    return replies;
                }
            }
        }
    }

    fn note_terminal(&mut self, event: TerminalEvent, k: i64, observer: &mut dyn RunObserver) {
        if self.terminal.is_none() {
            let at = k.max(0) as usize;
            self.terminal = Some((event, at));
            observer.terminal(event, at);
        }
    }
}

/// Convenience wrapper: build a throwaway harness and run one query.
pub fn execute_query(
    spec: &ProtocolSpec,
    query: &[String],
    opts: &QueryOptions,
) -> Result<QueryResult, HarnessError> {
    Harness::new(spec.clone())?.execute_query(query, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols;

    fn word(symbols: &[&str]) -> Vec<String> {
        symbols.iter().map(|s| s.to_string()).collect()
    }

    fn run(spec: &ProtocolSpec, symbols: &[&str]) -> Vec<String> {
        execute_query(spec, &word(symbols), &QueryOptions::default())
            .unwrap()
            .outputs
    }

    #[test]
    fn backdoor_auth_acks() {
        let spec = protocols::by_name("backdoor(12)").unwrap();
        assert_eq!(run(&spec, &["auth"]), ["AUTH_OK"]);
        assert_eq!(run(&spec, &["auth", "data"]), ["AUTH_OK", "DATA_ACK"]);
        assert_eq!(run(&spec, &["data"]), ["DATA_ERR"]);
    }

    #[test]
    fn early_activation_yields_decrypt_error() {
        let spec = protocols::by_name("early-keys").unwrap();
        assert_eq!(run(&spec, &["activate", "finish"]), ["EMPTY", "DECRYPT_ERROR"]);
        assert_eq!(
            run(&spec, &["keyx", "activate", "finish"]),
            ["KEYX_OK", "EMPTY", "FIN_OK"]
        );
    }

    #[test]
    fn closure_absorbs_the_rest_of_the_query() {
        let spec = protocols::by_name("partial-shutdown").unwrap();
        assert_eq!(
            run(&spec, &["bye", "ping", "hello"]),
            ["BYE_ACK", "CLOSED", "CLOSED"]
        );
    }

    #[test]
    fn read_shutdown_swallows_input_silently() {
        let spec = protocols::by_name("partial-shutdown").unwrap();
        assert_eq!(
            run(&spec, &["ping", "hello", "data"]),
            ["ALERT", "EMPTY", "EMPTY"]
        );
    }

    #[test]
    fn replay_codec_stays_in_lockstep_and_detects_desync() {
        let spec = protocols::by_name("replay-counter").unwrap();
        assert_eq!(run(&spec, &["msg", "msg", "msg"]), ["ACK", "ACK", "ACK"]);
    }

    #[test]
    fn halt_without_close_reads_as_closed() {
        let spec = protocols::by_name("handshake-bypass(5)").unwrap();
        assert_eq!(
            run(&spec, &["hello", "verify_ok", "finish", "hello"]),
            ["HELLO_ACK", "VERIFY_OK", "DONE", "CLOSED"]
        );
    }

    #[test]
    fn outputs_are_seed_independent() {
        let spec = protocols::by_name("backdoor(3)").unwrap();
        let q = word(&["init", "init", "init", "data"]);
        let a = execute_query(&spec, &q, &QueryOptions::seeded(1)).unwrap();
        let b = execute_query(&spec, &q, &QueryOptions::seeded(0xfeed_beef)).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn nonce_byte_does_not_change_outputs() {
        let spec = protocols::by_name("counter-loop").unwrap();
        let q = word(&["msg", "probe", "msg"]);
        let mut opts = QueryOptions::default();
        let base = execute_query(&spec, &q, &opts).unwrap();
        opts.nonce = 0x7f;
        let varied = execute_query(&spec, &q, &opts).unwrap();
        assert_eq!(base.outputs, varied.outputs);
        // The wire frames do differ, which is the whole point of the nonce.
        assert_ne!(base.io_log[0].bytes, varied.io_log[0].bytes);
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let spec = protocols::by_name("counter-loop").unwrap();
        let err = execute_query(&spec, &word(&["nope"]), &QueryOptions::default()).unwrap_err();
        assert_eq!(err, HarnessError::UnknownSymbol("nope".to_string()));
    }

    #[test]
    fn empty_query_is_rejected() {
        let spec = protocols::by_name("counter-loop").unwrap();
        let err = execute_query(&spec, &[], &QueryOptions::default()).unwrap_err();
        assert_eq!(err, HarnessError::EmptyQuery);
    }

    #[test]
    fn io_log_is_chronological_and_alternates_sensibly() {
        let spec = protocols::by_name("backdoor(3)").unwrap();
        let r = execute_query(&spec, &word(&["auth", "data"]), &QueryOptions::default()).unwrap();
        let stamps: Vec<u64> = r.io_log.iter().map(|e| e.timestamp).collect();
        let mut sorted = stamps.clone();
        sorted.sort_unstable();
        assert_eq!(stamps, sorted);
        assert_eq!(r.io_log.len(), 4); // two frames out, two replies back
        assert_eq!(r.io_log[0].direction, Direction::Sent);
        assert_eq!(r.io_log[1].direction, Direction::Received);
    }

    #[test]
    fn alphabet_carries_reserved_symbols() {
        for spec in protocols::corpus() {
            let a = Alphabet::for_spec(&spec);
            for r in Alphabet::RESERVED {
                assert!(a.outputs.iter().any(|o| o == r), "{} missing {r}", spec.name);
            }
        }
    }
}
