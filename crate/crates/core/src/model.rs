//! Mealy machine models and behavioral comparison.
//!
//! Learned machines are deterministic and possibly partial. Terminal states
//! carry an implicit self-loop for every input: a closed connection answers
//! `CLOSED`, a read-shutdown connection swallows input silently and answers
//! `EMPTY`. Comparison is a product-graph BFS, so a returned counterexample
//! is always one of minimum length.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Reserved output for a query step that produced no response message.
pub const OUTPUT_EMPTY: &str = "EMPTY";
/// Reserved output observed once the peer has closed the connection.
pub const OUTPUT_CLOSED: &str = "CLOSED";
/// Reserved output for a target that crashed during the step.
pub const OUTPUT_FAULT: &str = "FAULT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(usize);

impl StateId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl core::fmt::Display for StateId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    #[default]
    None,
    Closed,
    ShutdownRead,
}

impl TerminalKind {
    /// Output of the implicit self-loop in a terminal state, if any.
    pub fn loop_output(self) -> Option<&'static str> {
        match self {
            TerminalKind::None => None,
            TerminalKind::Closed => Some(OUTPUT_CLOSED),
            TerminalKind::ShutdownRead => Some(OUTPUT_EMPTY),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelError {
    NoStates,
    UnknownState(usize),
    /// A `(state, input)` pair was given two different successors.
    Conflict { from: StateId, input: String },
    Json(String),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::NoStates => write!(f, "model has no states"),
            ModelError::UnknownState(i) => write!(f, "state {i} does not exist"),
            ModelError::Conflict { from, input } => {
                write!(f, "conflicting transition from {from} on {input:?}")
            }
            ModelError::Json(e) => write!(f, "malformed model document: {e}"),
        }
    }
}

/// Minimum-length distinguishing word between two machines, with the output
/// sequences both produce on it (`None` where a machine is undefined).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counterexample {
    pub word: Vec<String>,
    pub left: Vec<Option<String>>,
    pub right: Vec<Option<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    terminals: Vec<TerminalKind>,
    initial: StateId,
    transitions: BTreeMap<(StateId, String), (String, StateId)>,
}

#[derive(Serialize, Deserialize)]
struct StateDoc {
    id: usize,
    terminal: TerminalKind,
}

#[derive(Serialize, Deserialize)]
struct TransitionDoc {
    from: usize,
    input: String,
    output: String,
    to: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    states: Vec<StateDoc>,
    initial: usize,
    transitions: Vec<TransitionDoc>,
}

impl Model {
    pub fn new() -> Model {
        Model {
            terminals: Vec::new(),
            initial: StateId(0),
            transitions: BTreeMap::new(),
        }
    }

    pub fn add_state(&mut self, terminal: TerminalKind) -> StateId {
        self.terminals.push(terminal);
        StateId(self.terminals.len() - 1)
    }

    pub fn set_initial(&mut self, state: StateId) {
        self.initial = state;
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn state_count(&self) -> usize {
        self.terminals.len()
    }

    pub fn terminal(&self, state: StateId) -> TerminalKind {
        self.terminals[state.0]
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.terminals.len()).map(StateId)
    }

    pub fn transitions(
        &self,
    ) -> impl Iterator<Item = (StateId, &str, &str, StateId)> + '_ {
        self.transitions
            .iter()
            .map(|((from, input), (output, to))| (*from, input.as_str(), output.as_str(), *to))
    }

    pub fn add_transition(
        &mut self,
        from: StateId,
        input: &str,
        output: &str,
        to: StateId,
    ) -> Result<(), ModelError> {
        for s in [from, to] {
            if s.0 >= self.terminals.len() {
                return Err(ModelError::UnknownState(s.0));
            }
        }
        let key = (from, input.to_owned());
        let value = (output.to_owned(), to);
        match self.transitions.get(&key) {
            Some(existing) if *existing != value => {
                Err(ModelError::Conflict { from, input: input.to_owned() })
            }
            _ => {
                self.transitions.insert(key, value);
                Ok(())
            }
        }
    }

    /// Every input that appears on some transition, in sorted order.
    pub fn input_alphabet(&self) -> BTreeSet<&str> {
        self.transitions.keys().map(|(_, i)| i.as_str()).collect()
    }

    /// One transition step; implicit terminal self-loops apply. `None` means
    /// the machine is undefined for this input here.
    pub fn step(&self, state: StateId, input: &str) -> Option<(&str, StateId)> {
        if let Some((output, to)) = self.transitions.get(&(state, input.to_owned())) {
            return Some((output.as_str(), *to));
        }
        self.terminals[state.0].loop_output().map(|o| (o, state))
    }

    /// Outputs produced on `word` from the initial state; `None` marks steps
    /// past the point where the machine became undefined.
    pub fn run<'a>(&self, word: impl IntoIterator<Item = &'a str>) -> Vec<Option<String>> {
        let mut state = Some(self.initial);
        word.into_iter()
            .map(|input| {
                let (out, next) = match state.and_then(|s| self.step(s, input)) {
                    Some((o, n)) => (Some(o.to_string()), Some(n)),
                    None => (None, None),
                };
                state = next;
                out
            })
            .collect()
    }

    /// Behavioral equivalence via BFS over the product graph. Returns a
    /// shortest distinguishing word, or `None` if the machines agree on every
    /// input word over the union of their alphabets.
    pub fn compare(&self, other: &Model) -> Option<Counterexample> {
        if self.terminals.is_empty() || other.terminals.is_empty() {
            // An empty machine is distinguished by the empty observation.
            if self.terminals.is_empty() != other.terminals.is_empty() {
                return Some(self.counterexample(other, Vec::new()));
            }
            return None;
        }
        let alphabet: BTreeSet<&str> = self
            .input_alphabet()
            .into_iter()
            .chain(other.input_alphabet())
            .collect();
        let start = (self.initial, other.initial);
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([(start, Vec::new())]);
        while let Some(((a, b), word)) = queue.pop_front() {
            for &input in &alphabet {
                let mut extended = word.clone();
                extended.push(input.to_owned());
                match (self.step(a, input), other.step(b, input)) {
                    (Some((oa, na)), Some((ob, nb))) => {
                        if oa != ob {
                            return Some(self.counterexample(other, extended));
                        }
                        if seen.insert((na, nb)) {
                            queue.push_back(((na, nb), extended));
                        }
                    }
                    (None, None) => {}
                    _ => return Some(self.counterexample(other, extended)),
                }
            }
        }
        None
    }

    fn counterexample(&self, other: &Model, word: Vec<String>) -> Counterexample {
        let as_strs = |m: &Model| m.run(word.iter().map(String::as_str));
        Counterexample { left: as_strs(self), right: as_strs(other), word }
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            states: self
                .terminals
                .iter()
                .enumerate()
                .map(|(id, &terminal)| StateDoc { id, terminal })
                .collect(),
            initial: self.initial.0,
            transitions: self
                .transitions
                .iter()
                .map(|((from, input), (output, to))| TransitionDoc {
                    from: from.0,
                    input: input.clone(),
                    output: output.clone(),
                    to: to.0,
                })
                .collect(),
        };
        // BTreeMap iteration makes the transition order canonical, so equal
        // models serialize to identical bytes.
        serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Model, ModelError> {
        let doc: ModelDoc =
            serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        if doc.states.is_empty() {
            return Err(ModelError::NoStates);
        }
        let max_id = doc.states.iter().map(|s| s.id).max().unwrap();
        if max_id + 1 != doc.states.len() {
            return Err(ModelError::UnknownState(max_id));
        }
        let mut model = Model::new();
        let mut terminals = alloc::vec![TerminalKind::None; doc.states.len()];
        for s in &doc.states {
            terminals[s.id] = s.terminal;
        }
        model.terminals = terminals;
        if doc.initial >= doc.states.len() {
            return Err(ModelError::UnknownState(doc.initial));
        }
        model.initial = StateId(doc.initial);
        for t in &doc.transitions {
            model.add_transition(StateId(t.from), &t.input, &t.output, StateId(t.to))?;
        }
        Ok(model)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph model {\n  rankdir=LR;\n  __start [shape=point];\n");
        for (id, terminal) in self.terminals.iter().enumerate() {
            let style = match terminal {
                TerminalKind::None => "shape=circle",
                TerminalKind::Closed => "shape=doublecircle",
                TerminalKind::ShutdownRead => "shape=doublecircle, style=dashed",
            };
            out += &format!("  s{id} [{style}];\n");
        }
        out += &format!("  __start -> s{};\n", self.initial.0);
        for ((from, input), (output, to)) in &self.transitions {
            out += &format!(
                "  s{} -> s{} [label=\"{} / {}\"];\n",
                from.0, to.0, input, output
            );
        }
        out += "}\n";
        out
    }
}

impl Default for Model {
    fn default() -> Model {
        Model::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn chain(outputs: &[(&str, &str)], terminal: TerminalKind) -> Model {
        let mut m = Model::new();
        let mut prev = m.add_state(TerminalKind::None);
        m.set_initial(prev);
        let last = outputs.len() - 1;
        for (i, (input, output)) in outputs.iter().enumerate() {
            let kind = if i == last { terminal } else { TerminalKind::None };
            let next = m.add_state(kind);
            m.add_transition(prev, input, output, next).unwrap();
            prev = next;
        }
        m
    }

    #[test]
    fn closed_terminal_answers_closed_on_everything() {
        let m = chain(&[("bye", "OK")], TerminalKind::Closed);
        let outs = m.run(vec!["bye", "bye", "other"]);
        assert_eq!(
            outs,
            vec![
                Some("OK".to_string()),
                Some(OUTPUT_CLOSED.to_string()),
                Some(OUTPUT_CLOSED.to_string())
            ]
        );
    }

    #[test]
    fn shutdown_terminal_swallows_input_silently() {
        let m = chain(&[("bye", "OK")], TerminalKind::ShutdownRead);
        assert_eq!(m.run(vec!["bye", "x"])[1], Some(OUTPUT_EMPTY.to_string()));
    }

    #[test]
    fn identical_machines_compare_equal() {
        let m = chain(&[("a", "1"), ("b", "2")], TerminalKind::Closed);
        assert_eq!(m.compare(&m.clone()), None);
    }

    #[test]
    fn counterexample_is_shortest() {
        // The machines agree on depth-1 behavior and split at depth 2.
        let a = chain(&[("a", "1"), ("a", "2")], TerminalKind::None);
        let b = chain(&[("a", "1"), ("a", "3")], TerminalKind::None);
        let cex = a.compare(&b).unwrap();
        assert_eq!(cex.word, vec!["a".to_string(), "a".to_string()]);
        assert_eq!(cex.left[1], Some("2".to_string()));
        assert_eq!(cex.right[1], Some("3".to_string()));
    }

    #[test]
    fn definedness_mismatch_is_a_counterexample() {
        let a = chain(&[("a", "1")], TerminalKind::Closed);
        let b = chain(&[("a", "1")], TerminalKind::None);
        // `a` keeps answering CLOSED in its terminal state; `b` is undefined.
        let cex = a.compare(&b).unwrap();
        assert_eq!(cex.word.len(), 2);
        assert_eq!(cex.right[1], None);
    }

    #[test]
    fn conflicting_transition_is_rejected() {
        let mut m = Model::new();
        let s = m.add_state(TerminalKind::None);
        m.add_transition(s, "a", "1", s).unwrap();
        m.add_transition(s, "a", "1", s).unwrap();
        let err = m.add_transition(s, "a", "2", s).unwrap_err();
        assert!(matches!(err, ModelError::Conflict { .. }));
    }

    #[test]
    fn json_roundtrip_is_lossless_and_canonical() {
        let m = chain(&[("x", "A"), ("y", "B")], TerminalKind::ShutdownRead);
        let text = m.to_json();
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text, "serialization must be canonical");
    }

    #[test]
    fn dot_export_names_every_state_and_edge() {
        let m = chain(&[("go", "OK")], TerminalKind::Closed);
        let dot = m.to_dot();
        assert!(dot.contains("s0 -> s1 [label=\"go / OK\"]"));
        assert!(dot.contains("s1 [shape=doublecircle]"));
        assert!(dot.contains("__start -> s0"));
    }

    #[test]
    fn compare_ranges_over_union_of_alphabets() {
        // `b` has an extra input; `a` is undefined on it, which must surface.
        let a = chain(&[("a", "1")], TerminalKind::None);
        let mut b = chain(&[("a", "1")], TerminalKind::None);
        let s0 = b.initial();
        b.add_transition(s0, "z", "9", s0).unwrap();
        let cex = a.compare(&b).unwrap();
        assert_eq!(cex.word, vec!["z".to_string()]);
    }
}
