//! Bundled corpus of toy protocol services.
//!
//! Each entry pairs an assembly program for the toy VM with a hand-written
//! reference Mealy machine that serves as the ground-truth oracle in tests.
//! Wire formats are deliberately trivial: one header byte selects the message
//! type, a few payload bytes carry data, and the driver appends a nonce byte
//! that no program ever reads.

pub mod backdoor;
pub mod counter_loop;
pub mod early_keys;
pub mod handshake_bypass;
pub mod partial_shutdown;
pub mod replay_counter;

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::vm::{load_program, ParseError, Program};

/// Reserved output symbol for a reply that fails payload authentication.
pub const OUTPUT_DECRYPT_ERROR: &str = "DECRYPT_ERROR";

/// How the concrete payload bytes of an input frame are produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadTemplate {
    /// Fixed bytes after the header.
    Static(Vec<u8>),
    /// An 8-byte little-endian sequence number tracked per session by the
    /// codec, incremented after each use.
    CounterEcho,
}

/// How the payload of a reply frame is validated during decoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadCheck {
    /// Payload ignored.
    Any,
    /// Payload must equal these bytes exactly.
    Exact(Vec<u8>),
    /// Payload xored with `key` must equal `plaintext`; a mismatch decodes
    /// to the reserved DECRYPT_ERROR symbol instead of this entry's symbol.
    Encrypted { key: u8, plaintext: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputCoding {
    pub symbol: String,
    pub header: u8,
    pub payload: PayloadTemplate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputCoding {
    pub symbol: String,
    pub header: u8,
    pub check: PayloadCheck,
}

/// Ground truth for a corpus entry; protocols whose true machine has
/// unboundedly many states carry the `Infinite` marker instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReferenceMachine {
    Finite(Model),
    Infinite,
}

impl ReferenceMachine {
    pub fn finite(&self) -> Option<&Model> {
        match self {
            ReferenceMachine::Finite(m) => Some(m),
            ReferenceMachine::Infinite => None,
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            ReferenceMachine::Finite(m) => m.to_json(),
            ReferenceMachine::Infinite => "{\n  \"infinite\": true\n}".to_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolSpec {
    /// Display name including parameters, e.g. `backdoor(12)`.
    pub name: String,
    /// Parameterless family name used for lookup.
    pub family: String,
    pub params: BTreeMap<String, u64>,
    pub program_source: String,
    pub inputs: Vec<InputCoding>,
    pub outputs: Vec<OutputCoding>,
    pub happy_flow: Vec<String>,
    pub reference: ReferenceMachine,
}

impl ProtocolSpec {
    pub fn input_symbols(&self) -> Vec<String> {
        self.inputs.iter().map(|i| i.symbol.clone()).collect()
    }

    pub fn program(&self) -> Result<Program, ParseError> {
        load_program(&self.program_source)
    }

    pub fn input_coding(&self, symbol: &str) -> Option<&InputCoding> {
        self.inputs.iter().find(|i| i.symbol == symbol)
    }

    /// Serialize the alphabet and codec declarations (everything the harness
    /// needs) together with the program and reference machine.
    pub fn to_json(&self) -> String {
        let doc = SpecDoc {
            name: self.name.clone(),
            family: self.family.clone(),
            params: self.params.clone(),
            program_source: self.program_source.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            happy_flow: self.happy_flow.clone(),
            reference: serde_json::from_str(&self.reference.to_json())
                .expect("reference serialization is valid JSON"),
        };
        serde_json::to_string_pretty(&doc).expect("spec serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<ProtocolSpec, ProtocolError> {
        let doc: SpecDoc =
            serde_json::from_str(text).map_err(|e| ProtocolError::BadSpec(e.to_string()))?;
        let reference_text = serde_json::to_string_pretty(&doc.reference)
            .map_err(|e| ProtocolError::BadSpec(e.to_string()))?;
        let reference = if doc.reference.get("infinite").is_some() {
            ReferenceMachine::Infinite
        } else {
            ReferenceMachine::Finite(
                Model::from_json(&reference_text)
                    .map_err(|e| ProtocolError::BadSpec(e.to_string()))?,
            )
        };
        Ok(ProtocolSpec {
            name: doc.name,
            family: doc.family,
            params: doc.params,
            program_source: doc.program_source,
            inputs: doc.inputs,
            outputs: doc.outputs,
            happy_flow: doc.happy_flow,
            reference,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    name: String,
    family: String,
    params: BTreeMap<String, u64>,
    program_source: String,
    inputs: Vec<InputCoding>,
    outputs: Vec<OutputCoding>,
    happy_flow: Vec<String>,
    reference: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolError {
    UnknownProtocol(String),
    UnknownParam { family: String, param: String },
    BadName(String),
    BadSpec(String),
}

impl core::fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ProtocolError::UnknownProtocol(n) => write!(f, "unknown protocol {n:?}"),
            ProtocolError::UnknownParam { family, param } => {
                write!(f, "protocol {family:?} has no parameter {param:?}")
            }
            ProtocolError::BadName(n) => write!(f, "malformed protocol name {n:?}"),
            ProtocolError::BadSpec(e) => write!(f, "malformed protocol spec: {e}"),
        }
    }
}

/// The six bundled protocols at their default parameters.
pub fn corpus() -> Vec<ProtocolSpec> {
    alloc::vec![
        backdoor::spec(backdoor::DEFAULT_N),
        counter_loop::spec(),
        replay_counter::spec(),
        partial_shutdown::spec(),
        handshake_bypass::spec(handshake_bypass::DEFAULT_N),
        early_keys::spec(),
    ]
}

/// Build a spec by family name with explicit parameter overrides.
pub fn spec_for(
    family: &str,
    params: &BTreeMap<String, u64>,
) -> Result<ProtocolSpec, ProtocolError> {
    let reject_params = |allowed: &[&str]| -> Result<(), ProtocolError> {
        for key in params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ProtocolError::UnknownParam {
                    family: family.to_owned(),
                    param: key.clone(),
                });
            }
        }
        Ok(())
    };
    match family {
        "backdoor" => {
            reject_params(&["N"])?;
            Ok(backdoor::spec(*params.get("N").unwrap_or(&backdoor::DEFAULT_N)))
        }
        "counter-loop" => {
            reject_params(&[])?;
            Ok(counter_loop::spec())
        }
        "replay-counter" => {
            reject_params(&[])?;
            Ok(replay_counter::spec())
        }
        "partial-shutdown" => {
            reject_params(&[])?;
            Ok(partial_shutdown::spec())
        }
        "handshake-bypass" => {
            reject_params(&["n"])?;
            Ok(handshake_bypass::spec(
                *params.get("n").unwrap_or(&handshake_bypass::DEFAULT_N),
            ))
        }
        "early-keys" => {
            reject_params(&[])?;
            Ok(early_keys::spec())
        }
        other => Err(ProtocolError::UnknownProtocol(other.to_owned())),
    }
}

/// Parse `family` or `family(value)` names; a single numeric argument binds
/// to the family's only parameter.
pub fn by_name(name: &str) -> Result<ProtocolSpec, ProtocolError> {
    let name = name.trim();
    let (family, params) = match name.split_once('(') {
        None => (name, BTreeMap::new()),
        Some((family, rest)) => {
            let arg = rest
                .strip_suffix(')')
                .ok_or_else(|| ProtocolError::BadName(name.to_owned()))?;
            let value: u64 = arg
                .trim()
                .parse()
                .map_err(|_| ProtocolError::BadName(name.to_owned()))?;
            let key = match family {
                "backdoor" => "N",
                "handshake-bypass" => "n",
                other => return Err(ProtocolError::UnknownProtocol(other.to_owned())),
            };
            (family, BTreeMap::from([(key.to_owned(), value)]))
        }
    };
    spec_for(family, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TerminalKind;

    #[test]
    fn corpus_has_exactly_six_entries() {
        let specs = corpus();
        assert_eq!(specs.len(), 6);
        let names: Vec<_> = specs.iter().map(|s| s.family.as_str()).collect();
        assert_eq!(
            names,
            [
                "backdoor",
                "counter-loop",
                "replay-counter",
                "partial-shutdown",
                "handshake-bypass",
                "early-keys"
            ]
        );
    }

    #[test]
    fn every_program_assembles() {
        for spec in corpus() {
            spec.program()
                .unwrap_or_else(|e| panic!("{}: {e}", spec.name));
        }
    }

    #[test]
    fn finite_references_are_complete_and_accept_the_happy_flow() {
        for spec in corpus() {
            let Some(model) = spec.reference.finite() else {
                continue;
            };
            for state in model.states() {
                if model.terminal(state) != TerminalKind::None {
                    continue;
                }
                for input in spec.input_symbols() {
                    assert!(
                        model.step(state, &input).is_some(),
                        "{}: state {state} lacks input {input}",
                        spec.name
                    );
                }
            }
            let outputs = model.run(spec.happy_flow.iter().map(String::as_str));
            let mut state = model.initial();
            for (input, output) in spec.happy_flow.iter().zip(&outputs) {
                let output = output.as_deref().expect("happy flow fully defined");
                assert!(
                    !matches!(output, "CLOSED" | "FAULT" | "ALERT"),
                    "{}: happy flow hits error output {output}",
                    spec.name
                );
                state = model.step(state, input).unwrap().1;
            }
            assert_eq!(
                model.terminal(model.initial()),
                TerminalKind::None,
                "{}: initial state must accept input",
                spec.name
            );
        }
    }

    #[test]
    fn name_parsing_handles_parameters_and_rejects_garbage() {
        assert_eq!(by_name("backdoor(3)").unwrap().params["N"], 3);
        assert_eq!(by_name("handshake-bypass(10)").unwrap().params["n"], 10);
        assert_eq!(by_name("counter-loop").unwrap().name, "counter-loop");
        assert!(matches!(
            by_name("backdoor(").unwrap_err(),
            ProtocolError::BadName(_)
        ));
        assert!(matches!(
            by_name("counter-loop(2)").unwrap_err(),
            ProtocolError::UnknownProtocol(_)
        ));
        assert!(matches!(
            by_name("no-such-thing").unwrap_err(),
            ProtocolError::UnknownProtocol(_)
        ));
        let bad = spec_for("backdoor", &BTreeMap::from([("depth".into(), 1)]));
        assert!(matches!(bad.unwrap_err(), ProtocolError::UnknownParam { .. }));
    }

    #[test]
    fn spec_json_round_trips() {
        for spec in corpus() {
            let text = spec.to_json();
            let back = ProtocolSpec::from_json(&text)
                .unwrap_or_else(|e| panic!("{}: {e}", spec.name));
            assert_eq!(back, spec, "{} round trip", spec.name);
        }
    }

    #[test]
    fn input_symbols_are_unique_per_spec() {
        for spec in corpus() {
            let mut symbols = spec.input_symbols();
            symbols.sort();
            let before = symbols.len();
            symbols.dedup();
            assert_eq!(symbols.len(), before, "{}", spec.name);
        }
    }
}
