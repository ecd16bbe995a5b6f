//! Greeter with a free-running message counter.
//!
//! The first `msg` is consumed silently; every later `msg` is acknowledged.
//! Each `msg` also bumps a 16-bit tally on the heap that no branch ever
//! inspects, so sessions that differ only in the tally behave identically.
//! The true machine has two states even though the memory keeps changing.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{InputCoding, OutputCoding, PayloadCheck, PayloadTemplate, ProtocolSpec, ReferenceMachine};
use crate::model::{Model, TerminalKind, OUTPUT_EMPTY};

const SOURCE: &str = r#"; greeter with a message tally that nothing ever reads back
start:
  alloc r7, 16          ; greeted flag @0, tally @2
  alloc r6, 32
  alloc r5, 16
loop:
  recv r0, r6, 32
  load.1 r1, [r6]
  cmp r1, 1
  jz on_msg
  cmp r1, 2
  jz on_probe
  jmp loop

on_msg:
  load.1 r1, [r7]
  cmp r1, 0
  jz first_contact
  store.1 [r5], 0x81
  send r5, 1
  load.2 r2, [r7+2]     ; tally is bumped after the reply has left
  add r2, 1
  store.2 [r7+2], r2
  jmp loop
first_contact:
  store.1 [r7], 1       ; the greeting itself gets no reply
  load.2 r2, [r7+2]
  add r2, 1
  store.2 [r7+2], r2
  jmp loop

on_probe:
  store.1 [r5], 0x82
  send r5, 1
  jmp loop
"#;

fn reference() -> Model {
    let mut m = Model::new();
    let fresh = m.add_state(TerminalKind::None);
    let greeted = m.add_state(TerminalKind::None);
    m.set_initial(fresh);
    m.add_transition(fresh, "msg", OUTPUT_EMPTY, greeted).unwrap();
    m.add_transition(fresh, "probe", "PROBE_ACK", fresh).unwrap();
    m.add_transition(greeted, "msg", "ACK", greeted).unwrap();
    m.add_transition(greeted, "probe", "PROBE_ACK", greeted).unwrap();
    m
}

pub fn spec() -> ProtocolSpec {
    ProtocolSpec {
        name: "counter-loop".to_string(),
        family: "counter-loop".to_string(),
        params: BTreeMap::new(),
        program_source: SOURCE.to_string(),
        inputs: alloc::vec![
            InputCoding {
                symbol: "msg".to_string(),
                header: 0x01,
                payload: PayloadTemplate::Static(Vec::new()),
            },
            InputCoding {
                symbol: "probe".to_string(),
                header: 0x02,
                payload: PayloadTemplate::Static(Vec::new()),
            },
        ],
        outputs: alloc::vec![
            OutputCoding {
                symbol: "ACK".to_string(),
                header: 0x81,
                check: PayloadCheck::Any,
            },
            OutputCoding {
                symbol: "PROBE_ACK".to_string(),
                header: 0x82,
                check: PayloadCheck::Any,
            },
        ],
        happy_flow: alloc::vec!["msg".to_string(), "msg".to_string()],
        reference: ReferenceMachine::Finite(reference()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_has_exactly_two_states() {
        assert_eq!(reference().state_count(), 2);
    }

    #[test]
    fn first_message_is_silent_and_later_ones_ack() {
        let m = reference();
        let outs = m.run(["msg", "msg", "msg"]);
        assert_eq!(
            outs,
            [
                Some(OUTPUT_EMPTY.to_string()),
                Some("ACK".to_string()),
                Some("ACK".to_string())
            ]
        );
    }

    #[test]
    fn probe_does_not_consume_the_greeting() {
        let m = reference();
        let outs = m.run(["probe", "probe", "msg", "msg"]);
        assert_eq!(outs[0].as_deref(), Some("PROBE_ACK"));
        assert_eq!(outs[2].as_deref(), Some(OUTPUT_EMPTY));
        assert_eq!(outs[3].as_deref(), Some("ACK"));
    }
}
