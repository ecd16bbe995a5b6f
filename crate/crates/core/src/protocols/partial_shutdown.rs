//! Greet-then-serve loop where protocol errors half-close the session.
//!
//! Out-of-order traffic gets one alert and then the receive side shuts down:
//! the session stays alive but never reads again, which an outside observer
//! cannot tell apart from a slow server. A polite `bye` closes for real.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{InputCoding, OutputCoding, PayloadCheck, PayloadTemplate, ProtocolSpec, ReferenceMachine};
use crate::model::{Model, TerminalKind};

const SOURCE: &str = r#"; greet-then-serve; any protocol error alerts and half-closes
start:
  alloc r7, 16          ; greeted flag @0
  alloc r6, 32
  alloc r5, 16
loop:
  recv r0, r6, 32
  load.1 r1, [r6]
  cmp r1, 1
  jz on_hello
  cmp r1, 2
  jz on_ping
  cmp r1, 3
  jz on_data
  cmp r1, 4
  jz on_bye
  jmp loop

on_hello:
  load.1 r1, [r7]
  cmp r1, 0
  jnz protocol_error    ; greeting twice is an error
  store.1 [r7], 1
  store.1 [r5], 0x81
  send r5, 1
  jmp loop

on_ping:
  load.1 r1, [r7]
  cmp r1, 0
  jz protocol_error
  store.1 [r5], 0x82
  send r5, 1
  jmp loop

on_data:
  load.1 r1, [r7]
  cmp r1, 0
  jz protocol_error
  store.1 [r5], 0x83
  send r5, 1
  jmp loop

on_bye:
  store.1 [r5], 0x84
  send r5, 1
  close
  jmp loop

protocol_error:
  store.1 [r5], 0x85
  send r5, 1
  shutdown_rd           ; stop reading; the session lingers silently
  jmp loop
"#;

fn reference() -> Model {
    let mut m = Model::new();
    let fresh = m.add_state(TerminalKind::None);
    let greeted = m.add_state(TerminalKind::None);
    let muted = m.add_state(TerminalKind::ShutdownRead);
    let closed = m.add_state(TerminalKind::Closed);
    m.set_initial(fresh);
    m.add_transition(fresh, "hello", "HI", greeted).unwrap();
    m.add_transition(fresh, "ping", "ALERT", muted).unwrap();
    m.add_transition(fresh, "data", "ALERT", muted).unwrap();
    m.add_transition(fresh, "bye", "BYE_ACK", closed).unwrap();
    m.add_transition(greeted, "hello", "ALERT", muted).unwrap();
    m.add_transition(greeted, "ping", "PONG", greeted).unwrap();
    m.add_transition(greeted, "data", "DATA_OK", greeted).unwrap();
    m.add_transition(greeted, "bye", "BYE_ACK", closed).unwrap();
    m
}

pub fn spec() -> ProtocolSpec {
    let simple = |symbol: &str, header: u8| InputCoding {
        symbol: symbol.to_string(),
        header,
        payload: PayloadTemplate::Static(Vec::new()),
    };
    let reply = |symbol: &str, header: u8| OutputCoding {
        symbol: symbol.to_string(),
        header,
        check: PayloadCheck::Any,
    };
    ProtocolSpec {
        name: "partial-shutdown".to_string(),
        family: "partial-shutdown".to_string(),
        params: BTreeMap::new(),
        program_source: SOURCE.to_string(),
        inputs: alloc::vec![
            simple("hello", 0x01),
            simple("ping", 0x02),
            simple("data", 0x03),
            simple("bye", 0x04),
        ],
        outputs: alloc::vec![
            reply("HI", 0x81),
            reply("PONG", 0x82),
            reply("DATA_OK", 0x83),
            reply("BYE_ACK", 0x84),
            reply("ALERT", 0x85),
        ],
        happy_flow: alloc::vec![
            "hello".to_string(),
            "ping".to_string(),
            "data".to_string(),
        ],
        reference: ReferenceMachine::Finite(reference()),
    }
}
