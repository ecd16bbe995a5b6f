//! Strictly sequenced channel with replay detection.
//!
//! Every frame carries an 8-byte sequence number. The service accepts a frame
//! only when the number matches its stored expectation, then increments the
//! expectation; anything else is reported as a replay. The codec tracks the
//! same sequence on the client side, so the happy flow stays in lockstep
//! forever and the true machine has unboundedly many states.

use alloc::collections::BTreeMap;
use alloc::string::ToString;

use super::{InputCoding, OutputCoding, PayloadCheck, PayloadTemplate, ProtocolSpec, ReferenceMachine};

const SOURCE: &str = r#"; strictly sequenced channel: each frame names the next sequence number
start:
  alloc r7, 16          ; expected sequence number @0
  alloc r6, 32
  alloc r5, 16
loop:
  recv r0, r6, 32
  load.1 r1, [r6]
  cmp r1, 1
  jnz loop
  load.8 r2, [r6+1]     ; claimed sequence number
  load.8 r3, [r7]
  cmp r2, r3
  jnz stale
  add r3, 1
  store.8 [r7], r3
  store.1 [r5], 0x81
  send r5, 1
  jmp loop
stale:
  store.1 [r5], 0x82
  send r5, 1
  jmp loop
"#;

pub fn spec() -> ProtocolSpec {
    ProtocolSpec {
        name: "replay-counter".to_string(),
        family: "replay-counter".to_string(),
        params: BTreeMap::new(),
        program_source: SOURCE.to_string(),
        inputs: alloc::vec![InputCoding {
            symbol: "msg".to_string(),
            header: 0x01,
            payload: PayloadTemplate::CounterEcho,
        }],
        outputs: alloc::vec![
            OutputCoding {
                symbol: "ACK".to_string(),
                header: 0x81,
                check: PayloadCheck::Any,
            },
            OutputCoding {
                symbol: "REPLAY_ALERT".to_string(),
                header: 0x82,
                check: PayloadCheck::Any,
            },
        ],
        happy_flow: alloc::vec!["msg".to_string(), "msg".to_string(), "msg".to_string()],
        reference: ReferenceMachine::Infinite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_is_marked_infinite() {
        assert!(spec().reference.finite().is_none());
    }

    #[test]
    fn the_single_input_echoes_the_session_counter() {
        let spec = spec();
        assert_eq!(spec.input_symbols(), ["msg"]);
        assert_eq!(
            spec.input_coding("msg").unwrap().payload,
            PayloadTemplate::CounterEcho
        );
    }
}
