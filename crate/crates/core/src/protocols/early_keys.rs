//! Key-exchange toy where activation adopts whatever material is present.
//!
//! `keyx` installs key material, `activate` silently copies it into the
//! active key, and `finish` seals the transcript under that key. Activating
//! before any exchange adopts an all-zero key, so the sealed transcript
//! fails to decrypt on the client side. The adopted key itself never feeds
//! a branch; only the activation flag does.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{InputCoding, OutputCoding, PayloadCheck, PayloadTemplate, ProtocolSpec, ReferenceMachine};
use crate::model::{Model, TerminalKind, OUTPUT_EMPTY};
use crate::protocols::OUTPUT_DECRYPT_ERROR;

pub const KEY: u8 = 0x5a;

const SOURCE: &str = r#"; key-exchange toy: activation adopts whatever material is present
start:
  alloc r7, 16          ; key material @0, active key @1, activated flag @2
  alloc r6, 32
  alloc r5, 16
loop:
  recv r0, r6, 32
  load.1 r1, [r6]
  cmp r1, 1
  jz on_keyx
  cmp r1, 2
  jz on_activate
  cmp r1, 3
  jz on_finish
  jmp loop

on_keyx:
  store.1 [r7], 0x5a
  store.1 [r5], 0x81
  send r5, 1
  jmp loop

on_activate:
  load.1 r2, [r7]       ; adopt current material, even if none was exchanged
  store.1 [r7+1], r2
  store.1 [r7+2], 1
  jmp loop              ; activation is silent

on_finish:
  load.1 r1, [r7+2]
  cmp r1, 0
  jz not_ready
  load.1 r2, [r7+1]     ; transcript is sealed under the active key
  mov r3, 0x4f
  xor r3, r2
  mov r4, 0x4b
  xor r4, r2
  store.1 [r5], 0xec
  store.1 [r5+1], r3
  store.1 [r5+2], r4
  send r5, 3
  jmp loop
not_ready:
  store.1 [r5], 0x84
  send r5, 1
  jmp loop
"#;

fn reference() -> Model {
    let mut m = Model::new();
    // States track (material installed?, active key zero or real, activated?).
    let fresh = m.add_state(TerminalKind::None);
    let keyed = m.add_state(TerminalKind::None);
    let zero_active = m.add_state(TerminalKind::None);
    let keyed_zero_active = m.add_state(TerminalKind::None);
    let ready = m.add_state(TerminalKind::None);
    m.set_initial(fresh);

    m.add_transition(fresh, "keyx", "KEYX_OK", keyed).unwrap();
    m.add_transition(fresh, "activate", OUTPUT_EMPTY, zero_active).unwrap();
    m.add_transition(fresh, "finish", "NOT_READY", fresh).unwrap();

    m.add_transition(keyed, "keyx", "KEYX_OK", keyed).unwrap();
    m.add_transition(keyed, "activate", OUTPUT_EMPTY, ready).unwrap();
    m.add_transition(keyed, "finish", "NOT_READY", keyed).unwrap();

    m.add_transition(zero_active, "keyx", "KEYX_OK", keyed_zero_active).unwrap();
    m.add_transition(zero_active, "activate", OUTPUT_EMPTY, zero_active).unwrap();
    m.add_transition(zero_active, "finish", OUTPUT_DECRYPT_ERROR, zero_active).unwrap();

    m.add_transition(keyed_zero_active, "keyx", "KEYX_OK", keyed_zero_active).unwrap();
    m.add_transition(keyed_zero_active, "activate", OUTPUT_EMPTY, ready).unwrap();
    m.add_transition(keyed_zero_active, "finish", OUTPUT_DECRYPT_ERROR, keyed_zero_active).unwrap();

    m.add_transition(ready, "keyx", "KEYX_OK", ready).unwrap();
    m.add_transition(ready, "activate", OUTPUT_EMPTY, ready).unwrap();
    m.add_transition(ready, "finish", "FIN_OK", ready).unwrap();
    m
}

pub fn spec() -> ProtocolSpec {
    let simple = |symbol: &str, header: u8| InputCoding {
        symbol: symbol.to_string(),
        header,
        payload: PayloadTemplate::Static(Vec::new()),
    };
    ProtocolSpec {
        name: "early-keys".to_string(),
        family: "early-keys".to_string(),
        params: BTreeMap::new(),
        program_source: SOURCE.to_string(),
        inputs: alloc::vec![
            simple("keyx", 0x01),
            simple("activate", 0x02),
            simple("finish", 0x03),
        ],
        outputs: alloc::vec![
            OutputCoding {
                symbol: "KEYX_OK".to_string(),
                header: 0x81,
                check: PayloadCheck::Any,
            },
            OutputCoding {
                symbol: "NOT_READY".to_string(),
                header: 0x84,
                check: PayloadCheck::Any,
            },
            OutputCoding {
                symbol: "FIN_OK".to_string(),
                header: 0xec,
                check: PayloadCheck::Encrypted {
                    key: KEY,
                    plaintext: alloc::vec![b'O', b'K'],
                },
            },
        ],
        happy_flow: alloc::vec![
            "keyx".to_string(),
            "activate".to_string(),
            "finish".to_string(),
        ],
        reference: ReferenceMachine::Finite(reference()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn happy_flow_seals_under_the_real_key() {
        let m = reference();
        let outs = m.run(["keyx", "activate", "finish"]);
        assert_eq!(
            outs,
            [
                Some("KEYX_OK".to_string()),
                Some(OUTPUT_EMPTY.to_string()),
                Some("FIN_OK".to_string())
            ]
        );
    }

    #[test]
    fn early_activation_seals_under_a_zero_key() {
        let m = reference();
        let outs = m.run(["activate", "finish"]);
        assert_eq!(outs[0].as_deref(), Some(OUTPUT_EMPTY));
        assert_eq!(outs[1].as_deref(), Some(OUTPUT_DECRYPT_ERROR));
    }

    #[test]
    fn key_exchange_after_early_activation_does_not_heal_the_session() {
        let m = reference();
        let outs = m.run(["activate", "keyx", "finish"]);
        assert_eq!(outs[2].as_deref(), Some(OUTPUT_DECRYPT_ERROR));
        // A second activation does adopt the new material.
        let outs = m.run(["activate", "keyx", "activate", "finish"]);
        assert_eq!(outs[3].as_deref(), Some("FIN_OK"));
    }

    #[test]
    fn finish_before_activation_is_refused_in_plaintext() {
        let m = reference();
        let outs = m.run(["finish", "keyx", "finish"]);
        assert_eq!(outs[0].as_deref(), Some("NOT_READY"));
        assert_eq!(outs[2].as_deref(), Some("NOT_READY"));
    }

    #[test]
    fn reference_has_five_states() {
        assert_eq!(reference().state_count(), 5);
    }
}
