//! Authentication service with a hidden threshold path.
//!
//! `auth` authenticates immediately. Independently, the handler for `init`
//! keeps a count of consecutive setup messages and silently flips the session
//! into the authenticated mode once the count reaches N. Only `data` tells
//! the two modes apart from the outside, so short exploration never sees the
//! threshold path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{InputCoding, OutputCoding, PayloadCheck, PayloadTemplate, ProtocolSpec, ReferenceMachine};
use crate::model::{Model, TerminalKind};

pub const DEFAULT_N: u64 = 12;

fn program_source(n: u64) -> String {
    format!(
        r#"; session state lives in one heap block: mode byte, attempt counter
start:
  alloc r7, 16          ; mode @0, consecutive-init count @4
  alloc r6, 32          ; receive buffer
  alloc r5, 16          ; reply buffer
loop:
  recv r0, r6, 32
  load.1 r1, [r6]
  cmp r1, 1
  jz on_init
  cmp r1, 2
  jz on_auth
  cmp r1, 3
  jz on_data
  cmp r1, 4
  jz on_reset
  jmp loop

on_init:
  load.1 r1, [r7]
  cmp r1, 0
  jnz reply_busy
  load.4 r2, [r7+4]
  add r2, 1
  store.4 [r7+4], r2
  cmp r2, {n}
  jlt init_ack
  store.1 [r7], 1       ; threshold reached: promote without telling anyone
  store.4 [r7+4], 0
init_ack:
  mov r1, 0x81
  jmp reply1

on_auth:
  load.1 r1, [r7]
  cmp r1, 0
  jnz reply_busy
  store.1 [r7], 1
  store.4 [r7+4], 0
  mov r1, 0x82
  jmp reply1

on_data:
  load.1 r1, [r7]
  cmp r1, 1
  jz data_ack
  store.4 [r7+4], 0     ; off-protocol data tears down the attempt run
  mov r1, 0x83
  jmp reply1
data_ack:
  mov r1, 0x84
  jmp reply1

on_reset:
  store.1 [r7], 0
  store.4 [r7+4], 0
  mov r1, 0x86
  jmp reply1

reply_busy:
  mov r1, 0x87
reply1:
  store.1 [r5], r1
  send r5, 1
  jmp loop
"#
    )
}

fn reference(n: u64) -> Model {
    let n = n as usize;
    let mut m = Model::new();
    // States 0..n count consecutive inits; state n is authenticated.
    let counting: Vec<_> = (0..n).map(|_| m.add_state(TerminalKind::None)).collect();
    let auth = m.add_state(TerminalKind::None);
    m.set_initial(counting[0]);
    for (k, &s) in counting.iter().enumerate() {
        let next = if k + 1 == n { auth } else { counting[k + 1] };
        m.add_transition(s, "init", "INIT_ACK", next).unwrap();
        m.add_transition(s, "auth", "AUTH_OK", auth).unwrap();
        m.add_transition(s, "data", "DATA_ERR", counting[0]).unwrap();
        m.add_transition(s, "reset", "RESET_OK", counting[0]).unwrap();
    }
    m.add_transition(auth, "init", "BUSY", auth).unwrap();
    m.add_transition(auth, "auth", "BUSY", auth).unwrap();
    m.add_transition(auth, "data", "DATA_ACK", auth).unwrap();
    m.add_transition(auth, "reset", "RESET_OK", counting[0]).unwrap();
    m
}

pub fn spec(n: u64) -> ProtocolSpec {
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
        name: format!("backdoor({n})"),
        family: "backdoor".to_string(),
        params: BTreeMap::from([("N".to_string(), n)]),
        program_source: program_source(n),
        inputs: alloc::vec![
            simple("init", 0x01),
            simple("auth", 0x02),
            simple("data", 0x03),
            simple("reset", 0x04),
        ],
        outputs: alloc::vec![
            reply("INIT_ACK", 0x81),
            reply("AUTH_OK", 0x82),
            reply("DATA_ERR", 0x83),
            reply("DATA_ACK", 0x84),
            reply("RESET_OK", 0x86),
            reply("BUSY", 0x87),
        ],
        happy_flow: alloc::vec!["init".to_string(), "auth".to_string(), "data".to_string()],
        reference: ReferenceMachine::Finite(reference(n)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn authenticated(m: &Model, word: &[&str]) -> bool {
        let mut state = m.initial();
        for input in word {
            state = m.step(state, input).unwrap().1;
        }
        // The authenticated mode is the only one that acks data.
        m.step(state, "data").unwrap().0 == "DATA_ACK"
    }

    #[test]
    fn threshold_promotes_and_one_less_does_not() {
        let m = reference(12);
        let inits12: Vec<&str> = core::iter::repeat("init").take(12).collect();
        let inits11: Vec<&str> = core::iter::repeat("init").take(11).collect();
        assert!(authenticated(&m, &inits12));
        assert!(!authenticated(&m, &inits11));
    }

    #[test]
    fn data_breaks_a_consecutive_run() {
        let m = reference(3);
        assert!(authenticated(&m, &["init", "init", "init"]));
        assert!(!authenticated(&m, &["init", "init", "data", "init"]));
        assert!(authenticated(&m, &["init", "data", "init", "init", "init"]));
    }

    #[test]
    fn reset_leaves_the_authenticated_mode() {
        let m = reference(3);
        assert!(authenticated(&m, &["auth"]));
        assert!(!authenticated(&m, &["auth", "reset"]));
    }

    /// Brute force over {init, auth} words: the authenticated mode is
    /// reachable exactly when the word contains an auth or at least N inits
    /// in a row (which, absent auth, means N inits at all).
    #[test]
    fn bypass_predicate_matches_reference_by_enumeration() {
        for n in [3u64, 5, 12] {
            let m = reference(n);
            let max_len = (n + 2) as usize;
            for bits in 0u32..(1 << max_len) {
                for len in 0..=max_len {
                    let word: Vec<&str> = (0..len)
                        .map(|i| if bits & (1 << i) != 0 { "auth" } else { "init" })
                        .collect();
                    let has_auth = word.iter().any(|w| *w == "auth");
                    let all_inits = word.iter().all(|w| *w == "init");
                    let expect = has_auth || (all_inits && len >= n as usize);
                    assert_eq!(
                        authenticated(&m, &word),
                        expect,
                        "n={n} word={word:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn reference_has_n_plus_one_states() {
        assert_eq!(reference(12).state_count(), 13);
        assert_eq!(reference(3).state_count(), 4);
    }
}
