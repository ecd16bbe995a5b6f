//! Four-message handshake whose retry counter doubles as a skeleton key.
//!
//! While a verification is pending, every unexpected frame bumps a counter.
//! The verify handler accepts a bad signature whenever that counter happens
//! to equal n, so `hello, hello*n, verify_bad` walks straight past the check.
//! The counter saturates at n+1 to keep the true state space finite.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{InputCoding, OutputCoding, PayloadCheck, PayloadTemplate, ProtocolSpec, ReferenceMachine};
use crate::model::{Model, TerminalKind};

pub const DEFAULT_N: u64 = 5;

fn program_source(n: u64) -> String {
    let sat = n + 1;
    format!(
        r#"; four-message handshake; unexpected frames bump a retry counter
start:
  alloc r7, 16          ; phase @0, unexpected-frame counter @4
  alloc r6, 32
  alloc r5, 16
loop:
  recv r0, r6, 32
  load.1 r1, [r6]
  cmp r1, 1
  jz on_hello
  cmp r1, 3
  jz on_verify
  cmp r1, 4
  jz on_finish
  jmp loop

on_hello:
  load.1 r1, [r7]
  cmp r1, 0
  jz hello_start
  cmp r1, 1
  jz unexpected
  jmp reply_busy        ; handshake already over
hello_start:
  store.1 [r7], 1
  store.1 [r5], 0x81
  send r5, 1
  jmp loop

on_verify:
  load.1 r1, [r7]
  cmp r1, 1
  jnz verify_out_of_phase
  load.1 r2, [r6+1]     ; signature byte
  cmp r2, 0xaa
  jz verify_accept
  load.4 r3, [r7+4]     ; the bug: a magic retry count skips the check
  cmp r3, {n}
  jz verify_accept
  jmp fatal
verify_accept:
  store.1 [r7], 2
  store.4 [r7+4], 0
  store.1 [r5], 0x83
  send r5, 1
  jmp loop
verify_out_of_phase:
  cmp r1, 0
  jz fatal              ; verify before hello
  jmp reply_busy

on_finish:
  load.1 r1, [r7]
  cmp r1, 2
  jz finish_done
  cmp r1, 1
  jz unexpected
  jmp fatal             ; finish before hello
finish_done:
  store.1 [r5], 0x84
  send r5, 1
  halt                  ; worker exits, transport torn down with it

unexpected:
  load.4 r3, [r7+4]
  cmp r3, {sat}
  jge unexp_reply
  add r3, 1
  store.4 [r7+4], r3
unexp_reply:
  store.1 [r5], 0x82
  send r5, 1
  jmp loop

reply_busy:
  store.1 [r5], 0x86
  send r5, 1
  jmp loop

fatal:
  store.1 [r5], 0x85
  send r5, 1
  close
  halt
"#
    )
}

fn reference(n: u64) -> Model {
    let n = n as usize;
    let mut m = Model::new();
    let fresh = m.add_state(TerminalKind::None);
    // awaiting[k]: a verification is pending and k unexpected frames arrived.
    let awaiting: Vec<_> = (0..=n + 1).map(|_| m.add_state(TerminalKind::None)).collect();
    let established = m.add_state(TerminalKind::None);
    let done = m.add_state(TerminalKind::Closed);
    let failed = m.add_state(TerminalKind::Closed);
    m.set_initial(fresh);

    m.add_transition(fresh, "hello", "HELLO_ACK", awaiting[0]).unwrap();
    m.add_transition(fresh, "verify_ok", "ALERT", failed).unwrap();
    m.add_transition(fresh, "verify_bad", "ALERT", failed).unwrap();
    m.add_transition(fresh, "finish", "ALERT", failed).unwrap();

    for (k, &s) in awaiting.iter().enumerate() {
        let bumped = awaiting[(k + 1).min(n + 1)];
        m.add_transition(s, "hello", "UNEXP", bumped).unwrap();
        m.add_transition(s, "finish", "UNEXP", bumped).unwrap();
        m.add_transition(s, "verify_ok", "VERIFY_OK", established).unwrap();
        if k == n {
            m.add_transition(s, "verify_bad", "VERIFY_OK", established).unwrap();
        } else {
            m.add_transition(s, "verify_bad", "ALERT", failed).unwrap();
        }
    }

    m.add_transition(established, "hello", "BUSY", established).unwrap();
    m.add_transition(established, "verify_ok", "BUSY", established).unwrap();
    m.add_transition(established, "verify_bad", "BUSY", established).unwrap();
    m.add_transition(established, "finish", "DONE", done).unwrap();
    m
}

pub fn spec(n: u64) -> ProtocolSpec {
    let framed = |symbol: &str, header: u8, payload: &[u8]| InputCoding {
        symbol: symbol.to_string(),
        header,
        payload: PayloadTemplate::Static(payload.to_vec()),
    };
    let reply = |symbol: &str, header: u8| OutputCoding {
        symbol: symbol.to_string(),
        header,
        check: PayloadCheck::Any,
    };
    ProtocolSpec {
        name: format!("handshake-bypass({n})"),
        family: "handshake-bypass".to_string(),
        params: BTreeMap::from([("n".to_string(), n)]),
        program_source: program_source(n),
        inputs: alloc::vec![
            framed("hello", 0x01, &[]),
            framed("verify_ok", 0x03, &[0xaa]),
            framed("verify_bad", 0x03, &[0xbb]),
            framed("finish", 0x04, &[]),
        ],
        outputs: alloc::vec![
            reply("HELLO_ACK", 0x81),
            reply("UNEXP", 0x82),
            reply("VERIFY_OK", 0x83),
            reply("DONE", 0x84),
            reply("ALERT", 0x85),
            reply("BUSY", 0x86),
        ],
        happy_flow: alloc::vec![
            "hello".to_string(),
            "verify_ok".to_string(),
            "finish".to_string(),
        ],
        reference: ReferenceMachine::Finite(reference(n)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OUTPUT_CLOSED;

    #[test]
    fn state_count_grows_linearly_with_n() {
        // fresh + (n+2) awaiting + established + two closed sinks
        assert_eq!(reference(5).state_count(), 11);
        assert_eq!(reference(10).state_count(), 16);
    }

    #[test]
    fn honest_verification_succeeds() {
        let m = reference(5);
        let outs = m.run(["hello", "verify_ok", "finish"]);
        assert_eq!(outs[1].as_deref(), Some("VERIFY_OK"));
        assert_eq!(outs[2].as_deref(), Some("DONE"));
    }

    #[test]
    fn bad_signature_normally_fails() {
        let m = reference(5);
        let outs = m.run(["hello", "verify_bad", "finish"]);
        assert_eq!(outs[1].as_deref(), Some("ALERT"));
        assert_eq!(outs[2].as_deref(), Some(OUTPUT_CLOSED));
    }

    #[test]
    fn magic_retry_count_accepts_a_bad_signature() {
        for n in [2u64, 5] {
            let m = reference(n);
            let mut word: Vec<&str> = alloc::vec!["hello"];
            word.extend(core::iter::repeat("hello").take(n as usize));
            word.push("verify_bad");
            word.push("finish");
            let outs = m.run(word.iter().copied());
            assert_eq!(outs[outs.len() - 2].as_deref(), Some("VERIFY_OK"), "n={n}");
            assert_eq!(outs[outs.len() - 1].as_deref(), Some("DONE"), "n={n}");
        }
    }

    #[test]
    fn retry_counter_saturates_rather_than_wrapping() {
        let m = reference(2);
        // Overshooting the magic count must not come back around to it.
        let outs = m.run(["hello", "hello", "hello", "hello", "hello", "verify_bad"]);
        assert_eq!(outs.last().unwrap().as_deref(), Some("ALERT"));
    }
}
