use ursula_core::modes::*;

mod common;
use common::measure::*;

#[test]
fn transition_table_matches_oracle() {
    let (cases, bad) = transition_table_mismatches();
    assert_eq!(cases, 12 * 12 * 3 * 2);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn fault_events_never_rejected() {
    for cur in ModeState::all() {
        for req in ModeState::all() {
            let ev = TransitionEvent { requested: req, source: TransitionSource::Fault };
            assert!(request_transition(cur, &ev, &LinkStatus { wireless_available: false }).is_ok());
        }
    }
}

#[test]
fn no_reachable_invariant_violation() {
    let seen = reachable_states();
    assert!(seen.iter().all(|m| m.is_valid()), "{seen:?}");
    assert_eq!(seen.len(), 8);
}

#[test]
fn rejections_carry_codes() {
    let bad = ModeState::new(OpMode::Exp, NavMode::Sautpos, LinkMode::Nowire);
    let err = request_transition(
        ModeState::default(),
        &TransitionEvent { requested: bad, source: TransitionSource::Operator },
        &LinkStatus { wireless_available: true },
    )
    .unwrap_err();
    assert_eq!(err.code.as_str(), "teleop_requires_int");
    assert_eq!(serde_json::to_string(&err.code).unwrap(), "\"teleop_requires_int\"");
}
