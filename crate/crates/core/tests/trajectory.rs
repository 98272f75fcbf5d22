use focusloop_core::trajectory::*;
use focusloop_core::Mode;
use proptest::prelude::*;

fn step() -> impl Strategy<Value = Vec<StepRecord>> {
    // one "unit": a think, a zoom with its observation, or both
    prop_oneof![
        "[a-z ]{1,12}".prop_map(|t| vec![StepRecord::think(t)]),
        (1i64..50, 1i64..50, 1u64..500).prop_map(|(w, h, tok)| vec![
            StepRecord::tool_call(Region::new(0, 0, w, h)),
            StepRecord::Observation { image: ImageRef::detached("v", (2 * w) as u32, (2 * h) as u32).unwrap(), added_visual_tokens: tok },
        ]),
    ]
}

fn steps() -> impl Strategy<Value = Vec<StepRecord>> {
    prop::collection::vec(step(), 0..6).prop_map(|u| u.concat())
}

proptest! {
    #[test]
    fn history_prefix_partitions_steps(mut s in steps()) {
        s.push(StepRecord::answer("done"));
        let mut t = Trajectory::new(ImageRef::detached("r", 100, 100).unwrap(), "q");
        t.steps = s.clone();
        t.terminal = Terminal::Answered { answer: "done".into() };
        for i in 1..=s.len() + 1 {
            let prefix = rebuild_history(&t, i).unwrap();
            prop_assert_eq!([prefix, &s[i - 1..]].concat(), s.clone());
        }
        prop_assert!(rebuild_history(&t, s.len() + 2).is_err());
        prop_assert!(rebuild_history(&t, 0).is_err());
    }

    #[test]
    fn ledger_is_additive(a in steps(), b in steps()) {
        let la = ledger_of_steps(&a, 0).unwrap();
        let lb = ledger_of_steps(&b, 0).unwrap();
        let lab = ledger_of_steps(&[a, b].concat(), 0).unwrap();
        prop_assert_eq!(lab.zoom_calls, la.zoom_calls + lb.zoom_calls);
        prop_assert_eq!(lab.added_visual_tokens, la.added_visual_tokens + lb.added_visual_tokens);
    }

    #[test]
    fn jsonl_round_trips(s in steps()) {
        let mut t = Trajectory::new(ImageRef::detached("root", 640, 480).unwrap(), "What?");
        t.steps = s;
        t.steps.push(StepRecord::answer("x"));
        t.terminal = Terminal::Answered { answer: "x".into() };
        let text = write_trajectories_jsonl(&[t.clone(), t.clone()]);
        prop_assert_eq!(read_trajectories_jsonl(&text, Mode::Strict).unwrap(), vec![t.clone(), t]);
    }
}

#[test]
fn ledger_examples() {
    let obs = |n| StepRecord::Observation { image: ImageRef::detached("v", 8, 8).unwrap(), added_visual_tokens: n };
    let l = ledger_of_steps(&[StepRecord::think("a"), StepRecord::answer("b")], 256).unwrap();
    assert_eq!((l.zoom_calls, l.added_visual_tokens, l.total_visual_tokens()), (0, 0, 256));
    let r = Region::new(0, 0, 4, 4);
    let l = ledger_of_steps(&[StepRecord::tool_call(r), obs(100), StepRecord::tool_call(r), obs(150)], 0).unwrap();
    assert_eq!((l.zoom_calls, l.added_visual_tokens), (2, 250));
    assert!(ledger_of_steps(&[obs(1)], 0).is_err());
}

#[test]
fn strict_reader_rejects_unknown_fields() {
    let ok = r#"{"image":{"id":"r","width":4,"height":4},"query":"q","steps":[{"kind":"answer","text":"a"}],"terminal":{"status":"answered","answer":"a"}}"#;
    assert_eq!(read_trajectories_jsonl(ok, Mode::Strict).unwrap().len(), 1);
    let extra = ok.replace(r#""query":"q""#, r#""query":"q","score":1"#);
    assert!(matches!(read_trajectories_jsonl(&extra, Mode::Strict), Err(TrajectoryError::Schema { line: 1, .. })));
    assert_eq!(read_trajectories_jsonl(&extra, Mode::Lenient).unwrap().len(), 1);
    let bad_order = ok.replace(
        r#"[{"kind":"answer","text":"a"}]"#,
        r#"[{"kind":"observation","image":{"id":"v","width":2,"height":2},"added_visual_tokens":4},{"kind":"answer","text":"a"}]"#,
    );
    assert!(read_trajectories_jsonl(&bad_order, Mode::Strict).is_err());
}
