use cocorec_web::{attention_weights, boost_preview, Demo};

#[test]
fn attention_matches_hand_computation() {
    // q = (1, 0), keys e1 and e2: scores 1/sqrt2 and 0
    let out = attention_weights(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
    let expected = [a, 1.0 - a, a, 1.0 - a];
    assert_eq!(out.len(), 4);
    for (x, y) in out.iter().zip(expected) {
        assert!((x - y).abs() < 1e-12, "{out:?}");
    }
    assert!(attention_weights(&[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
    assert!(attention_weights(&[1.0, 0.0], &[]).is_err());
}

#[test]
fn boost_preview_renormalizes() {
    let out = boost_preview(&[0.5, 0.3, 0.2], &[2], 0.1).unwrap();
    let expected = [0.5 / 1.1, 0.3 / 1.1, 0.3 / 1.1];
    for (x, y) in out.iter().zip(expected) {
        assert!((x - y).abs() < 1e-12, "{out:?}");
    }
    assert_eq!(boost_preview(&[0.5, 0.5], &[0], 0.0).unwrap(), vec![0.5, 0.5]);
    assert!(boost_preview(&[0.5, 0.5], &[2], 0.1).is_err());
    assert!(boost_preview(&[0.5, 0.5], &[0], -1.0).is_err());
}

#[test]
fn demo_trains_and_recommends() {
    let demo = Demo::train(5, 1.0).unwrap();
    assert!(demo.summary().contains("validation R@20"));
    let ctx = demo.parse_context("i0, i1").unwrap();
    let top = demo.top(0, ctx, 5, 10, 0.1).unwrap();
    assert_eq!(top.len(), 5);
    assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(top.iter().all(|r| (0.0..=1.0).contains(&r.lambda)));
    assert!(demo.parse_context("nope").is_err());
    assert!(demo.parse_context(" , ").is_err());
    assert!(demo.top(999, vec![0], 5, 10, 0.1).is_err());
    assert_eq!(demo.catalog().lines().count(), 60);
}
