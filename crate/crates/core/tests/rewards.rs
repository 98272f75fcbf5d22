use focusloop_core::agar::*;
use focusloop_core::protocol::Shape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Piecewise restatement of the reward, written case by case.
fn oracle(correct: bool, shape: Shape, g: u8, delta: f64, gamma: f64) -> f64 {
    match (correct, shape) {
        (true, Shape::Direct) => 1.0,
        (true, Shape::ZoomIn) if g == 1 => 1.0 - delta,
        (true, Shape::ZoomIn) => 1.0,
        (true, Shape::Invalid) => 0.0,
        (false, Shape::Invalid) => 0.0,
        (false, _) => gamma,
    }
}

#[test]
fn truth_table_matches_oracle() {
    let shapes = [Shape::Direct, Shape::ZoomIn, Shape::Invalid];
    let mut rows = 0;
    for params in [AgarParams::default(), AgarParams { delta: 0.35, gamma: 0.05 }, AgarParams { delta: 1.0, gamma: 0.0 }] {
        for c in [false, true] {
            for shape in shapes {
                for g in [0u8, 1] {
                    let o = RolloutOutcome::new(c, shape);
                    assert_eq!(o.format_valid, shape != Shape::Invalid);
                    let got = agar_reward(&o, g, &params);
                    let want = oracle(c, shape, g, params.delta, params.gamma);
                    assert!((got - want).abs() < 1e-15, "{o:?} g={g}: {got} vs {want}");
                    rows += 1;
                }
            }
        }
    }
    assert_eq!(rows, 36);
}

#[test]
fn spot_values_and_ordering() {
    let p = AgarParams::default();
    let r = |c, s, g| agar_reward(&RolloutOutcome::new(c, s), g, &p);
    assert_eq!(r(true, Shape::Direct, 1), 1.0);
    assert!((r(true, Shape::ZoomIn, 1) - 0.8).abs() < 1e-15);
    assert_eq!(r(true, Shape::ZoomIn, 0), 1.0);
    assert!((r(false, Shape::ZoomIn, 1) - 0.1).abs() < 1e-15);
    assert_eq!(r(false, Shape::Invalid, 1), 0.0);
    assert!(r(true, Shape::Direct, 1) > r(true, Shape::ZoomIn, 1));
    assert!(r(true, Shape::ZoomIn, 1) > r(false, Shape::Direct, 1));
    assert!(r(false, Shape::Direct, 1) > r(false, Shape::Invalid, 1));

    let b = |c, s| baseline_reward(&RolloutOutcome::new(c, s));
    assert!((b(true, Shape::ZoomIn) - 1.0).abs() < 1e-15);
    assert!((b(false, Shape::Direct) - 0.1).abs() < 1e-15);
    assert!((b(true, Shape::Invalid) - 0.9).abs() < 1e-15);
}

#[test]
fn group_signal_drives_the_discount() {
    let cd = RolloutOutcome::new(true, Shape::Direct);
    let cz = RolloutOutcome::new(true, Shape::ZoomIn);
    let wd = RolloutOutcome::new(false, Shape::Direct);
    assert_eq!(group_signal(&[cd, cz]).unwrap(), 1);
    assert_eq!(group_signal(&[cz, wd]).unwrap(), 0);
    assert_eq!(group_signal(&[]), Err(AgarError::EmptyGroup));
    let kind = RewardKind::default();
    assert_eq!(kind.group_rewards(&[cz, wd]).unwrap(), vec![1.0, 0.1]);
    let r = kind.group_rewards(&[cd, cz]).unwrap();
    assert!((r[1] - 0.8).abs() < 1e-15);
}

/// Straightforward two-pass recomputation.
fn brute_advantages(r: &[f64], eps: f64) -> Vec<f64> {
    let n = r.len() as f64;
    let mut mean = 0.0;
    for x in r {
        mean += x;
    }
    mean /= n;
    let mut ss = 0.0;
    for x in r {
        ss += (x - mean) * (x - mean);
    }
    let sd = (ss / n).sqrt();
    r.iter().map(|x| (x - mean) / (sd + eps)).collect()
}

#[test]
fn advantage_example() {
    let r = [1.0, 0.8, 0.1, 0.1];
    let a = group_advantages(&r, &AdvantageParams::default()).unwrap();
    for (x, y) in a.iter().zip(brute_advantages(&r, 1e-6)) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.iter().zip([1.2309, 0.7385, -0.9847, -0.9847]) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
    assert_eq!(group_advantages(&[0.5, 0.5, 0.5], &AdvantageParams::default()).unwrap(), vec![0.0; 3]);
    assert_eq!(group_advantages(&[1.0], &AdvantageParams::default()).unwrap(), vec![0.0]);
    assert!(group_advantages(&[], &AdvantageParams::default()).is_err());
}

#[test]
fn advantage_properties_on_random_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = AdvantageParams::default();
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = group_advantages(&r, &p).unwrap();
        assert!(a.iter().sum::<f64>().abs() / (n as f64) < 1e-9);

        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
        for (x, y) in a.iter().zip(group_advantages(&shifted, &p).unwrap()) {
            assert!((x - y).abs() < 1e-9);
        }

        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        assert_eq!(argmax(&a), argmax(&r));

        if n > 1 {
            let sd = (a.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
            assert!((sd - 1.0).abs() < 1e-3);
        }
        let c = rng.gen_range(-1.0..1.0);
        assert!(group_advantages(&vec![c; n], &p).unwrap().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn token_masks() {
    use TokenKind::*;
    assert_eq!(token_mask(&[Text, Vision, Text, Padding]).unwrap().to_bits(), vec![1, 0, 1, 0]);
    assert_eq!(token_mask(&[Text, Text]).unwrap().trainable(), 2);
    assert_eq!(token_mask(&[Vision, Vision]), Err(AgarError::NoTrainableTokens));
}

#[test]
fn matcher_and_csv() {
    let m = DefaultMatcher;
    assert!(m.matches("  Paris ", "paris"));
    assert!(m.matches("(B)", "B"));
    assert!(!m.matches("Lyon", "Paris"));
    let csv = reward_table_csv(&AgarParams::default());
    assert_eq!(csv.lines().count(), 1 + 12);
}
