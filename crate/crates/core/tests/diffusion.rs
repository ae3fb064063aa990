use proptest::prelude::*;
use qising::diffusion::{expected_reward, generate_panel, reward, step, Panel, SisConfig, SisState, Treatment};
use qising::graph::gen_sbm;
use qising::policies::Policy;
use qising::rng::PeriodRng;

fn config(spread: f64, churn: f64, seed: u64) -> SisConfig {
    let (g, p) = gen_sbm(&[6, 6, 4], 0.5, 0.1, seed).unwrap();
    SisConfig::new(g, p, vec![spread, spread * 0.5, spread], vec![churn, churn, churn * 0.5]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_preserves_invariants(
        spread in 0.0f64..=1.0,
        churn in 0.0f64..=1.0,
        seed in any::<u64>(),
        start in proptest::collection::vec(0u8..=1, 16),
        bin in 0usize..3,
    ) {
        let cfg = config(spread, churn, seed);
        let state = SisState { adopted: start.clone(), t: 0 };
        let out = step(&state, &cfg, Treatment::Bin(bin), &PeriodRng::new(seed, 1)).unwrap();
        prop_assert!(out.state.adopted.iter().all(|&y| y <= 1));
        prop_assert!((0.0..=1.0).contains(&out.reward));
        prop_assert_eq!(out.reward, reward(&out.state.adopted).unwrap());
        if let Some(v) = out.seeded {
            prop_assert_eq!(cfg.partition().bin_of(v), bin);
            prop_assert_eq!(out.state.adopted[v], 1);
        }
        // the rerun is bit-identical
        let again = step(&state, &cfg, Treatment::Bin(bin), &PeriodRng::new(seed, 1)).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn without_churn_adoption_never_falls(spread in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = config(spread, 0.0, seed);
        let panel = generate_panel(&cfg, &Policy::RandomBin, 20, seed, None).unwrap();
        for t in 1..=panel.len() {
            prop_assert!(panel.y(t - 1).iter().zip(panel.y(t)).all(|(a, b)| b >= a));
        }
    }

    #[test]
    fn panel_jsonl_round_trips(seed in any::<u64>()) {
        let cfg = config(0.3, 0.3, seed);
        let panel = generate_panel(&cfg, &Policy::RandomBin, 12, seed, None).unwrap();
        let mut buf = Vec::new();
        panel.write_jsonl(&mut buf).unwrap();
        let back = Panel::read_jsonl(&buf[..]).unwrap();
        prop_assert_eq!(back, panel);
    }
}

#[test]
fn one_step_expectation_matches_simulation() {
    let cfg = config(0.4, 0.3, 2);
    let y_prev: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
    let state = SisState { adopted: y_prev.clone(), t: 0 };
    let exact = expected_reward(&cfg, &y_prev, Treatment::Bin(2)).unwrap();
    let runs = 20_000;
    let rewards: Vec<f64> =
        (0..runs).map(|r| step(&state, &cfg, Treatment::Bin(2), &PeriodRng::new(r, 1)).unwrap().reward).collect();
    let mean = rewards.iter().sum::<f64>() / runs as f64;
    let sd = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
    assert!((mean - exact).abs() < 4.0 * sd / (runs as f64).sqrt(), "{mean} vs {exact}");
}

#[test]
fn saturated_bin_is_a_no_op_seed() {
    let cfg = config(0.0, 0.0, 4);
    let mut adopted = vec![0u8; 16];
    for &v in cfg.partition().members(1) {
        adopted[v] = 1;
    }
    let out = step(&SisState { adopted: adopted.clone(), t: 0 }, &cfg, Treatment::Bin(1), &PeriodRng::new(0, 1)).unwrap();
    assert_eq!(out.seeded, None);
    assert_eq!(out.state.adopted, adopted);
}
