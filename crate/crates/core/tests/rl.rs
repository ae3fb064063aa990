use proptest::prelude::*;
use qising::ising::QIsingState;
use qising::rl::{
    cql_loss, pevi_bonus, stage_datasets, train_cql, train_cql_traced, train_pevi, CqlHyper, FeatureMap, QFunction,
    Sample, Transition,
};
use qising::rng::rng_from_seed;
use rand::Rng;

fn random_transitions(k: usize, n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = rng_from_seed(seed);
    let mut state = || QIsingState::from_slice(&(0..2 * k).map(|_| rng.random::<f64>()).collect::<Vec<_>>()).unwrap();
    let states: Vec<QIsingState> = (0..=n).map(|_| state()).collect();
    let mut rng = rng_from_seed(seed ^ 1);
    (0..n)
        .map(|i| Transition {
            t: i + 1,
            s: states[i].clone(),
            b: rng.random_range(0..k),
            r: rng.random(),
            s_next: states[i + 1].clone(),
        })
        .collect()
}

fn small_hyper() -> CqlHyper {
    CqlHyper { hidden: vec![16, 16], max_steps: 400, steps_per_epoch: 100, batch_size: 16, ..CqlHyper::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pevi_values_stay_clipped(
        seed in any::<u64>(),
        beta in 0.0f64..5.0,
        lambda in 0.1f64..5.0,
    ) {
        let (k, horizon) = (3, 4);
        let data = random_transitions(k, 40, seed);
        let stages = stage_datasets(&data, 40, horizon).unwrap();
        let policy = train_pevi(&stages, FeatureMap::Bin { k }, lambda, beta, horizon).unwrap();
        let mut rng = rng_from_seed(seed);
        for h in 1..=horizon {
            let s: Vec<f64> = (0..2 * k).map(|_| rng.random()).collect();
            for b in 0..k {
                let q = policy.q_value(h, &s, b).unwrap();
                prop_assert!((0.0..=(horizon - h + 1) as f64).contains(&q), "h={h} q={q}");
                prop_assert!(policy.width(h, &s, b).unwrap() >= 0.0);
            }
            prop_assert!(policy.greedy(h, &s).unwrap() < k);
        }
    }

    #[test]
    fn bin_features_lie_in_the_unit_ball(k in 1usize..6, seed in any::<u64>()) {
        let map = FeatureMap::Bin { k };
        let mut rng = rng_from_seed(seed);
        let s: Vec<f64> = (0..2 * k).map(|_| rng.random()).collect();
        for b in 0..k {
            let phi = map.features(&s, b).unwrap();
            prop_assert_eq!(phi.len(), map.dim());
            prop_assert!(phi.norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn larger_bonus_is_more_pessimistic(seed in any::<u64>()) {
        let (k, horizon) = (2, 3);
        let data = random_transitions(k, 30, seed);
        let stages = stage_datasets(&data, 30, horizon).unwrap();
        let lo = train_pevi(&stages, FeatureMap::Bin { k }, 1.0, 0.1, horizon).unwrap();
        let hi = train_pevi(&stages, FeatureMap::Bin { k }, 1.0, 2.0, horizon).unwrap();
        for tr in &data {
            let s = tr.s.to_vec();
            prop_assert!(hi.value(horizon, &s).unwrap() <= lo.value(horizon, &s).unwrap() + 1e-12);
        }
    }
}

#[test]
fn bonus_shrinks_with_more_data_in_a_direction() {
    let map = FeatureMap::Bin { k: 1 };
    let phi = map.features(&[0.5, 0.5], 0).unwrap();
    let few = phi.clone() * phi.transpose() + nalgebra::DMatrix::identity(3, 3);
    let many = phi.clone() * phi.transpose() * 50.0 + nalgebra::DMatrix::identity(3, 3);
    assert!(pevi_bonus(&phi, &many, 1.0).unwrap() < pevi_bonus(&phi, &few, 1.0).unwrap());
}

#[test]
fn stage_split_uses_whole_blocks_only() {
    let data = random_transitions(2, 11, 3);
    let stages = stage_datasets(&data, 11, 5).unwrap();
    assert_eq!(stages.iter().map(Vec::len).collect::<Vec<_>>(), vec![2; 5]);
    assert_eq!(stages[0][1], Sample::from(&data[5]));
    assert!(stage_datasets(&data, 11, 12).is_err());
}

#[test]
fn cql_training_is_seed_deterministic() {
    let data = random_transitions(3, 60, 8);
    let a = train_cql(&data, &small_hyper(), 5).unwrap();
    let b = train_cql(&data, &small_hyper(), 5).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = train_cql(&data, &small_hyper(), 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn cql_training_lowers_the_loss() {
    let data = random_transitions(3, 60, 9);
    let hyper = CqlHyper { max_steps: 2000, patience: 100, ..small_hyper() };
    let (q, summary) = train_cql_traced(&data, &hyper, 1).unwrap();
    let start = QFunction::new(6, &hyper.hidden, 3, 1).unwrap().with_batch_norm();
    let before = cql_loss(&start, &data, &start, hyper.alpha, hyper.psi).unwrap();
    let after = cql_loss(&q, &data, &q, hyper.alpha, hyper.psi).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert!(summary.epoch_losses.last().unwrap() < summary.epoch_losses.first().unwrap());
}

#[test]
fn trained_network_round_trips_through_json() {
    let data = random_transitions(2, 30, 1);
    let q = train_cql(&data, &small_hyper(), 2).unwrap();
    assert_eq!(q.norms().len(), 2);
    let json = serde_json::to_string(&q).unwrap();
    let back: QFunction = serde_json::from_str(&json).unwrap();
    assert_eq!(back, q);
    for tr in &data {
        assert_eq!(back.q_values(&tr.s.to_vec()).unwrap(), q.q_values(&tr.s.to_vec()).unwrap());
    }
}

#[test]
fn malformed_network_files_are_rejected() {
    let q = QFunction::new(4, &[3], 2, 0).unwrap().with_batch_norm();
    let mut value: serde_json::Value = serde_json::to_value(&q).unwrap();
    value["batch_norm"][0]["gamma"] = serde_json::json!([1.0, 1.0]);
    assert!(serde_json::from_value::<QFunction>(value.clone()).is_err());
    value["unexpected"] = serde_json::json!(1);
    assert!(serde_json::from_value::<QFunction>(value).is_err());
}
