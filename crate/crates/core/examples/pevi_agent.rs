//! Pessimistic value iteration on Q-Ising transitions, with the bonus scale
//! taken from the self-normalized radius.

use qising::diffusion::{generate_panel, SisConfig};
use qising::eval::rollout_all;
use qising::graph::gen_sbm;
use qising::ising::{fit_emvs, EmvsOptions, PriorSpec};
use qising::policies::{LearnedPevi, Policy};
use qising::rl::{bonus_beta_from_radius, build_transitions, stage_datasets, train_pevi, FeatureMap, StateMode};

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[75, 75, 25, 25], 0.1, 0.01, 1)?;
    let config = SisConfig::new(graph.clone(), bins.clone(), vec![0.010, 0.012, 0.1, 0.12], vec![0.4, 0.4, 0.2, 0.2])?;
    let panel = generate_panel(&config, &Policy::RandomBin, 100, 2, None)?;
    let fit = fit_emvs(&panel, &graph, &bins, &PriorSpec::default(), &EmvsOptions::default())?;
    let set = build_transitions(&panel, Some(&fit.params), &graph, &bins, StateMode::QIsing)?;

    let horizon = 25;
    let features = FeatureMap::Bin { k: bins.k() };
    let d = features.dim();
    let stages = stage_datasets(&set.transitions, set.periods, horizon)?;
    let w = horizon as f64 * (d as f64).sqrt();
    let radius = bonus_beta_from_radius(horizon, d, set.transitions.len(), 1.0, 0.05, w, 1.0)?;

    for beta in [0.0, 0.1 * radius, radius] {
        let policy = train_pevi(&stages, features, 1.0, beta, horizon)?;
        let first = policy.greedy(1, &set.transitions[0].s.to_vec())?;
        let agent = Policy::Pevi(Box::new(LearnedPevi { policy, params: Some(fit.params.clone()), mode: StateMode::QIsing }));
        let report = rollout_all(&config, &[("pevi".to_string(), agent)], horizon, 20, 4)?;
        let p = &report.policies[0];
        println!("beta {beta:8.3}: first bin {first}, welfare {:.3} ± {:.3}", p.welfare_mean, p.welfare_std);
    }
    Ok(())
}
