//! From a logged panel to a CQL agent: fit the Ising model, build Q-Ising
//! transitions, train, and compare against random-bin seeding.

use qising::diffusion::{generate_panel, SisConfig};
use qising::eval::rollout_all;
use qising::graph::gen_sbm;
use qising::ising::{fit_emvs, EmvsOptions, PriorSpec};
use qising::policies::{LearnedQ, Policy};
use qising::rl::{build_transitions, train_cql_traced, CqlHyper, StateMode};

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[75, 75, 25, 25], 0.1, 0.01, 1)?;
    let config = SisConfig::new(graph.clone(), bins.clone(), vec![0.010, 0.012, 0.1, 0.12], vec![0.4, 0.4, 0.2, 0.2])?;
    let panel = generate_panel(&config, &Policy::RandomBin, 100, 2, None)?;
    let fit = fit_emvs(&panel, &graph, &bins, &PriorSpec::default(), &EmvsOptions::default())?;
    let set = build_transitions(&panel, Some(&fit.params), &graph, &bins, StateMode::QIsing)?;
    println!("{} transitions ({} periods without a seed)", set.transitions.len(), set.skipped);

    let hyper = CqlHyper { max_steps: 5000, ..CqlHyper::default() };
    let (q, summary) = train_cql_traced(&set.transitions, &hyper, 3)?;
    println!("trained {} steps over {} epochs, last epoch loss {:.5}", summary.steps, summary.epochs, summary.epoch_losses.last().unwrap());

    let learned = Policy::LearnedQ(Box::new(LearnedQ { q, params: Some(fit.params), mode: StateMode::QIsing }));
    let policies = vec![("q_ising".to_string(), learned), ("random_bin".to_string(), Policy::RandomBin)];
    let report = rollout_all(&config, &policies, 25, 20, 4)?;
    for p in &report.policies {
        println!("{:<10} welfare {:.3} ± {:.3}", p.policy, p.welfare_mean, p.welfare_std);
    }
    Ok(())
}
