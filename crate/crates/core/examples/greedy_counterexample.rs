//! Exact values of the optimal and greedy rules on the three-node network
//! where myopic seeding loses, checked against Monte Carlo rollouts.

use qising::eval::{exact_policy_value, greedy_counterexample, greedy_rule, optimal_rule, sis_monte_carlo};

fn main() -> qising::Result<()> {
    for rho in [0.0, 0.25, 0.5, 0.9] {
        let (config, mdp) = greedy_counterexample(rho)?;
        let best = optimal_rule(&mdp)?;
        let greedy = greedy_rule(&mdp);
        let greedy_value = exact_policy_value(&mdp, &|_, s| greedy[s])?;
        // periods count from 1 here: C first, then A
        let mc = sis_monte_carlo(&config, 2, 100_000, 1, &|h, _| if h == 1 { 2 } else { 0 })?;
        println!(
            "rho {rho:.2}: optimal {:.4} (3+rho), greedy {greedy_value:.4} (2+2rho), Monte Carlo {:.4} ± {:.4}",
            best.value, mc.mean, mc.std_error
        );
    }
    Ok(())
}
