//! Fit the dynamic Ising model by EMVS on a panel drawn from known dynamics,
//! then score one-step predictions on held-out periods.

use qising::graph::gen_sbm;
use qising::ising::{fit_emvs, one_step_auc, simulate_panel, EmvsOptions, PriorSpec};
use qising::verify::recovery_truth;

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[20, 20, 20], 0.2, 0.05, 3)?;
    let truth = recovery_truth();
    let panel = simulate_panel(&truth, &graph, &bins, 2000, 5)?;
    let (train, holdout) = (panel.window(1, 1500)?, panel.window(1501, 2000)?);

    let fit = fit_emvs(&train, &graph, &bins, &PriorSpec::default(), &EmvsOptions::default())?;
    println!("EMVS: {} iterations, converged {}", fit.iterations, fit.converged);
    for (b, (est, tru)) in fit.params.gamma.iter().zip(&truth.gamma).enumerate() {
        let row: Vec<String> = est.iter().zip(tru).map(|(e, t)| format!("{e:+.2} ({t:+.1})")).collect();
        println!("couplings into bin {b}: {}", row.join("  "));
    }
    println!("inclusion probabilities: {:.2?}", fit.inclusion);
    println!("held-out AUC {:.3}", one_step_auc(&fit.params, &holdout, &graph, &bins)?);
    Ok(())
}
