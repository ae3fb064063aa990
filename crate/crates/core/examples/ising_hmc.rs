//! Posterior draws of the dynamic Ising coefficients by HMC.

use qising::graph::gen_sbm;
use qising::ising::{sample_posterior, simulate_panel, PriorSpec};
use qising::verify::recovery_truth;

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[20, 20, 20], 0.2, 0.05, 3)?;
    let truth = recovery_truth();
    let panel = simulate_panel(&truth, &graph, &bins, 400, 9)?;

    let draws = sample_posterior(&panel, &graph, &bins, &PriorSpec::default(), 200, 300, 21)?;
    println!(
        "step size {:.4}, acceptance {:.2}, divergences {}",
        draws.step_size, draws.accept_rate, draws.divergences
    );
    let mean = draws.mean()?;
    let sd = draws.std_dev()?;
    for (i, ((m, s), t)) in mean.to_flat().iter().zip(&sd).zip(truth.to_flat()).enumerate() {
        println!("coef {i:2}: {m:+.3} ± {s:.3} (true {t:+.2})");
    }
    Ok(())
}
