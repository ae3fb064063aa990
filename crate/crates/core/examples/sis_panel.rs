//! Simulate a logged panel under the uniform random-bin policy.

use qising::diffusion::{generate_panel, SisConfig};
use qising::graph::gen_sbm;
use qising::policies::Policy;

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[75, 75, 25, 25], 0.1, 0.01, 1)?;
    let config = SisConfig::new(graph, bins, vec![0.010, 0.012, 0.1, 0.12], vec![0.4, 0.4, 0.2, 0.2])?;
    let panel = generate_panel(&config, &Policy::RandomBin, 100, 11, None)?;

    let mut counts = vec![0usize; config.partition().k()];
    for t in 1..=panel.len() {
        if let Some(v) = panel.action(t) {
            counts[config.partition().bin_of(v)] += 1;
        }
    }
    println!("treatments per bin: {counts:?}");
    for t in (10..=panel.len()).step_by(10) {
        let y = panel.y(t);
        println!("t={t:3} adoption {:.3}", y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64);
    }
    Ok(())
}
