//! Roll out the topological baselines on common random numbers and write the
//! per-period report.

use qising::diffusion::SisConfig;
use qising::eval::rollout_all;
use qising::graph::gen_sbm;
use qising::policies::Policy;

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[75, 75, 25, 25], 0.1, 0.01, 1)?;
    let lir = Policy::lir(&graph);
    let config = SisConfig::new(graph, bins, vec![0.010, 0.012, 0.1, 0.12], vec![0.4, 0.4, 0.2, 0.2])?;
    let policies: Vec<(String, Policy)> = [Policy::RandomBin, Policy::Degree, Policy::DegreeBin, lir]
        .into_iter()
        .map(|p| (p.kind().to_string(), p))
        .collect();
    let report = rollout_all(&config, &policies, 25, 50, 8)?;
    for p in &report.policies {
        println!("{:<11} welfare {:.3} ± {:.3}, last period {:.3}", p.policy, p.welfare_mean, p.welfare_std, p.mean[24]);
    }
    report.write_csv(std::io::stdout().lock())
}
