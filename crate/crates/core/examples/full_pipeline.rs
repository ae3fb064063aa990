//! The whole pipeline from a config file: network, panel, fit, training and
//! evaluation, with every artifact written under the run directory.

use std::path::PathBuf;

use qising::pipeline::{run_pipeline, RunConfig};

fn main() -> qising::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "configs/sbm_scaled.json".into());
    let mut config = RunConfig::load(&path)?;
    config.out_dir = std::env::temp_dir().join("qising_full_pipeline");
    let report = run_pipeline(&config)?;
    for p in &report.policies {
        println!("{:<11} welfare {:.3} ± {:.3}", p.policy, p.welfare_mean, p.welfare_std);
    }
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}
