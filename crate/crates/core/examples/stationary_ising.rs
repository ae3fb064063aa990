//! Stationary law of the synchronous Ising chain on four nodes: the log odds
//! of adding one adopter are not constant, unlike an equilibrium Ising model.

use qising::eval::synchronous_stationary;

fn main() -> qising::Result<()> {
    let st = synchronous_stationary(4, 1.0, 0.0)?;
    println!("converged in {} iterations, residual {:.1e}", st.iterations, st.residual);
    for (m, d) in st.delta.iter().enumerate() {
        println!("log mu_{}/mu_{m} = {d:.4}", m + 1);
    }
    let gaps: Vec<String> = st.delta.windows(2).map(|w| format!("{:.4}", w[1] - w[0])).collect();
    println!("successive differences: {}", gaps.join(", "));
    Ok(())
}
