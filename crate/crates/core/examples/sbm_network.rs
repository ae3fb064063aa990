//! Generate a four-block stochastic block model and describe its bins.

use qising::graph::{gen_sbm, modularity};

fn main() -> qising::Result<()> {
    let (graph, bins) = gen_sbm(&[75, 75, 25, 25], 0.1, 0.01, 7)?;
    println!("{} nodes, {} edges", graph.n(), graph.edge_count());
    for b in 0..bins.k() {
        let degrees: Vec<usize> = bins.members(b).iter().map(|&v| graph.neighbors(v).len()).collect();
        let mean = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
        println!("bin {b}: {} nodes, mean degree {mean:.2}", degrees.len());
    }
    println!("modularity of the planted blocks: {:.3}", modularity(&graph, &bins)?);
    Ok(())
}
