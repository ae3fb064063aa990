//! Recover bins from an unlabeled edge list with edge-betweenness clustering.

use std::io::Cursor;

use qising::graph::{detect_communities, gen_sbm, load_edge_list, modularity};

fn main() -> qising::Result<()> {
    let (planted, truth) = gen_sbm(&[12, 12, 12], 0.6, 0.02, 3)?;

    // round-trip through the text format a survey export would use
    let text: String = planted.edges().iter().map(|(u, v)| format!("{},{}\n", u + 100, v + 100)).collect();
    let list = load_edge_list(Cursor::new(text))?;
    let found = detect_communities(&list.graph, 5)?;

    println!("found {} communities of sizes {:?}", found.k(), found.sizes());
    println!("modularity: found {:.3}, planted {:.3}", modularity(&list.graph, &found)?, modularity(&planted, &truth)?);
    Ok(())
}
