use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sdm_core::lattice::{LatticeSpec, Orientation, PortConfig, Site, SiteCategory};

/// Connected random graph with 2..=`max_n` sites and a random port pair.
pub fn random_graph(rng: &mut ChaCha8Rng, max_n: usize) -> LatticeSpec {
    let n = rng.random_range(2..=max_n);
    let sites = (0..n)
        .map(|i| Site {
            index: i,
            x: i as f64,
            y: 0.0,
            category: SiteCategory::Bulk,
            orientation: Orientation::Horizontal,
        })
        .collect();
    // a random spanning tree keeps it connected, extra bonds make loops
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push([rng.random_range(0..i), i]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(0.2) && !edges.contains(&[i, j]) {
                edges.push([i, j]);
            }
        }
    }
    let input = rng.random_range(0..n);
    let output = rng.random_range(0..n);
    LatticeSpec { name: "random".into(), sites, edges, ports: Some(PortConfig { input, output }) }
}
