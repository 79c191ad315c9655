//! Hierarchical code embeddings: every leaf code's vector is the
//! concatenation of its ancestor chain's blocks, so codes that share a
//! parent share most of their representation and rare codes borrow
//! statistical strength from their family.
//!
//!     cargo run --example hierarchy_sharing

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use tham::cohort::Vocab;
use tham::ontology::build_tree;
use tham::tensor::Tensor;

fn main() -> tham::Result<()> {
    // A toy ICD-ish hierarchy. Edge lists are child<TAB>parent rows when
    // they come from a file; here we build them in memory.
    let edges: Vec<(String, String)> = [
        ("428.0", "428"),
        ("428.1", "428"),
        ("428.9", "428"),
        ("410.0", "410"),
        ("410.1", "410"),
        ("428", "circulatory"),
        ("410", "circulatory"),
        ("circulatory", "ROOT"),
    ]
    .iter()
    .map(|(c, p)| (c.to_string(), p.to_string()))
    .collect();

    let leaves: Vec<String> =
        ["428.0", "428.1", "428.9", "410.0", "410.1"].map(String::from).to_vec();
    let vocab = Vocab::from_names(&leaves);
    let tree = build_tree("<inline>", &edges, &vocab, 3)?;
    println!("tree depth {}, level sizes {:?}", tree.depth, tree.level_sizes);

    // One trainable matrix per level; a leaf's full embedding gathers one
    // row from each along its path.
    let m = 4;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let levels: Vec<Tensor> = tree
        .level_sizes
        .iter()
        .map(|&rows| Tensor::param(Array2::from_shape_fn((rows, m), |_| rng.gen_range(-1.0..1.0))))
        .collect();
    let embedded = tree.assemble(&levels)?;
    let rows = embedded.values();

    let shared = (tree.depth - 1) * m;
    let agree = |a: usize, b: usize| (0..shared).filter(|&j| rows[(a, j)] == rows[(b, j)]).count();
    println!("\nembedding width {} = {} levels x {m} columns", rows.ncols(), tree.depth);
    println!("428.0 vs 428.1 share {}/{} ancestor columns", agree(0, 1), shared);
    println!("428.0 vs 410.0 share {}/{} ancestor columns", agree(0, 3), shared);

    // Gradient flows back through the gather: nudging the "428" row moves
    // every 428.* child and nothing else.
    let parent_row = tree.level_names[1].iter().position(|n| n == "428").unwrap();
    let mut nudged = levels[1].values().clone();
    nudged[(parent_row, 0)] += 0.25;
    let mut levels2 = levels.clone();
    levels2[1] = Tensor::param(nudged);
    let moved = tree.assemble(&levels2)?;
    for (i, name) in vocab.names().iter().enumerate() {
        let delta: f64 = (0..rows.ncols())
            .map(|j| (moved.values()[(i, j)] - rows[(i, j)]).abs())
            .sum();
        println!("  {name}: moved {delta:.2}");
    }
    Ok(())
}
