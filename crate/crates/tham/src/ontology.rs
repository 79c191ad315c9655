//! Code hierarchy: loading the tree from an edge list, padding every
//! code's root-to-leaf path to a uniform depth with virtual nodes, and
//! assembling concatenated per-level embeddings into one row per code.
//!
//! Each code's input embedding is the concatenation of one trainable row
//! per tree level along its path, so codes sharing ancestors share the
//! leading blocks of their embeddings (and the gradients into them).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ROOT_TOKEN: &str = "ROOT";

/// Uniform-depth view of the code hierarchy.
///
/// `leaf_paths[i][h]` is the index into level h's embedding matrix for
/// vocabulary code i; `level_sizes[h]` is that matrix's row count.
/// Shallow codes are extended with per-code virtual descendants, so a
/// virtual row is referenced by exactly one code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyTree {
    pub depth: usize,
    pub level_sizes: Vec<usize>,
    pub leaf_paths: Vec<Vec<u32>>,
    /// Node identifier per (level, index), for diagnostics and export.
    pub level_names: Vec<Vec<String>>,
}

/// Read `child<TAB>parent` edges (parent `ROOT` marks a top-level node)
/// and resolve every vocabulary code to a depth-`h` path.
pub fn load_ontology(path: impl AsRef<Path>, vocab: &Vocab, h: usize) -> Result<OntologyTree> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path)?;
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (child, parent) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&shown, lineno, "expected child<TAB>parent"))?;
        edges.push((child.trim().to_string(), parent.trim().to_string()));
    }
    build_tree(&shown, &edges, vocab, h)
}

/// Resolve an in-memory edge list (1-indexed positions double as line
/// numbers in error messages) into a uniform-depth tree.
pub fn build_tree(
    source: &str,
    edges: &[(String, String)],
    vocab: &Vocab,
    h: usize,
) -> Result<OntologyTree> {
    let shown = source;
    if h == 0 {
        return Err(Error::Config("tree_depth must be at least 1".into()));
    }

    let mut parent_of: HashMap<String, (String, usize)> = HashMap::new();
    for (i, (child, parent)) in edges.iter().enumerate() {
        let lineno = i + 1;
        let (child, parent) = (child.as_str(), parent.as_str());
        if child.is_empty() || parent.is_empty() {
            return Err(Error::parse(shown, lineno, "empty node identifier"));
        }
        if child == ROOT_TOKEN {
            return Err(Error::parse(shown, lineno, "ROOT cannot be a child"));
        }
        if let Some((prev, prev_line)) = parent_of.get(child) {
            if prev != parent {
                return Err(Error::parse(
                    shown,
                    lineno,
                    format!("node {child:?} already has parent {prev:?} from line {prev_line}"),
                ));
            }
            continue; // duplicate identical edge
        }
        parent_of.insert(child.to_string(), (parent.to_string(), lineno));
    }

    let mut levels: Vec<Vocab> = vec![Vocab::new(); h];
    let mut leaf_paths: Vec<Vec<u32>> = Vec::with_capacity(vocab.len());
    for code in vocab.names() {
        if !parent_of.contains_key(code.as_str()) {
            return Err(Error::Config(format!(
                "ontology {shown} does not contain code {code:?}"
            )));
        }
        // walk up to ROOT, collecting [code, parent, ..., top]
        let mut up: Vec<&str> = vec![code];
        let mut seen: std::collections::HashSet<&str> = [code.as_str()].into();
        let mut cur: &str = code;
        loop {
            let (parent, line) = parent_of.get(cur).ok_or_else(|| {
                Error::Config(format!(
                    "ontology {shown}: node {cur:?} (on the path of code {code:?}) has no parent edge"
                ))
            })?;
            if parent == ROOT_TOKEN {
                break;
            }
            if !seen.insert(parent.as_str()) {
                return Err(Error::parse(
                    shown,
                    *line,
                    format!("cycle through node {parent:?} on the path of code {code:?}"),
                ));
            }
            up.push(parent);
            cur = parent;
        }
        let depth = up.len();
        if depth > h {
            return Err(Error::Config(format!(
                "code {code:?} sits at depth {depth}, deeper than tree_depth = {h}"
            )));
        }
        // root-to-leaf order, then pad with a per-code virtual chain
        let mut row = Vec::with_capacity(h);
        for (level, node) in up.iter().rev().enumerate() {
            row.push(levels[level].get_or_insert(node));
        }
        for level in depth..h {
            // '#' never appears in real identifiers here, keeping virtual
            // rows private to this code
            let virtual_name = format!("virtual#{code}#{}", level + 1);
            row.push(levels[level].get_or_insert(&virtual_name));
        }
        leaf_paths.push(row);
    }

    Ok(OntologyTree {
        depth: h,
        level_sizes: levels.iter().map(|v| v.len()).collect(),
        leaf_paths,
        level_names: levels
            .into_iter()
            .map(|v| v.names().to_vec())
            .collect(),
    })
}

/// Write edges in the format `load_ontology` reads.
pub fn write_edge_list(path: impl AsRef<Path>, edges: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (child, parent) in edges {
        writeln!(w, "{child}\t{parent}")?;
    }
    w.flush()?;
    Ok(())
}

impl OntologyTree {
    pub fn n_codes(&self) -> usize {
        self.leaf_paths.len()
    }

    /// Differentiable gather+concatenate: row i of the result is the
    /// concatenation of level h's row `leaf_paths[i][h]` for h = 0..depth.
    /// Gradients accumulate into every selected level row.
    pub fn assemble(&self, level_params: &[Tensor]) -> Result<Tensor> {
        if level_params.len() != self.depth {
            return Err(Error::Config(format!(
                "expected {} level matrices, got {}",
                self.depth,
                level_params.len()
            )));
        }
        for (h, p) in level_params.iter().enumerate() {
            let rows = p.values().nrows();
            if rows != self.level_sizes[h] {
                return Err(Error::Config(format!(
                    "level {h} matrix has {rows} rows, tree wants {}",
                    self.level_sizes[h]
                )));
            }
        }
        let mut blocks = Vec::with_capacity(self.depth);
        for (h, p) in level_params.iter().enumerate() {
            let idx: Vec<usize> = self.leaf_paths.iter().map(|row| row[h] as usize).collect();
            blocks.push(p.gather_rows(&idx)?);
        }
        Tensor::concat_cols(&blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn vocab_of(names: &[&str]) -> Vocab {
        Vocab::from_names(&names.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn shallow_code_gets_virtual_padding_to_depth() {
        let f = write_temp("cat\tROOT\nx\tcat\n");
        let tree = load_ontology(f.path(), &vocab_of(&["x"]), 4).unwrap();
        assert_eq!(tree.leaf_paths[0].len(), 4);
        assert_eq!(tree.level_sizes, vec![1, 1, 1, 1]);
        assert!(tree.level_names[2][0].starts_with("virtual#"));
        assert!(tree.level_names[3][0].starts_with("virtual#"));
    }

    #[test]
    fn depth_one_tree_maps_each_code_to_its_own_node() {
        let f = write_temp("a\tROOT\nb\tROOT\n");
        let tree = load_ontology(f.path(), &vocab_of(&["a", "b"]), 1).unwrap();
        assert_eq!(tree.leaf_paths, vec![vec![0], vec![1]]);
        assert_eq!(tree.level_sizes, vec![2]);
    }

    #[test]
    fn siblings_share_every_level_but_the_last() {
        let f = write_temp("top\tROOT\nmid\ttop\ni\tmid\nj\tmid\n");
        let tree = load_ontology(f.path(), &vocab_of(&["i", "j"]), 3).unwrap();
        assert_eq!(tree.leaf_paths[0][..2], tree.leaf_paths[1][..2]);
        assert_ne!(tree.leaf_paths[0][2], tree.leaf_paths[1][2]);
    }

    #[test]
    fn virtual_chains_are_private_per_code() {
        let f = write_temp("cat\tROOT\nx\tcat\ny\tcat\n");
        let tree = load_ontology(f.path(), &vocab_of(&["x", "y"]), 3).unwrap();
        // both codes pad level 3; their virtual rows must differ
        assert_ne!(tree.leaf_paths[0][2], tree.leaf_paths[1][2]);
        assert_eq!(tree.level_sizes[2], 2);
    }

    #[test]
    fn missing_code_and_depth_overflow_are_reported() {
        let f = write_temp("a\tROOT\nb\ta\nc\tb\n");
        let err = load_ontology(f.path(), &vocab_of(&["nope"]), 3).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        let err = load_ontology(f.path(), &vocab_of(&["c"]), 2).unwrap_err();
        assert!(err.to_string().contains("depth 3"), "{err}");
    }

    #[test]
    fn cycles_and_conflicting_parents_are_reported() {
        let f = write_temp("a\tb\nb\ta\n");
        let err = load_ontology(f.path(), &vocab_of(&["a"]), 4).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
        let f = write_temp("a\tROOT\nx\ta\nx\tROOT\n");
        let err = load_ontology(f.path(), &vocab_of(&["x"]), 2).unwrap_err();
        assert!(err.to_string().contains("already has parent"), "{err}");
    }

    #[test]
    fn assemble_concatenates_selected_level_rows() {
        let f = write_temp("top\tROOT\nmid\ttop\nleaf\tmid\n");
        let tree = load_ontology(f.path(), &vocab_of(&["leaf"]), 3).unwrap();
        let params = vec![
            Tensor::param(array![[1.0, 0.0]]),
            Tensor::param(array![[0.0, 1.0]]),
            Tensor::param(array![[2.0, 2.0]]),
        ];
        let l = tree.assemble(&params).unwrap();
        assert_eq!(
            l.values().row(0).to_vec(),
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]
        );
    }

    #[test]
    fn sibling_rows_agree_on_all_leading_blocks() {
        let f = write_temp("top\tROOT\nmid\ttop\ni\tmid\nj\tmid\nother\ttop\nk\tother\n");
        let vocab = vocab_of(&["i", "j", "k"]);
        let tree = load_ontology(f.path(), &vocab, 3).unwrap();
        let mut rng = rand::rngs::mock::StepRng::new(1, 7);
        use rand::Rng as _;
        let params: Vec<Tensor> = tree
            .level_sizes
            .iter()
            .map(|&n| {
                Tensor::param(ndarray::Array2::from_shape_fn((n, 2), |_| {
                    rng.gen::<u32>() as f64 / u32::MAX as f64
                }))
            })
            .collect();
        let l = tree.assemble(&params).unwrap();
        let v = l.values();
        // siblings i, j share levels 1..2 (4 leading columns), differ after
        assert_eq!(v.row(0).to_vec()[..4], v.row(1).to_vec()[..4]);
        assert_ne!(v.row(0).to_vec()[4..], v.row(1).to_vec()[4..]);
        // k shares only level 1 with i
        assert_eq!(v.row(0).to_vec()[..2], v.row(2).to_vec()[..2]);
        assert_ne!(v.row(0).to_vec()[2..4], v.row(2).to_vec()[2..4]);
    }

    #[test]
    fn gradients_route_to_shared_ancestors_by_descendant_count() {
        let f = write_temp("top\tROOT\ni\ttop\nj\ttop\n");
        let tree = load_ontology(f.path(), &vocab_of(&["i", "j"]), 2).unwrap();
        let params = vec![
            Tensor::param(array![[0.5, 0.5]]),
            Tensor::param(array![[1.0, 1.0], [2.0, 2.0]]),
        ];
        let l = tree.assemble(&params).unwrap();
        l.sum_all().backward();
        // the shared top row feeds both code rows, so its gradient doubles
        assert_eq!(params[0].grad().unwrap(), array![[2.0, 2.0]]);
        assert_eq!(params[1].grad().unwrap(), array![[1.0, 1.0], [1.0, 1.0]]);
    }
}
