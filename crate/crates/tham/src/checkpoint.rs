//! Binary model checkpoints.
//!
//! Layout: magic `THAM`, u32 format version, u32 entry count, then
//! length-prefixed named matrices (u32 name length, UTF-8 name, u32
//! rows, u32 cols, row-major f64 little-endian values), then a JSON
//! trailer with the config snapshot, vocabularies, embedded ontology,
//! source paths, and the best validation loss.
//!
//! Entries cover every trainable parameter, the normalization running
//! statistics, both co-occurrence graphs, and the eval-mode graph
//! features (`derived.*`), so prediction needs neither the training
//! data nor the ontology file. Everything is written and read back
//! bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cograph::CoGraphs;
use crate::cohort::Vocab;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Tham;
use crate::ontology::OntologyTree;
use crate::tensor::Phase;

const MAGIC: &[u8; 4] = b"THAM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: BTreeMap<String, String>,
    codes: Vec<String>,
    drugs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    ontology_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tree: Option<OntologyTree>,
    best_valid_loss: f64,
}

/// A checkpoint read back from disk.
pub struct Loaded {
    pub model: Tham,
    pub best_valid_loss: f64,
    pub ontology_path: Option<String>,
    /// Eval-mode code features exactly as saved, |C| x m.
    pub code_features: Array2<f64>,
    /// Eval-mode drug features exactly as saved.
    pub drug_features: Array2<f64>,
}

fn write_entry<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn stat_entries(model: &Tham) -> Vec<(String, Array1<f64>)> {
    let mut out = Vec::new();
    for (l, layer) in model.gnn_layers().iter().enumerate() {
        for (side, bn) in [("bn_c", &layer.bn_c), ("bn_d", &layer.bn_d)] {
            out.push((format!("gnn.{l}.{side}.running_mean"), bn.state.running_mean.borrow().clone()));
            out.push((format!("gnn.{l}.{side}.running_var"), bn.state.running_var.borrow().clone()));
        }
    }
    out
}

/// Write the model, its best validation loss, and the derived
/// eval-mode features to `path`.
pub fn save(
    model: &Tham,
    best_valid_loss: f64,
    ontology_path: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (code_feats, drug_feats) = model.graph_features(Phase::Eval)?;
    let stats = stat_entries(model);
    let n_entries = model.params.len() + stats.len() + 4;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(n_entries as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        let v = tensor.values();
        let (r, c) = v.dim();
        write_entry(&mut w, name, r, c, v.as_slice().expect("params are standard layout"))?;
    }
    for (name, stat) in &stats {
        write_entry(&mut w, name, 1, stat.len(), stat.as_slice().expect("contiguous"))?;
    }
    for (name, m) in [("graph.b_dc", &model.graphs.b_dc), ("graph.a_cc", &model.graphs.a_cc)] {
        write_entry(&mut w, name, m.nrows(), m.ncols(), m.as_slice().expect("contiguous"))?;
    }
    for (name, t) in [("derived.code_features", &code_feats), ("derived.drug_features", &drug_feats)] {
        let v = t.values();
        let (r, c) = v.dim();
        write_entry(&mut w, name, r, c, v.as_slice().expect("contiguous"))?;
    }

    let trailer = Trailer {
        config: model.config.to_map(),
        codes: model.codes.names().to_vec(),
        drugs: model.drugs.names().to_vec(),
        ontology_path: ontology_path.map(str::to_string),
        tree: model.tree.clone(),
        best_valid_loss,
    };
    serde_json::to_writer(&mut w, &trailer)
        .map_err(|e| Error::Config(format!("checkpoint trailer: {e}")))?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Config(format!("checkpoint truncated reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_entries<R: Read>(r: &mut R, count: usize) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut entries = BTreeMap::new();
    for i in 0..count {
        let name_len = read_u32(r, "entry name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Config(format!("checkpoint truncated in entry {i}: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Config(format!("checkpoint entry {i} name is not UTF-8")))?;
        let rows = read_u32(r, "entry rows")? as usize;
        let cols = read_u32(r, "entry cols")? as usize;
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Config(format!("checkpoint truncated in '{name}': {e}")))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Config(format!("checkpoint entry '{name}': {e}")))?;
        if entries.insert(name.clone(), arr).is_some() {
            return Err(Error::Config(format!("checkpoint repeats entry '{name}'")));
        }
    }
    Ok(entries)
}

/// Read a checkpoint and rebuild the model with every array restored
/// bit-exactly.
pub fn load(path: impl AsRef<Path>) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Config(format!("checkpoint too short for its magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Config("not a THAM checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Config(format!(
            "checkpoint format version {version} is not supported (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r, "entry count")? as usize;
    let mut entries = read_entries(&mut r, count)?;
    let mut trailer_raw = Vec::new();
    r.read_to_end(&mut trailer_raw)?;
    let trailer: Trailer = serde_json::from_slice(&trailer_raw)
        .map_err(|e| Error::Config(format!("checkpoint trailer: {e}")))?;

    let config = ModelConfig::from_map(&trailer.config)?;
    let codes = Vocab::from_names(&trailer.codes);
    let drugs = Vocab::from_names(&trailer.drugs);

    let mut take = |name: &str| {
        entries
            .remove(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing entry '{name}'")))
    };
    let b_dc = take("graph.b_dc")?;
    let a_cc = take("graph.a_cc")?;
    let code_features = take("derived.code_features")?;
    let drug_features = take("derived.drug_features")?;
    let graphs = CoGraphs {
        counts_cc: Array2::zeros(a_cc.dim()),
        b_dc,
        a_cc,
        lambda: config.lambda,
    };

    let model = Tham::new(config, codes, drugs, trailer.tree.clone(), graphs)?;
    for (name, tensor) in model.params.iter() {
        let arr = entries
            .remove(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter '{name}'")))?;
        if arr.dim() != tensor.shape() {
            return Err(Error::shape("checkpoint load", arr.dim(), tensor.shape()));
        }
        tensor.values_mut().assign(&arr);
    }
    for (l, layer) in model.gnn_layers().iter().enumerate() {
        for (side, bn) in [("bn_c", &layer.bn_c), ("bn_d", &layer.bn_d)] {
            for (kind, cell) in [
                ("running_mean", &bn.state.running_mean),
                ("running_var", &bn.state.running_var),
            ] {
                let name = format!("gnn.{l}.{side}.{kind}");
                let arr = entries
                    .remove(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing '{name}'")))?;
                if arr.dim() != (1, cell.borrow().len()) {
                    return Err(Error::shape("checkpoint load", arr.dim(), (1, cell.borrow().len())));
                }
                cell.borrow_mut().assign(&arr.row(0));
            }
        }
    }
    if let Some(stray) = entries.keys().next() {
        return Err(Error::Config(format!("checkpoint carries unknown entry '{stray}'")));
    }

    Ok(Loaded {
        model,
        best_valid_loss: trailer.best_valid_loss,
        ontology_path: trailer.ontology_path,
        code_features,
        drug_features,
    })
}
