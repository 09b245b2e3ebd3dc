//! Seed-graph assembly, row normalization, one-hop expansion, and graph files.

use super::{normalize_token, Assertion};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};
use crate::util::atomic_write;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

/// Relations treated as carrying action information for one-hop expansion.
pub const DEFAULT_VERB_RELATIONS: [&str; 4] = ["UsedFor", "CapableOf", "Causes", "MotivatedByGoal"];

/// Weighted directed graph over concept tokens.
///
/// `counts` is the raw edge-count matrix (row = source). The normalized
/// adjacency and the per-relation stacks are filled in by
/// [`normalize_adjacency`] / the `relational` build flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGraph {
    pub concepts: Vec<String>,
    pub relation_set: String,
    /// Raw directed edge counts, row-major n x n.
    pub counts: Vec<u32>,
    /// Row-stochastic adjacency (self-loops on empty rows).
    pub adjacency: Option<Tensor>,
    /// Per-relation raw counts; summing over relations reproduces `counts`.
    pub relational_counts: Option<Vec<(String, Vec<u32>)>>,
    /// Per-relation row-normalized adjacencies.
    pub relational_adjacency: Option<Vec<(String, Tensor)>>,
}

impl ConceptGraph {
    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn count(&self, from: usize, to: usize) -> u32 {
        self.counts[from * self.concepts.len() + to]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == token)
    }

    /// The normalized adjacency; call [`normalize_adjacency`] first.
    pub fn adjacency(&self) -> Result<&Tensor> {
        self.adjacency
            .as_ref()
            .ok_or_else(|| Error::contract("graph adjacency not normalized yet"))
    }
}

fn count_edges(
    assertions: &[Assertion],
    index: &HashMap<String, usize>,
    n: usize,
    relational: bool,
) -> (Vec<u32>, Option<Vec<(String, Vec<u32>)>>) {
    let mut counts = vec![0u32; n * n];
    let mut per_relation: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for a in assertions {
        let (Some(&i), Some(&j)) = (index.get(&a.start), index.get(&a.end)) else {
            continue;
        };
        if i == j {
            continue;
        }
        counts[i * n + j] += 1;
        if relational {
            per_relation.entry(a.relation.clone()).or_insert_with(|| vec![0u32; n * n])[i * n + j] += 1;
        }
    }
    let stack = relational.then(|| per_relation.into_iter().collect());
    (counts, stack)
}

/// Builds the edge-count graph over exactly the given seed tokens.
///
/// Assertions touching non-seed concepts are discarded; self-edges are not
/// counted. With `relational` set, per-relation count matrices are kept too.
pub fn build_seed_graph(
    assertions: &[Assertion],
    seeds: &[String],
    relational: bool,
) -> Result<ConceptGraph> {
    let seeds: Vec<String> = seeds.iter().map(|s| normalize_token(s)).collect();
    let mut seen = BTreeSet::new();
    for s in &seeds {
        if !seen.insert(s.clone()) {
            return Err(Error::config(format!("duplicate seed concept '{s}'")));
        }
    }
    let n = seeds.len();
    let index: HashMap<String, usize> =
        seeds.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let (counts, relational_counts) = count_edges(assertions, &index, n, relational);
    Ok(ConceptGraph {
        concepts: seeds,
        relation_set: String::new(),
        counts,
        adjacency: None,
        relational_counts,
        relational_adjacency: None,
    })
}

/// Expands the node set by concepts one verb-relation edge away from a seed
/// (either direction), then counts edges among the expanded set.
///
/// Added concepts follow the seeds in alphabetical order.
pub fn expand_one_hop(
    assertions: &[Assertion],
    seeds: &[String],
    verb_relations: &[String],
    relational: bool,
) -> Result<ConceptGraph> {
    if verb_relations.is_empty() {
        return Err(Error::contract("one-hop expansion requires a non-empty verb relation set"));
    }
    let seeds: Vec<String> = seeds.iter().map(|s| normalize_token(s)).collect();
    let seed_set: BTreeSet<&String> = seeds.iter().collect();
    let verbs: BTreeSet<&str> = verb_relations.iter().map(|s| s.as_str()).collect();

    let mut added: BTreeSet<String> = BTreeSet::new();
    for a in assertions {
        if !verbs.contains(a.relation.as_str()) {
            continue;
        }
        if seed_set.contains(&a.start) && !seed_set.contains(&a.end) {
            added.insert(a.end.clone());
        }
        if seed_set.contains(&a.end) && !seed_set.contains(&a.start) {
            added.insert(a.start.clone());
        }
    }
    let mut nodes = seeds;
    nodes.extend(added);
    build_seed_graph(assertions, &nodes, relational)
}

fn normalize_rows(counts: &[u32], n: usize) -> Tensor {
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &counts[i * n..(i + 1) * n];
        let degree: u32 = row.iter().sum();
        if degree == 0 {
            a[i * n + i] = 1.0;
        } else {
            for j in 0..n {
                a[i * n + j] = row[j] as f64 / degree as f64;
            }
        }
    }
    Tensor::matrix(n, n, a).expect("square matrix")
}

/// Produces the row-stochastic adjacency from raw counts. Rows with zero
/// out-degree get a self-loop so every row still sums to one. The same rule
/// is applied to each per-relation matrix when a relational stack is present.
pub fn normalize_adjacency(mut graph: ConceptGraph) -> ConceptGraph {
    let n = graph.concepts.len();
    graph.adjacency = Some(normalize_rows(&graph.counts, n));
    graph.relational_adjacency = graph.relational_counts.as_ref().map(|stack| {
        stack
            .iter()
            .map(|(rel, counts)| (rel.clone(), normalize_rows(counts, n)))
            .collect()
    });
    graph
}

#[derive(Serialize, Deserialize)]
struct GraphManifest {
    concepts: Vec<String>,
    relation_set: String,
    matrix_path: String,
    config: serde_json::Value,
}

/// Writes the manifest JSON plus a binary matrix sidecar next to it.
pub fn save_graph(path: &Path, graph: &ConceptGraph, config: serde_json::Value) -> Result<()> {
    let sidecar_name = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph")
    );
    let sidecar = path.with_file_name(&sidecar_name);

    let n = graph.concepts.len();
    let counts = Tensor::matrix(n, n, graph.counts.iter().map(|&c| c as f64).collect())?;
    let mut entries: Vec<(String, Tensor)> = vec![("counts".to_string(), counts)];
    if let Some(stack) = &graph.relational_counts {
        for (rel, counts) in stack {
            let t = Tensor::matrix(n, n, counts.iter().map(|&c| c as f64).collect())?;
            entries.push((format!("rel:{rel}"), t));
        }
    }
    let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_checkpoint(&sidecar, &refs)?;

    let manifest = GraphManifest {
        concepts: graph.concepts.clone(),
        relation_set: graph.relation_set.clone(),
        matrix_path: sidecar_name,
        config,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    atomic_write(path, &json)
}

/// Loads a graph manifest and its sidecar, re-deriving normalized adjacencies.
pub fn load_graph(path: &Path) -> Result<ConceptGraph> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let manifest: GraphManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(&display, e))?;
    let sidecar = path.with_file_name(&manifest.matrix_path);
    let records = read_checkpoint(&sidecar)?;

    let n = manifest.concepts.len();
    let mut counts: Option<Vec<u32>> = None;
    let mut stack: Vec<(String, Vec<u32>)> = Vec::new();
    for (name, tensor) in records {
        if tensor.shape() != [n, n] {
            return Err(Error::config(format!(
                "{display}: record '{name}' has shape {:?}, expected [{n}, {n}]",
                tensor.shape()
            )));
        }
        let as_counts: Vec<u32> = tensor.data().iter().map(|&x| x as u32).collect();
        if name == "counts" {
            counts = Some(as_counts);
        } else if let Some(rel) = name.strip_prefix("rel:") {
            stack.push((rel.to_string(), as_counts));
        }
    }
    let counts =
        counts.ok_or_else(|| Error::config(format!("{display}: sidecar has no counts record")))?;
    let graph = ConceptGraph {
        concepts: manifest.concepts,
        relation_set: manifest.relation_set,
        counts,
        adjacency: None,
        relational_counts: (!stack.is_empty()).then_some(stack),
        relational_adjacency: None,
    };
    Ok(normalize_adjacency(graph))
}
