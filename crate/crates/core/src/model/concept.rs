//! Graph-convolutional concept encoder over the commonsense graph.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::kgraph::ConceptGraph;
use crate::tensor::{NodeId, Tape};

/// A concept graph validated for encoding: normalized adjacency available and
/// node count consistent with the initial concept features.
#[derive(Clone, Debug)]
pub struct ConceptBank {
    pub graph: ConceptGraph,
}

impl ConceptBank {
    pub fn new(graph: ConceptGraph) -> Result<Self> {
        graph.adjacency()?;
        Ok(ConceptBank { graph })
    }

    pub fn n_concepts(&self) -> usize {
        self.graph.n_concepts()
    }
}

fn concept_init_node(params: &ModelParams) -> Result<NodeId> {
    params
        .concept_init
        .node_id()
        .ok_or_else(|| Error::contract("concept features not registered on tape"))
}

/// L-layer graph convolution: A . C . W per layer, ReLU between layers and a
/// linear final layer.
pub fn gcn_encode(tape: &mut Tape, params: &ModelParams, bank: &ConceptBank) -> Result<NodeId> {
    if params.gcn_layers.is_empty() {
        return Err(Error::config("model has no graph convolution weights (wrong graph mode?)"));
    }
    if params.concept_init.rows() != bank.n_concepts() {
        return Err(Error::config(format!(
            "graph has {} concepts, parameters were built for {}",
            bank.n_concepts(),
            params.concept_init.rows()
        )));
    }
    let adjacency = tape.leaf(bank.graph.adjacency()?)?;
    let mut h = concept_init_node(params)?;
    let layers = params.gcn_layers.len();
    for (l, w) in params.gcn_layers.iter().enumerate() {
        let w = w.node_id().ok_or_else(|| Error::contract("gcn weight not registered"))?;
        let mixed = tape.matmul(adjacency, h)?;
        h = tape.matmul(mixed, w)?;
        if l + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Relational variant: per layer, sum over relations of A_r . C . W_r.
pub fn rgcn_encode(tape: &mut Tape, params: &ModelParams, bank: &ConceptBank) -> Result<NodeId> {
    if params.rgcn_layers.is_empty() {
        return Err(Error::config("model has no relational convolution weights"));
    }
    if params.concept_init.rows() != bank.n_concepts() {
        return Err(Error::config(format!(
            "graph has {} concepts, parameters were built for {}",
            bank.n_concepts(),
            params.concept_init.rows()
        )));
    }
    let stack = bank.graph.relational_adjacency.as_ref().ok_or_else(|| {
        Error::config("relational encoding requested but the graph has no per-relation stack")
    })?;

    let mut adjacency_nodes = Vec::with_capacity(stack.len());
    for (rel, a) in stack {
        adjacency_nodes.push((rel.as_str(), tape.leaf(a)?));
    }

    let mut h = concept_init_node(params)?;
    let layers = params.rgcn_layers.len();
    for (l, layer) in params.rgcn_layers.iter().enumerate() {
        let mut acc: Option<NodeId> = None;
        for (rel, w) in layer {
            let &(_, a) = adjacency_nodes
                .iter()
                .find(|(name, _)| name == rel)
                .ok_or_else(|| Error::config(format!("graph has no adjacency for relation {rel}")))?;
            let w = w.node_id().ok_or_else(|| Error::contract("rgcn weight not registered"))?;
            let mixed = tape.matmul(a, h)?;
            let term = tape.matmul(mixed, w)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        h = acc.ok_or_else(|| Error::config("relational layer has no relations"))?;
        if l + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}
