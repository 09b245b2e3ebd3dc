//! Commonsense concept graph: assertion-dump parsing, relation filtering, and
//! construction of the weighted directed graph over seed concepts.

mod graph;
mod parse;


pub use graph::{
    build_seed_graph, expand_one_hop, load_graph, normalize_adjacency, save_graph, ConceptGraph,
    DEFAULT_VERB_RELATIONS,
};
pub use parse::{parse_assertions, parse_assertions_path, ParsedDump};

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// One surviving dump line: a directed, typed edge between two concept tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assertion {
    pub relation: String,
    pub start: String,
    pub end: String,
    pub language: String,
}

/// Curated relation list grouped by category.
pub const FILTERED_RELATIONS: [(&str, &str); 16] = [
    ("AtLocation", "Spatial"),
    ("LocatedNear", "Spatial"),
    ("HasSubevent", "Temporal"),
    ("HasFirstSubevent", "Temporal"),
    ("HasLastSubevent", "Temporal"),
    ("HasPrerequisite", "Temporal"),
    ("UsedFor", "Functional"),
    ("Causes", "Causal"),
    ("MotivatedByGoal", "Motivation"),
    ("ObstructedBy", "Motivation"),
    ("CreatedBy", "Other"),
    ("MadeOf", "Other"),
    ("HasA", "Physical"),
    ("HasProperty", "Physical"),
    ("Antonym", "Physical"),
    ("SimilarTo", "Physical"),
];

const SPATIAL: [&str; 2] = ["AtLocation", "LocatedNear"];
const TEMPORAL: [&str; 4] = ["HasSubevent", "HasFirstSubevent", "HasLastSubevent", "HasPrerequisite"];

/// Named relation subsets selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationSetName {
    Spatial,
    Temporal,
    SpatialTemporal,
    Filtered,
    FilteredNonSt,
    All,
}

impl RelationSetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            RelationSetName::Spatial => "S",
            RelationSetName::Temporal => "T",
            RelationSetName::SpatialTemporal => "ST",
            RelationSetName::Filtered => "F",
            RelationSetName::FilteredNonSt => "F-ST",
            RelationSetName::All => "All",
        }
    }
}

impl FromStr for RelationSetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(RelationSetName::Spatial),
            "T" => Ok(RelationSetName::Temporal),
            "ST" => Ok(RelationSetName::SpatialTemporal),
            "F" => Ok(RelationSetName::Filtered),
            "F-ST" => Ok(RelationSetName::FilteredNonSt),
            "All" => Ok(RelationSetName::All),
            other => Err(Error::config(format!(
                "unknown relation set '{other}' (expected S, T, ST, F, F-ST, or All)"
            ))),
        }
    }
}

impl fmt::Display for RelationSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A relation filter: one of the named subsets or an explicit list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RelationSet {
    Named(RelationSetName),
    Explicit(BTreeSet<String>),
}

impl RelationSet {
    pub fn named(name: RelationSetName) -> Self {
        RelationSet::Named(name)
    }

    pub fn explicit<I: IntoIterator<Item = S>, S: Into<String>>(relations: I) -> Self {
        RelationSet::Explicit(relations.into_iter().map(Into::into).collect())
    }

    /// The concrete relations this set admits; `None` means "keep everything".
    pub fn members(&self) -> Option<BTreeSet<String>> {
        let from = |names: &[&str]| names.iter().map(|s| s.to_string()).collect();
        match self {
            RelationSet::Named(RelationSetName::Spatial) => Some(from(&SPATIAL)),
            RelationSet::Named(RelationSetName::Temporal) => Some(from(&TEMPORAL)),
            RelationSet::Named(RelationSetName::SpatialTemporal) => {
                let mut s: BTreeSet<String> = from(&SPATIAL);
                s.extend(TEMPORAL.iter().map(|r| r.to_string()));
                Some(s)
            }
            RelationSet::Named(RelationSetName::Filtered) => {
                Some(FILTERED_RELATIONS.iter().map(|(r, _)| r.to_string()).collect())
            }
            RelationSet::Named(RelationSetName::FilteredNonSt) => {
                let mut s: BTreeSet<String> =
                    FILTERED_RELATIONS.iter().map(|(r, _)| r.to_string()).collect();
                for r in SPATIAL.iter().chain(TEMPORAL.iter()) {
                    s.remove(*r);
                }
                Some(s)
            }
            RelationSet::Named(RelationSetName::All) => None,
            RelationSet::Explicit(set) => Some(set.clone()),
        }
    }

    pub fn keeps(&self, relation: &str) -> bool {
        match self.members() {
            None => true,
            Some(set) => set.contains(relation),
        }
    }

    pub fn label(&self) -> String {
        match self {
            RelationSet::Named(n) => n.to_string(),
            RelationSet::Explicit(set) => {
                format!("explicit:{}", set.iter().cloned().collect::<Vec<_>>().join(","))
            }
        }
    }
}

/// Keeps only assertions whose relation the set admits.
pub fn filter_relations(assertions: Vec<Assertion>, set: &RelationSet) -> Vec<Assertion> {
    match set.members() {
        None => assertions,
        Some(members) => assertions
            .into_iter()
            .filter(|a| members.contains(a.relation.as_str()))
            .collect(),
    }
}

/// Lowercases and underscore-joins a concept token.
pub fn normalize_token(token: &str) -> String {
    token.trim().to_lowercase().replace(char::is_whitespace, "_")
}
