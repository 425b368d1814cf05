use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, KnowledgeGraph};

/// The eight supported terminologies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodingSystem {
    #[serde(rename = "ICD9")]
    Icd9,
    #[serde(rename = "ICD10CM")]
    Icd10Cm,
    #[serde(rename = "ICD10PCS")]
    Icd10Pcs,
    #[serde(rename = "SNOMEDCT")]
    SnomedCt,
    #[serde(rename = "ATC")]
    Atc,
    #[serde(rename = "NDC")]
    Ndc,
    #[serde(rename = "CPT")]
    Cpt,
    #[serde(rename = "RXNORM")]
    RxNorm,
}

impl CodingSystem {
    pub const ALL: [CodingSystem; 8] = [
        CodingSystem::Icd9,
        CodingSystem::Icd10Cm,
        CodingSystem::Icd10Pcs,
        CodingSystem::SnomedCt,
        CodingSystem::Atc,
        CodingSystem::Ndc,
        CodingSystem::Cpt,
        CodingSystem::RxNorm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CodingSystem::Icd9 => "ICD9",
            CodingSystem::Icd10Cm => "ICD10CM",
            CodingSystem::Icd10Pcs => "ICD10PCS",
            CodingSystem::SnomedCt => "SNOMEDCT",
            CodingSystem::Atc => "ATC",
            CodingSystem::Ndc => "NDC",
            CodingSystem::Cpt => "CPT",
            CodingSystem::RxNorm => "RXNORM",
        }
    }

    /// Code count per system in the released full vocabulary (617,490 codes).
    pub fn reference_count(self) -> usize {
        match self {
            CodingSystem::SnomedCt => 303_325,
            CodingSystem::Icd10Cm => 81_184,
            CodingSystem::RxNorm => 81_151,
            CodingSystem::Icd10Pcs => 61_644,
            CodingSystem::Ndc => 54_560,
            CodingSystem::Icd9 => 18_365,
            CodingSystem::Cpt => 10_602,
            CodingSystem::Atc => 6_659,
        }
    }
}

impl fmt::Display for CodingSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CodingSystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CodingSystem::ALL
            .into_iter()
            .find(|sys| sys.tag() == s)
            .ok_or_else(|| format!("unknown coding system {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalCode {
    pub code_id: String,
    pub system: CodingSystem,
    pub description: String,
    /// Knowledge-graph node ids, sorted and de-duplicated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kg_nodes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeRecord {
    code_id: String,
    system: String,
    description: String,
}

/// Validated set of codes keyed by system-prefixed `code_id`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeRegistry {
    codes: BTreeMap<String, MedicalCode>,
    counts: BTreeMap<CodingSystem, usize>,
}

impl CodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a code, enforcing the registry invariants.
    pub fn insert(&mut self, code: MedicalCode) -> Result<(), String> {
        let prefix = format!("{}:", code.system.tag());
        if !code.code_id.starts_with(&prefix) || code.code_id.len() == prefix.len() {
            return Err(format!(
                "code_id {:?} must be prefixed with {prefix:?}",
                code.code_id
            ));
        }
        if code.description.trim().is_empty() {
            return Err(format!("empty description for {}", code.code_id));
        }
        if self.codes.contains_key(&code.code_id) {
            return Err(format!("duplicate code_id {}", code.code_id));
        }
        *self.counts.entry(code.system).or_default() += 1;
        self.codes.insert(code.code_id.clone(), code);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, code_id: &str) -> Option<&MedicalCode> {
        self.codes.get(code_id)
    }

    pub fn contains(&self, code_id: &str) -> bool {
        self.codes.contains_key(code_id)
    }

    /// Codes in ascending `code_id` order.
    pub fn iter(&self) -> impl Iterator<Item = &MedicalCode> {
        self.codes.values()
    }

    pub fn code_ids(&self) -> impl Iterator<Item = &str> {
        self.codes.keys().map(String::as_str)
    }

    pub fn count(&self, system: CodingSystem) -> usize {
        self.counts.get(&system).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<CodingSystem, usize> {
        &self.counts
    }

    /// Codes with no knowledge-graph mapping, in `code_id` order.
    pub fn unmapped(&self) -> Vec<&str> {
        self.codes
            .values()
            .filter(|c| c.kg_nodes.is_empty())
            .map(|c| c.code_id.as_str())
            .collect()
    }

    pub(crate) fn set_kg_nodes(&mut self, code_id: &str, nodes: Vec<String>) {
        if let Some(code) = self.codes.get_mut(code_id) {
            code.kg_nodes = nodes;
        }
    }

    /// Checks that every mapped node exists in `kg`.
    pub fn check_against(&self, kg: &KnowledgeGraph) -> Result<(), String> {
        for code in self.codes.values() {
            if let Some(missing) = code.kg_nodes.iter().find(|n| kg.node_index(n).is_none()) {
                return Err(format!("{} maps to unknown node {missing}", code.code_id));
            }
        }
        Ok(())
    }
}

/// Reads a line-delimited JSON codes file.
pub fn load_codes(path: &Path) -> Result<CodeRegistry, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut registry = CodeRegistry::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |message: String| CorpusError::Ingest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: CodeRecord =
            serde_json::from_str(line).map_err(|e| ingest(format!("bad record: {e}")))?;
        let system = record.system.parse::<CodingSystem>().map_err(ingest)?;
        registry
            .insert(MedicalCode {
                code_id: record.code_id,
                system,
                description: record.description,
                kg_nodes: Vec::new(),
            })
            .map_err(ingest)?;
    }
    Ok(registry)
}

pub fn write_codes(path: &Path, registry: &CodeRegistry) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for code in registry.iter() {
        let line = serde_json::json!({
            "code_id": code.code_id,
            "system": code.system.tag(),
            "description": code.description,
        });
        writeln!(out, "{line}").expect("write to Vec");
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Result of applying a mapping file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MappingReport {
    pub mapped_codes: usize,
    pub mapping_rows: usize,
    pub unmapped: Vec<String>,
}

/// Applies a `code_id\tnode_id` mapping file to `registry`.
pub fn load_mapping(
    path: &Path,
    mut registry: CodeRegistry,
    kg: &KnowledgeGraph,
) -> Result<(CodeRegistry, MappingReport), CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut nodes: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |message: String| CorpusError::Ingest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [code_id, node_id] = fields[..] else {
            return Err(ingest(format!("expected 2 tab-separated fields, got {}", fields.len())));
        };
        if !registry.contains(code_id) {
            return Err(ingest(format!("mapping references unknown code {code_id}")));
        }
        if kg.node_index(node_id).is_none() {
            return Err(ingest(format!("mapping references unknown node {node_id}")));
        }
        nodes
            .entry(code_id.to_string())
            .or_default()
            .insert(node_id.to_string());
        rows += 1;
    }
    let mapped_codes = nodes.len();
    for (code_id, set) in nodes {
        registry.set_kg_nodes(&code_id, set.into_iter().collect());
    }
    let unmapped = registry.unmapped().into_iter().map(str::to_string).collect();
    Ok((
        registry,
        MappingReport {
            mapped_codes,
            mapping_rows: rows,
            unmapped,
        },
    ))
}

pub fn write_mapping(path: &Path, registry: &CodeRegistry) -> Result<(), CorpusError> {
    let mut out = String::new();
    for code in registry.iter() {
        for node in &code.kg_nodes {
            out.push_str(&code.code_id);
            out.push('\t');
            out.push_str(node);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}
