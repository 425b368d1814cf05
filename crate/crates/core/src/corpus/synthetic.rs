//! Seeded desk-scale corpus with known family structure.
//!
//! Each family owns a hub node and a pool of attribute nodes whose types are
//! biased towards two family-preferred labels. Every code gets its own
//! concept node linked to the hub and to a few family attributes, and its
//! text states are drawn around a family-specific Gaussian mean.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_codes, write_kg, write_mapping, CodeRegistry, CodingSystem, CorpusError, KnowledgeGraph, MedicalCode};
use crate::textenc::TextEmbeddingSet;

const TYPE_POOL: [&str; 9] = [
    "anatomy",
    "biological_process",
    "cellular_component",
    "drug",
    "effect/phenotype",
    "exposure",
    "gene/protein",
    "molecular_function",
    "pathway",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub families: usize,
    pub codes_per_family: usize,
    pub seed: u64,
    pub text_dim: usize,
    /// Token states per code.
    pub state_len: usize,
    /// Std of the per-family mean, per dimension.
    pub family_spread: f64,
    /// Std of a code centre around its family mean.
    pub code_spread: f64,
    /// Std of a token state around its code centre.
    pub token_spread: f64,
    pub attrs_per_family: usize,
    pub attrs_per_code: usize,
    /// Probability that a code also links to another family's attribute.
    pub cross_link_prob: f64,
    /// Every n-th code of a family is left without a KG mapping (0 = none).
    pub unmapped_every: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            families: 4,
            codes_per_family: 500,
            seed: 0,
            text_dim: 32,
            state_len: 4,
            family_spread: 1.0,
            code_spread: 0.35,
            token_spread: 0.2,
            attrs_per_family: 12,
            attrs_per_code: 2,
            cross_link_prob: 0.05,
            unmapped_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub registry: CodeRegistry,
    pub kg: KnowledgeGraph,
    pub text: TextEmbeddingSet,
    /// Family index of every code.
    pub families: BTreeMap<String, usize>,
}

/// Paths written by [`SyntheticCorpus::write_to`].
#[derive(Clone, Debug)]
pub struct SyntheticFiles {
    pub codes: PathBuf,
    pub kg_nodes: PathBuf,
    pub kg_edges: PathBuf,
    pub mapping: PathBuf,
    pub text_pooled: PathBuf,
    pub text_states: PathBuf,
    pub families: PathBuf,
}

/// Default-shaped corpus of `families x codes_per_family` codes.
pub fn gen_synthetic(families: usize, codes_per_family: usize, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    SyntheticConfig {
        families,
        codes_per_family,
        seed,
        ..SyntheticConfig::default()
    }
    .generate()
}

fn family_type(rng: &mut ChaCha8Rng, family: usize) -> &'static str {
    if rng.random::<f64>() < 0.8 {
        TYPE_POOL[(2 * family + rng.random_range(0..2)) % TYPE_POOL.len()]
    } else {
        TYPE_POOL[rng.random_range(0..TYPE_POOL.len())]
    }
}

impl SyntheticConfig {
    pub fn generate(&self) -> Result<SyntheticCorpus, CorpusError> {
        if self.families < 2 {
            return Err(CorpusError::Synthetic("need at least 2 families".into()));
        }
        if self.codes_per_family == 0 || self.text_dim == 0 || self.state_len == 0 {
            return Err(CorpusError::Synthetic("empty corpus shape".into()));
        }
        if self.attrs_per_code > self.attrs_per_family {
            return Err(CorpusError::Synthetic("attrs_per_code exceeds attrs_per_family".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");

        let mut nodes: Vec<(String, String)> = Vec::new();
        let mut edges: Vec<(String, String, String)> = Vec::new();
        let attr_id = |f: usize, j: usize| format!("attr:F{f:02}-{j:02}");

        for f in 0..self.families {
            nodes.push((format!("hub:F{f:02}"), "disease".to_string()));
            for j in 0..self.attrs_per_family {
                nodes.push((attr_id(f, j), family_type(&mut rng, f).to_string()));
            }
        }

        let mut registry = CodeRegistry::new();
        let mut families = BTreeMap::new();
        let mut text = TextEmbeddingSet::new(self.text_dim);
        let mut mapping: Vec<(String, String)> = Vec::new();

        for f in 0..self.families {
            let mean: Vec<f64> = (0..self.text_dim)
                .map(|_| unit.sample(&mut rng) * self.family_spread)
                .collect();
            for i in 0..self.codes_per_family {
                let system = CodingSystem::ALL[(f * self.codes_per_family + i) % CodingSystem::ALL.len()];
                let code_id = format!("{}:F{f:02}-{i:04}", system.tag());
                registry
                    .insert(MedicalCode {
                        code_id: code_id.clone(),
                        system,
                        description: format!("synthetic {} code {i} of family {f}", system.tag()),
                        kg_nodes: Vec::new(),
                    })
                    .map_err(CorpusError::Synthetic)?;
                families.insert(code_id.clone(), f);

                let node = format!("c:{code_id}");
                nodes.push((node.clone(), family_type(&mut rng, f).to_string()));
                edges.push((node.clone(), "member_of".into(), format!("hub:F{f:02}")));
                let mut picked = Vec::new();
                while picked.len() < self.attrs_per_code {
                    let j = rng.random_range(0..self.attrs_per_family);
                    if !picked.contains(&j) {
                        picked.push(j);
                    }
                }
                for j in picked {
                    edges.push((node.clone(), "associated_with".into(), attr_id(f, j)));
                }
                if rng.random::<f64>() < self.cross_link_prob {
                    let other = (f + 1 + rng.random_range(0..self.families - 1)) % self.families;
                    let j = rng.random_range(0..self.attrs_per_family);
                    edges.push((node.clone(), "associated_with".into(), attr_id(other, j)));
                }
                let unmapped = self.unmapped_every > 0 && i % self.unmapped_every == self.unmapped_every - 1;
                if !unmapped {
                    mapping.push((code_id.clone(), node));
                }

                let centre: Vec<f64> = mean
                    .iter()
                    .map(|&m| m + unit.sample(&mut rng) * self.code_spread)
                    .collect();
                let mut states = Vec::with_capacity(self.state_len * self.text_dim);
                let mut pooled = vec![0.0f64; self.text_dim];
                for _ in 0..self.state_len {
                    for (k, &c) in centre.iter().enumerate() {
                        let v = c + unit.sample(&mut rng) * self.token_spread;
                        pooled[k] += v;
                        states.push(v as f32);
                    }
                }
                let pooled: Vec<f32> = pooled
                    .iter()
                    .map(|&v| (v / self.state_len as f64) as f32)
                    .collect();
                text.insert_pooled(&code_id, &pooled)
                    .and_then(|_| text.insert_states(&code_id, self.state_len, states))
                    .map_err(|e| CorpusError::Synthetic(e.to_string()))?;
            }
        }

        let kg = KnowledgeGraph::from_parts(nodes, edges).map_err(CorpusError::Synthetic)?;
        let mut by_code: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (code, node) in mapping {
            by_code.entry(code).or_default().push(node);
        }
        for (code, nodes) in by_code {
            registry.set_kg_nodes(&code, nodes);
        }

        Ok(SyntheticCorpus {
            registry,
            kg,
            text,
            families,
        })
    }
}

impl SyntheticCorpus {
    /// Writes every input file the CLI consumes into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SyntheticFiles, CorpusError> {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let files = SyntheticFiles {
            codes: dir.join("codes.jsonl"),
            kg_nodes: dir.join("kg_nodes.tsv"),
            kg_edges: dir.join("kg_edges.tsv"),
            mapping: dir.join("mapping.tsv"),
            text_pooled: dir.join("text_pooled.bin"),
            text_states: dir.join("text_states.bin"),
            families: dir.join("families.tsv"),
        };
        write_codes(&files.codes, &self.registry)?;
        write_kg(&files.kg_nodes, &files.kg_edges, &self.kg)?;
        write_mapping(&files.mapping, &self.registry)?;
        self.text
            .save(&files.text_pooled, Some(&files.text_states))
            .map_err(|e| CorpusError::Synthetic(e.to_string()))?;
        let fam: String = self
            .families
            .iter()
            .map(|(c, f)| format!("{c}\t{f}\n"))
            .collect();
        fs::write(&files.families, fam).map_err(|source| CorpusError::Io {
            path: files.families.clone(),
            source,
        })?;
        Ok(files)
    }
}
