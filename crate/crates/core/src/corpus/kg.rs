use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::CorpusError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgNode {
    pub id: String,
    pub type_label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgEdge {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

/// Typed knowledge graph. Node indices follow ascending node-id order, so
/// "lowest index" and "lowest id" coincide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    index: HashMap<String, usize>,
    edges: Vec<KgEdge>,
    /// Undirected neighbour lists, sorted, no self loops.
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from `(id, type)` pairs and `(head, relation, tail)`
    /// triples. Exact duplicate triples are collapsed.
    pub fn from_parts<N, E>(nodes: N, edges: E) -> Result<Self, String>
    where
        N: IntoIterator<Item = (String, String)>,
        E: IntoIterator<Item = (String, String, String)>,
    {
        let mut by_id = BTreeMap::new();
        for (id, ty) in nodes {
            if by_id.insert(id.clone(), ty).is_some() {
                return Err(format!("duplicate node {id}"));
            }
        }
        let nodes: Vec<KgNode> = by_id
            .into_iter()
            .map(|(id, type_label)| KgNode { id, type_label })
            .collect();
        let index: HashMap<String, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();

        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
        for (h, r, t) in edges {
            let (Some(&head), Some(&tail)) = (index.get(&h), index.get(&t)) else {
                return Err(format!("edge ({h}, {r}, {t}) references an unknown node"));
            };
            if !seen.insert((head, r.clone(), tail)) {
                continue;
            }
            if head != tail {
                adjacency[head].insert(tail);
                adjacency[tail].insert(head);
            }
            kept.push(KgEdge {
                head,
                relation: r,
                tail,
            });
        }
        Ok(Self {
            nodes,
            index,
            edges: kept,
            adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn node(&self, idx: usize) -> &KgNode {
        &self.nodes[idx]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, idx: usize) -> &[usize] {
        &self.adjacency[idx]
    }

    pub fn degree(&self, idx: usize) -> usize {
        self.adjacency[idx].len()
    }

    /// Distinct node type labels, sorted.
    pub fn type_labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.nodes.iter().map(|n| n.type_label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads `node_id\ttype` and `head\trelation\ttail` files.
pub fn load_kg(nodes_path: &Path, edges_path: &Path) -> Result<KnowledgeGraph, CorpusError> {
    let mut nodes = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in read(nodes_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |message: String| CorpusError::Ingest {
            path: nodes_path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, ty] = fields[..] else {
            return Err(ingest(format!("expected 2 tab-separated fields, got {}", fields.len())));
        };
        if !seen.insert(id.to_string()) {
            return Err(ingest(format!("duplicate node {id}")));
        }
        nodes.push((id.to_string(), ty.to_string()));
    }

    let mut edges = Vec::new();
    for (i, line) in read(edges_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |message: String| CorpusError::Ingest {
            path: edges_path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [h, r, t] = fields[..] else {
            return Err(ingest(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        for end in [h, t] {
            if !seen.contains(end) {
                return Err(ingest(format!(
                    "edge ({h}, {r}, {t}) references unknown node {end}"
                )));
            }
        }
        edges.push((h.to_string(), r.to_string(), t.to_string()));
    }

    KnowledgeGraph::from_parts(nodes, edges).map_err(|message| CorpusError::Ingest {
        path: edges_path.to_path_buf(),
        line: 0,
        message,
    })
}

pub fn write_kg(nodes_path: &Path, edges_path: &Path, kg: &KnowledgeGraph) -> Result<(), CorpusError> {
    let mut nodes = String::new();
    for n in kg.nodes() {
        nodes.push_str(&format!("{}\t{}\n", n.id, n.type_label));
    }
    let mut edges = String::new();
    for e in kg.edges() {
        edges.push_str(&format!(
            "{}\t{}\t{}\n",
            kg.node(e.head).id,
            e.relation,
            kg.node(e.tail).id
        ));
    }
    fs::write(nodes_path, nodes).map_err(|source| CorpusError::Io {
        path: nodes_path.to_path_buf(),
        source,
    })?;
    fs::write(edges_path, edges).map_err(|source| CorpusError::Io {
        path: edges_path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files(dir: &Path, nodes: &str, edges: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = dir.join("nodes.tsv");
        let e = dir.join("edges.tsv");
        fs::write(&n, nodes).unwrap();
        fs::write(&e, edges).unwrap();
        (n, e)
    }

    #[test]
    fn two_nodes_one_edge() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = files(dir.path(), "a\tdisease\nb\tdrug\n", "a\tindication\tb\n");
        let kg = load_kg(&n, &e).unwrap();
        let degrees: Vec<usize> = (0..kg.node_count()).map(|i| kg.degree(i)).collect();
        assert_eq!(degrees, vec![1, 1]);
    }

    #[test]
    fn triangle_degrees() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = files(
            dir.path(),
            "a\tx\nb\tx\nc\tx\n",
            "a\tr\tb\nb\tr\tc\nc\tr\ta\n",
        );
        let kg = load_kg(&n, &e).unwrap();
        assert!((0..3).all(|i| kg.degree(i) == 2));
    }

    #[test]
    fn edge_to_missing_node_echoes_triple() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = files(dir.path(), "a\tx\n", "a\tr\tzz\n");
        let msg = load_kg(&n, &e).unwrap_err().to_string();
        assert!(msg.contains("(a, r, zz)"), "{msg}");
    }

    #[test]
    fn duplicate_triples_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = files(dir.path(), "a\tx\nb\tx\n", "a\tr\tb\na\tr\tb\nb\tr\ta\n");
        let kg = load_kg(&n, &e).unwrap();
        assert_eq!(kg.edge_count(), 2);
        assert_eq!(kg.degree(0), 1);
    }

    #[test]
    fn node_order_follows_ids() {
        let kg = KnowledgeGraph::from_parts(
            vec![("z".into(), "t".into()), ("a".into(), "t".into())],
            Vec::new(),
        )
        .unwrap();
        assert_eq!(kg.node_index("a"), Some(0));
        assert_eq!(kg.node_index("z"), Some(1));
    }
}
