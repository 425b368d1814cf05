//! Node-centred subgraph extraction and a mean-aggregation message-passing
//! encoder.
//!
//! Node features start from a learned table indexed by node type. Each layer
//! computes `h' = ReLU(h·W_selfᵀ + mean_nbr(h)·W_nbrᵀ)`; the graph embedding
//! is the mean of the final node states. A code without KG mapping is
//! represented by one virtual node of type [`NULL_TYPE`].

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{KnowledgeGraph, MedicalCode};
use crate::numcore::{Adjacency, Matrix, NumError, Tape, Var};

/// Type label of the virtual node standing in for an unmapped code.
pub const NULL_TYPE: &str = "<null>";

pub const DEFAULT_HOPS: usize = 2;
pub const DEFAULT_CAP: usize = 128;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node type {0:?} has no embedding")]
    UnknownType(String),
    #[error("graph encoder needs at least one layer")]
    NoLayers,
    #[error("subgraph has no nodes")]
    EmptySubgraph,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphNode {
    /// Index in the knowledge graph; `None` for the virtual null node.
    pub global: Option<usize>,
    pub id: String,
    pub type_label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSubgraph {
    /// Local indices of the mapped centre nodes.
    pub centers: Vec<usize>,
    pub nodes: Vec<SubgraphNode>,
    /// Local undirected neighbour lists, sorted.
    pub adjacency: Vec<Vec<usize>>,
    pub hop_limit: usize,
}

impl CodeSubgraph {
    pub fn null() -> Self {
        Self {
            centers: vec![0],
            nodes: vec![SubgraphNode {
                global: None,
                id: NULL_TYPE.to_string(),
                type_label: NULL_TYPE.to_string(),
            }],
            adjacency: vec![Vec::new()],
            hop_limit: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.nodes.len() == 1 && self.nodes[0].global.is_none()
    }

    /// Undirected edges as local `(lo, hi)` pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            out.extend(nbrs.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Same subgraph with nodes reordered by ascending global index (the
    /// virtual node, if any, first).
    pub fn canonical(&self) -> CodeSubgraph {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&i| (self.nodes[i].global, self.nodes[i].id.clone()));
        if order.iter().enumerate().all(|(a, &b)| a == b) {
            return self.clone();
        }
        self.permuted(&order)
    }

    /// Reorders nodes so that new local `i` is old local `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> CodeSubgraph {
        let mut new_of_old = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_of_old[old] = new;
        }
        let nodes = order.iter().map(|&o| self.nodes[o].clone()).collect();
        let adjacency = order
            .iter()
            .map(|&o| {
                let mut v: Vec<usize> = self.adjacency[o].iter().map(|&j| new_of_old[j]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let mut centers: Vec<usize> = self.centers.iter().map(|&c| new_of_old[c]).collect();
        centers.sort_unstable();
        CodeSubgraph {
            centers,
            nodes,
            adjacency,
            hop_limit: self.hop_limit,
        }
    }
}

/// Union of breadth-first ego-graphs around every node `code` maps to.
///
/// Nodes are admitted layer by layer, lowest node id first within a layer,
/// until `cap` nodes are held. Centre nodes are always kept. Node ids the
/// graph does not know are ignored; a code with no resolvable node yields
/// the virtual null subgraph.
pub fn extract_subgraph(code: &MedicalCode, kg: &KnowledgeGraph, hops: usize, cap: usize) -> CodeSubgraph {
    let centers: BTreeSet<usize> = code.kg_nodes.iter().filter_map(|n| kg.node_index(n)).collect();
    extract_around(&centers, kg, hops, cap)
}

pub fn extract_around(centers: &BTreeSet<usize>, kg: &KnowledgeGraph, hops: usize, cap: usize) -> CodeSubgraph {
    if centers.is_empty() {
        return CodeSubgraph::null();
    }
    let mut kept: BTreeSet<usize> = centers.clone();
    let mut frontier: Vec<usize> = centers.iter().copied().collect();
    'outer: for _ in 0..hops {
        let next: BTreeSet<usize> = frontier
            .iter()
            .flat_map(|&n| kg.neighbors(n).iter().copied())
            .filter(|n| !kept.contains(n))
            .collect();
        if next.is_empty() {
            break;
        }
        frontier.clear();
        for n in next {
            if kept.len() >= cap {
                break 'outer;
            }
            kept.insert(n);
            frontier.push(n);
        }
    }

    let globals: Vec<usize> = kept.into_iter().collect();
    let local: HashMap<usize, usize> = globals.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let nodes = globals
        .iter()
        .map(|&g| SubgraphNode {
            global: Some(g),
            id: kg.node(g).id.clone(),
            type_label: kg.node(g).type_label.clone(),
        })
        .collect();
    let adjacency = globals
        .iter()
        .map(|&g| kg.neighbors(g).iter().filter_map(|n| local.get(n).copied()).collect())
        .collect();
    CodeSubgraph {
        centers: centers.iter().map(|c| local[c]).collect(),
        nodes,
        adjacency,
        hop_limit: hops,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub w_self: Matrix,
    pub w_nbr: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoderParams {
    type_labels: Vec<String>,
    type_index: HashMap<String, usize>,
    /// One `d_g` row per type label.
    pub type_embedding: Matrix,
    pub layers: Vec<GnnLayer>,
}

/// Tape handles for [`GraphEncoderParams`].
#[derive(Clone, Debug)]
pub struct GraphVars {
    pub type_embedding: Var,
    pub layers: Vec<(Var, Var)>,
}

/// A subgraph reduced to what the encoder reads: type rows and adjacency.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub type_ids: Vec<usize>,
    pub adjacency: Adjacency,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

impl GraphEncoderParams {
    /// Random initialisation. [`NULL_TYPE`] is always added to `types`.
    pub fn init(types: &[String], dim: usize, layers: usize, rng: &mut impl Rng) -> Result<Self, GraphError> {
        if layers == 0 {
            return Err(GraphError::NoLayers);
        }
        let mut labels: BTreeSet<String> = types.iter().cloned().collect();
        labels.insert(NULL_TYPE.to_string());
        let labels: Vec<String> = labels.into_iter().collect();
        let type_embedding = uniform(rng, labels.len(), dim, 3f64.sqrt());
        let bound = (3.0 / dim as f64).sqrt();
        let layers = (0..layers)
            .map(|_| GnnLayer {
                w_self: uniform(rng, dim, dim, bound),
                w_nbr: uniform(rng, dim, dim, bound),
            })
            .collect();
        Self::from_parts(labels, type_embedding, layers)
    }

    pub fn from_parts(type_labels: Vec<String>, type_embedding: Matrix, layers: Vec<GnnLayer>) -> Result<Self, GraphError> {
        if layers.is_empty() {
            return Err(GraphError::NoLayers);
        }
        let dim = type_embedding.cols();
        if type_embedding.rows() != type_labels.len() {
            return Err(NumError::Dimension {
                op: "type_embedding",
                left: type_embedding.shape(),
                right: (type_labels.len(), dim),
            }
            .into());
        }
        for l in &layers {
            for w in [&l.w_self, &l.w_nbr] {
                if w.shape() != (dim, dim) {
                    return Err(NumError::Dimension {
                        op: "gnn layer",
                        left: w.shape(),
                        right: (dim, dim),
                    }
                    .into());
                }
            }
        }
        let type_index = type_labels.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            type_labels,
            type_index,
            type_embedding,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.type_embedding.cols()
    }

    pub fn type_labels(&self) -> &[String] {
        &self.type_labels
    }

    pub fn type_id(&self, label: &str) -> Option<usize> {
        self.type_index.get(label).copied()
    }

    /// Resolves type rows for the canonical node order of `g`.
    pub fn prepare(&self, g: &CodeSubgraph) -> Result<PreparedGraph, GraphError> {
        if g.is_empty() {
            return Err(GraphError::EmptySubgraph);
        }
        let g = g.canonical();
        let type_ids = g
            .nodes
            .iter()
            .map(|n| self.type_id(&n.type_label).ok_or_else(|| GraphError::UnknownType(n.type_label.clone())))
            .collect::<Result<_, _>>()?;
        Ok(PreparedGraph {
            type_ids,
            adjacency: Rc::new(g.adjacency),
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GraphVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        GraphVars {
            type_embedding: leaf(&self.type_embedding),
            layers: self.layers.iter().map(|l| (leaf(&l.w_self), leaf(&l.w_nbr))).collect(),
        }
    }

    /// Forward pass outside any training tape: `(x_g, node_states)`.
    pub fn encode_graph(&self, g: &CodeSubgraph) -> Result<(Matrix, Matrix), GraphError> {
        let prepared = self.prepare(g)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let (x, h) = encode_on_tape(&mut tape, &vars, &prepared)?;
        Ok((tape.value(x).clone(), tape.value(h).clone()))
    }
}

/// Records the encoder on `tape`; returns `(x_g: 1 x d_g, states: n x d_g)`.
pub fn encode_on_tape(tape: &mut Tape, vars: &GraphVars, g: &PreparedGraph) -> Result<(Var, Var), NumError> {
    let mut h = tape.gather_rows(vars.type_embedding, &g.type_ids)?;
    for &(w_self, w_nbr) in &vars.layers {
        let own = tape.linear(h, w_self)?;
        let agg = tape.neighbor_mean(h, Rc::clone(&g.adjacency))?;
        let nbr = tape.linear(agg, w_nbr)?;
        let pre = tape.add(own, nbr)?;
        h = tape.relu(pre)?;
    }
    let x = tape.mean_rows(h)?;
    Ok((x, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CodingSystem;
    use crate::numcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kg(nodes: &[(&str, &str)], edges: &[(&str, &str)]) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            nodes.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            edges.iter().map(|(a, b)| (a.to_string(), "r".to_string(), b.to_string())),
        )
        .unwrap()
    }

    fn code(nodes: &[&str]) -> MedicalCode {
        MedicalCode {
            code_id: "ICD9:1".into(),
            system: CodingSystem::Icd9,
            description: "x".into(),
            kg_nodes: nodes.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn ids(g: &CodeSubgraph) -> Vec<&str> {
        g.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    #[test]
    fn zero_hops_keeps_centres() {
        let g = kg(&[("a", "t"), ("b", "t"), ("c", "t")], &[("a", "b"), ("b", "c")]);
        let s = extract_subgraph(&code(&["a", "c"]), &g, 0, 10);
        assert_eq!(ids(&s), vec!["a", "c"]);
        assert!(s.edges().is_empty());
    }

    #[test]
    fn star_one_hop_is_whole_star() {
        let g = kg(
            &[("hub", "t"), ("l1", "t"), ("l2", "t"), ("l3", "t")],
            &[("hub", "l1"), ("hub", "l2"), ("hub", "l3")],
        );
        let s = extract_subgraph(&code(&["hub"]), &g, 1, 128);
        assert_eq!(s.len(), 4);
        assert_eq!(s.edges().len(), 3);
    }

    #[test]
    fn path_two_hops() {
        let g = kg(
            &[("a", "t"), ("b", "t"), ("c", "t"), ("d", "t")],
            &[("a", "b"), ("b", "c"), ("c", "d")],
        );
        let s = extract_subgraph(&code(&["a"]), &g, 2, 10);
        assert_eq!(ids(&s), vec!["a", "b", "c"]);
    }

    #[test]
    fn cap_truncates_by_lowest_id() {
        let g = kg(
            &[("c0", "t"), ("n3", "t"), ("n1", "t"), ("n2", "t")],
            &[("c0", "n3"), ("c0", "n1"), ("c0", "n2")],
        );
        let s = extract_subgraph(&code(&["c0"]), &g, 1, 3);
        assert_eq!(ids(&s), vec!["c0", "n1", "n2"]);
    }

    #[test]
    fn unmapped_code_gets_null_node() {
        let g = kg(&[("a", "t")], &[]);
        let s = extract_subgraph(&code(&[]), &g, 2, 10);
        assert!(s.is_null());
    }

    fn params(types: &[&str], dim: usize, seed: u64) -> GraphEncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let types: Vec<String> = types.iter().map(|s| s.to_string()).collect();
        GraphEncoderParams::init(&types, dim, 2, &mut rng).unwrap()
    }

    #[test]
    fn isolated_node_uses_self_path_only() {
        let p = params(&["t"], 3, 1);
        let g = kg(&[("a", "t")], &[]);
        let s = extract_subgraph(&code(&["a"]), &g, 2, 10);
        let (x, _) = p.encode_graph(&s).unwrap();

        let h0 = p.type_embedding.gather_rows(&[p.type_id("t").unwrap()]).unwrap();
        let h1 = h0.matmul_nt(&p.layers[0].w_self).unwrap().map("relu", |v| v.max(0.0)).unwrap();
        let h2 = h1.matmul_nt(&p.layers[1].w_self).unwrap().map("relu", |v| v.max(0.0)).unwrap();
        assert_eq!(x, h2);
    }

    #[test]
    fn permutation_invariant() {
        let p = params(&["t", "u", "v"], 4, 2);
        let g = kg(
            &[("a", "t"), ("b", "u"), ("c", "v"), ("d", "t"), ("e", "u")],
            &[("a", "b"), ("b", "c"), ("c", "d"), ("a", "e"), ("e", "c")],
        );
        let s = extract_subgraph(&code(&["a"]), &g, 3, 10);
        let (x, _) = p.encode_graph(&s).unwrap();
        for order in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3]] {
            let (y, _) = p.encode_graph(&s.permuted(&order)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn symmetric_pair_has_equal_states() {
        let p = params(&["t"], 4, 3);
        let g = kg(&[("a", "t"), ("b", "t")], &[("a", "b")]);
        let s = extract_subgraph(&code(&["a"]), &g, 1, 10);
        let (x, h) = p.encode_graph(&s).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(x.row(0), h.row(0));
    }

    #[test]
    fn raising_cap_never_drops_nodes() {
        let corpus = crate::corpus::gen_synthetic(2, 30, 5).unwrap();
        for c in corpus.registry.iter().take(10) {
            let mut prev: BTreeSet<String> = BTreeSet::new();
            for cap in [1, 2, 5, 10, 40, 200] {
                let s = extract_subgraph(c, &corpus.kg, 2, cap);
                let now: BTreeSet<String> = s.nodes.iter().map(|n| n.id.clone()).collect();
                assert!(prev.is_subset(&now));
                prev = now;
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let p = params(&["t", "u"], 3, 4);
        let g = kg(
            &[("a", "t"), ("b", "u"), ("c", "t"), ("d", "u")],
            &[("a", "b"), ("b", "c"), ("a", "c"), ("c", "d")],
        );
        let prepared = p.prepare(&extract_subgraph(&code(&["a"]), &g, 2, 10)).unwrap();
        let weights = Matrix::row_vector(&[0.7, -1.3, 0.4]).unwrap();

        // gradient w.r.t. each parameter in turn, others held constant
        let n_params = 1 + 2 * p.layers.len();
        for which in 0..n_params {
            let base = match which {
                0 => p.type_embedding.clone(),
                k => {
                    let l = &p.layers[(k - 1) / 2];
                    if k % 2 == 1 { l.w_self.clone() } else { l.w_nbr.clone() }
                }
            };
            let report = grad_check(
                |tape, x| {
                    let mut vars = p.register(tape, false);
                    match which {
                        0 => vars.type_embedding = x,
                        k => {
                            let l = &mut vars.layers[(k - 1) / 2];
                            if k % 2 == 1 { l.0 = x } else { l.1 = x }
                        }
                    }
                    let (xg, _) = encode_on_tape(tape, &vars, &prepared)?;
                    let w = tape.constant(weights.clone());
                    let y = tape.mul(xg, w)?;
                    tape.sum(y)
                },
                &base,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "param {which}: {report:?}");
        }
    }
}
