//! Heterogeneous hypergraph over query patches and prompt embeddings.
//!
//! Node indices `0..n_visual` are patches, `n_visual..n_visual + n_prompt`
//! are prompts (normal prompts first, then abnormal). Two edge families:
//!
//! * structural: each patch plus its `K` most cosine-similar other patches;
//! * semantic: each prompt plus the `K` patches with the highest affinity.
//!
//! Degrees count visual members only, so prompts shape the topology but
//! never carry messages.

use std::io::Write;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::feature_io::FeatureGrid;
use crate::scalar::Scalar;
use crate::semantic::SemanticRepository;
use crate::similarity::{cosine_matrix, normalize_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Structural,
    Semantic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge<T> {
    /// Member node indices in ascending order.
    pub members: Vec<usize>,
    pub weight: T,
    pub kind: EdgeKind,
}

/// Binary node × edge membership stored column-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incidence {
    n_nodes: usize,
    columns: Vec<Vec<usize>>,
}

impl Incidence {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, node: usize, edge: usize) -> u8 {
        u8::from(self.columns[edge].binary_search(&node).is_ok())
    }

    pub fn column(&self, edge: usize) -> &[usize] {
        &self.columns[edge]
    }

    pub fn to_dense<T: Scalar>(&self) -> Array2<T> {
        let mut h = Array2::zeros((self.n_nodes, self.columns.len()));
        for (e, col) in self.columns.iter().enumerate() {
            for &n in col {
                h[[n, e]] = T::one();
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Hypergraph<T> {
    n_visual: usize,
    n_prompt: usize,
    edges: Vec<Hyperedge<T>>,
    incidence: Incidence,
    d_v: Vec<usize>,
    d_e: Vec<usize>,
}

/// Sorts candidate indices by descending score, ties to the lowest index.
fn top_k<T: Scalar>(scores: impl Iterator<Item = (usize, T)>, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, T)> = scores.collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    ranked.into_iter().map(|(i, _)| i).collect()
}

fn check_tokens<T: Scalar>(query: &FeatureGrid<T>) -> Result<Array2<T>> {
    normalize_rows(query.tokens()).map_err(|e| Error::validation(format!("query token: {e}")))
}

/// One edge per patch: the patch and its `k` nearest neighbors by cosine
/// similarity. Every edge has weight 1.
pub fn build_structural_hyperedges<T: Scalar>(
    query: &FeatureGrid<T>,
    k: usize,
) -> Result<Vec<Hyperedge<T>>> {
    let n = query.n_patches();
    ensure!(k >= 1, "K must be at least 1");
    ensure!(k < n, "K = {k} must be below the patch count {n}");
    let unit = check_tokens(query)?;
    let sims = unit.dot(&unit.t());
    Ok((0..n)
        .map(|anchor| {
            let row = sims.row(anchor);
            let mut members = top_k((0..n).filter(|&i| i != anchor).map(|i| (i, row[i])), k);
            members.push(anchor);
            members.sort_unstable();
            Hyperedge {
                members,
                weight: T::one(),
                kind: EdgeKind::Structural,
            }
        })
        .collect())
}

/// One edge per induced prompt: the prompt node and the `k` patches of
/// highest affinity. The weight maps the members' mean affinity from
/// `[-1, 1]` into `(0, 1]` as `(mean + 1) / 2`.
pub fn build_semantic_hyperedges<T: Scalar>(
    query: &FeatureGrid<T>,
    repo: &SemanticRepository<T>,
    k: usize,
) -> Result<Vec<Hyperedge<T>>> {
    let n = query.n_patches();
    ensure!(k >= 1, "K must be at least 1");
    ensure!(k <= n, "K = {k} exceeds the patch count {n}");
    ensure!(
        repo.dim() == query.dim(),
        "repository dimension {} != token dimension {}",
        repo.dim(),
        query.dim()
    );
    check_tokens(query)?;
    let prompts = ndarray::concatenate(
        ndarray::Axis(0),
        &[repo.normal_prompts().view(), repo.abnormal_prompts().view()],
    )
    .expect("same width");
    let affinity = cosine_matrix(query.tokens(), &prompts)?;
    let k_t = T::from_usize(k).expect("count");
    let mut edges = Vec::with_capacity(prompts.nrows());
    for p in 0..prompts.nrows() {
        let col = affinity.column(p);
        let mut members = top_k((0..n).map(|i| (i, col[i])), k);
        let mean = members.iter().fold(T::zero(), |acc, &i| acc + col[i]) / k_t;
        let weight = (mean + T::one()) / T::lit(2.0);
        if !(weight > T::zero()) {
            return Err(Error::DegenerateGraph(format!(
                "semantic edge {p} has non-positive weight {weight}"
            )));
        }
        members.sort_unstable();
        members.push(n + p);
        edges.push(Hyperedge {
            members,
            weight,
            kind: EdgeKind::Semantic,
        });
    }
    Ok(edges)
}

/// Joins both edge families and computes incidence and degrees.
pub fn assemble<T: Scalar>(
    structural: Vec<Hyperedge<T>>,
    semantic: Vec<Hyperedge<T>>,
    n_visual: usize,
    n_prompt: usize,
) -> Result<Hypergraph<T>> {
    let edges: Vec<Hyperedge<T>> = structural.into_iter().chain(semantic).collect();
    ensure!(!edges.is_empty(), "hypergraph needs at least one edge");
    let n_nodes = n_visual + n_prompt;
    let mut columns = Vec::with_capacity(edges.len());
    let mut d_v = vec![0usize; n_visual];
    let mut d_e = Vec::with_capacity(edges.len());
    for (e, edge) in edges.iter().enumerate() {
        ensure!(
            edge.weight > T::zero() && edge.weight.is_finite(),
            "edge {e} weight must be positive"
        );
        let mut col = edge.members.clone();
        col.sort_unstable();
        col.dedup();
        ensure!(col.len() == edge.members.len(), "edge {e} repeats a member");
        let mut visual = 0;
        for &m in &col {
            ensure!(
                m < n_nodes,
                "edge {e} member {m} out of range ({n_nodes} nodes)"
            );
            let is_visual = m < n_visual;
            match edge.kind {
                EdgeKind::Structural => {
                    ensure!(is_visual, "structural edge {e} contains prompt node {m}")
                }
                EdgeKind::Semantic => {}
            }
            if is_visual {
                d_v[m] += 1;
                visual += 1;
            }
        }
        d_e.push(visual);
        columns.push(col);
    }
    Ok(Hypergraph {
        n_visual,
        n_prompt,
        incidence: Incidence { n_nodes, columns },
        edges,
        d_v,
        d_e,
    })
}

impl<T: Scalar> Hypergraph<T> {
    /// Builds both edge families for one query image and assembles them.
    pub fn for_query(
        query: &FeatureGrid<T>,
        repo: &SemanticRepository<T>,
        k_structural: usize,
        k_semantic: usize,
    ) -> Result<Self> {
        let structural = build_structural_hyperedges(query, k_structural)?;
        let semantic = build_semantic_hyperedges(query, repo, k_semantic)?;
        assemble(structural, semantic, query.n_patches(), repo.n_prompts())
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_prompt(&self) -> usize {
        self.n_prompt
    }

    pub fn edges(&self) -> &[Hyperedge<T>] {
        &self.edges
    }

    pub fn incidence(&self) -> &Incidence {
        &self.incidence
    }

    pub fn node_degrees(&self) -> &[usize] {
        &self.d_v
    }

    pub fn edge_degrees(&self) -> &[usize] {
        &self.d_e
    }

    pub fn weights(&self) -> Vec<T> {
        self.edges.iter().map(|e| e.weight).collect()
    }

    fn check_degrees(&self) -> Result<()> {
        if let Some(j) = self.d_v.iter().position(|&d| d == 0) {
            return Err(Error::DegenerateGraph(format!(
                "visual node {j} has degree 0"
            )));
        }
        if let Some(e) = self.d_e.iter().position(|&d| d == 0) {
            return Err(Error::DegenerateGraph(format!(
                "edge {e} has no visual members"
            )));
        }
        Ok(())
    }

    /// Factors `(P, Q)` over the selected edges, restricted to visual rows,
    /// with `P = Dv^{-1/2} H` and `Q = Dv^{-1/2} H De^{-1}`. The operator
    /// contribution of those edges is `P diag(θ) Qᵀ`.
    pub fn operator_factors(&self, edge_ids: &[usize]) -> Result<(Array2<T>, Array2<T>)> {
        self.check_degrees()?;
        let inv_sqrt: Vec<T> = self
            .d_v
            .iter()
            .map(|&d| T::one() / T::from_usize(d).expect("degree").sqrt())
            .collect();
        let mut p = Array2::zeros((self.n_visual, edge_ids.len()));
        let mut q = Array2::zeros((self.n_visual, edge_ids.len()));
        for (c, &e) in edge_ids.iter().enumerate() {
            let inv_de = T::one() / T::from_usize(self.d_e[e]).expect("degree");
            for &j in self.incidence.column(e) {
                if j < self.n_visual {
                    p[[j, c]] = inv_sqrt[j];
                    q[[j, c]] = inv_sqrt[j] * inv_de;
                }
            }
        }
        Ok((p, q))
    }

    /// Edge ids of the given kind, in edge order.
    pub fn edge_ids(&self, kind: EdgeKind) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes one JSON object per edge: kind, members and weight.
    pub fn dump_edges<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            kind: EdgeKind,
            members: &'a [usize],
            theta: f64,
        }
        for e in &self.edges {
            let line = Line {
                kind: e.kind,
                members: &e.members,
                theta: e.weight.to_f64_lossy(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|source| Error::Io {
                path: "<edge dump>".into(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Normalized visual operator `Dv^{-1/2} H diag(θ) De^{-1} Hᵀ Dv^{-1/2}`
/// restricted to visual rows and columns.
pub fn visual_adjacency_operator<T: Scalar>(hg: &Hypergraph<T>) -> Result<Array2<T>> {
    let ids: Vec<usize> = (0..hg.edges.len()).collect();
    let (p, q) = hg.operator_factors(&ids)?;
    let theta = ndarray::Array1::from(hg.weights());
    Ok((p * &theta).dot(&q.t()))
}

/// Symmetric normalized Laplacian `I − A` over the visual nodes.
pub fn laplacian<T: Scalar>(hg: &Hypergraph<T>) -> Result<Array2<T>> {
    let a = visual_adjacency_operator(hg)?;
    Ok(Array2::eye(hg.n_visual) - a)
}
