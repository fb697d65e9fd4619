//! Sparse graph storage for the user-item interaction graph and the
//! user-user social graph.
//!
//! Both graphs are held in CSR form with symmetric Laplacian normalization
//! `1/sqrt(deg(i) * deg(j))` on every edge. Graphs are immutable after
//! construction and safe to share across threads.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Binary user-item interaction matrix, stored as a deduplicated pair set.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    pub num_users: usize,
    pub num_items: usize,
    pairs: Vec<(usize, usize)>,
}

impl InteractionMatrix {
    /// Build from raw (user, item) pairs. Duplicates collapse to a single
    /// binary entry; out-of-range ids are rejected with the offending pair.
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut v: Vec<(usize, usize)> = Vec::new();
        for (u, i) in pairs {
            if u >= num_users || i >= num_items {
                return Err(Error::Data(format!(
                    "interaction ({u}, {i}) out of range for {num_users} users x {num_items} items"
                )));
            }
            v.push((u, i));
        }
        v.sort_unstable();
        v.dedup();
        Ok(Self { num_users, num_items, pairs: v })
    }

    /// Sorted, deduplicated (user, item) pairs.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn num_interactions(&self) -> usize {
        self.pairs.len()
    }
}

/// Binary user-user social matrix. Edges are stored canonically as
/// (low, high) and treated as undirected; self-loops are rejected.
#[derive(Debug, Clone)]
pub struct SocialMatrix {
    pub num_users: usize,
    edges: Vec<(usize, usize)>,
}

impl SocialMatrix {
    /// Build from raw (u, u') edges in either direction. The edge set is
    /// symmetrized and deduplicated.
    pub fn from_edges(
        num_users: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut v: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a >= num_users || b >= num_users {
                return Err(Error::Data(format!(
                    "social edge ({a}, {b}) out of range for {num_users} users"
                )));
            }
            if a == b {
                return Err(Error::Data(format!("social self-loop on user {a}")));
            }
            v.push((a.min(b), a.max(b)));
        }
        v.sort_unstable();
        v.dedup();
        Ok(Self { num_users, edges: v })
    }

    /// Canonical (low, high) undirected edges, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// CSR adjacency with Laplacian-normalized edge weights.
///
/// `norm_values[k] = 1/sqrt(deg(i) * deg(j))` for the k-th stored entry
/// (i, col_indices[k]). Zero-degree nodes keep empty rows; no self-loops
/// are added.
#[derive(Debug, Clone)]
pub struct SparseGraph {
    pub num_nodes: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub norm_values: Vec<f64>,
    pub degree: Vec<usize>,
}

impl SparseGraph {
    /// Assemble a normalized CSR graph from undirected edges over
    /// `num_nodes` nodes. Each undirected edge yields two directed entries.
    fn from_undirected(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut degree = vec![0usize; num_nodes];
        for &(a, b) in edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut row_offsets = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            row_offsets[i + 1] = row_offsets[i] + degree[i];
        }
        let nnz = row_offsets[num_nodes];
        let mut col_indices = vec![0usize; nnz];
        let mut norm_values = vec![0f64; nnz];
        let mut cursor = row_offsets.clone();
        for &(a, b) in edges {
            let w = 1.0 / ((degree[a] * degree[b]) as f64).sqrt();
            col_indices[cursor[a]] = b;
            norm_values[cursor[a]] = w;
            cursor[a] += 1;
            col_indices[cursor[b]] = a;
            norm_values[cursor[b]] = w;
            cursor[b] += 1;
        }
        // Fix per-row column order so summation order is reproducible.
        for i in 0..num_nodes {
            let (lo, hi) = (row_offsets[i], row_offsets[i + 1]);
            let mut row: Vec<(usize, f64)> = col_indices[lo..hi]
                .iter()
                .copied()
                .zip(norm_values[lo..hi].iter().copied())
                .collect();
            row.sort_unstable_by_key(|&(c, _)| c);
            for (k, (c, w)) in row.into_iter().enumerate() {
                col_indices[lo + k] = c;
                norm_values[lo + k] = w;
            }
        }
        Self { num_nodes, row_offsets, col_indices, norm_values, degree }
    }

    pub fn num_entries(&self) -> usize {
        self.col_indices.len()
    }

    /// Sparse matrix times dense matrix: `out[i] = sum_j norm(i,j) * dense[j]`.
    /// Per-row summation runs in ascending column order.
    pub fn spmv(&self, dense: &Array2<f64>) -> Result<Array2<f64>> {
        if dense.nrows() != self.num_nodes {
            return Err(Error::Shape {
                op: "spmv",
                detail: format!(
                    "graph has {} nodes but dense input has {} rows",
                    self.num_nodes,
                    dense.nrows()
                ),
            });
        }
        let d = dense.ncols();
        let mut out = Array2::zeros((self.num_nodes, d));
        for i in 0..self.num_nodes {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                let w = self.norm_values[k];
                for c in 0..d {
                    out[[i, c]] += w * dense[[j, c]];
                }
            }
        }
        Ok(out)
    }
}

/// Build the bipartite interaction graph over `num_users + num_items`
/// nodes. Item j maps to node `num_users + j`.
pub fn build_bipartite(im: &InteractionMatrix) -> SparseGraph {
    let edges: Vec<(usize, usize)> = im
        .pairs()
        .iter()
        .map(|&(u, i)| (u, im.num_users + i))
        .collect();
    SparseGraph::from_undirected(im.num_users + im.num_items, &edges)
}

/// Build the social graph over `num_users` nodes.
pub fn build_social(sm: &SocialMatrix) -> SparseGraph {
    SparseGraph::from_undirected(sm.num_users, sm.edges())
}
