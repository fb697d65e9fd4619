//! Lightweight GCN encoder: multi-layer normalized-adjacency propagation
//! with per-layer l2 row normalization, summed over layers.
//!
//! The per-layer transform weight is optional and disabled by default;
//! propagation is then purely linear in the layer-0 embeddings up to the
//! row normalization.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::tape::{Tape, Var};

/// Row-normalization guard for zero rows.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct EncodeOpts {
    /// Number of propagation layers L. The output sums layers 0..=L.
    pub layers: usize,
    /// Apply l2 row normalization to layers >= 1. Disabling it (test mode)
    /// makes the weight-free encoder exactly linear in E0.
    pub normalize: bool,
}

impl EncodeOpts {
    pub fn new(layers: usize) -> Self {
        Self { layers, normalize: true }
    }
}

/// Multi-layer propagation: E_l = h(spmv(g, E_{l-1}) W_l), output sum of
/// E_0..E_L. `weights`, when present, must hold one d x d transform per layer.
pub fn encode(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    e0: Var,
    weights: Option<&[Var]>,
    opts: EncodeOpts,
) -> Result<Var> {
    if tape.value(e0).nrows() != graph.num_nodes {
        return Err(Error::Shape {
            op: "encode",
            detail: format!(
                "graph has {} nodes, embeddings have {} rows",
                graph.num_nodes,
                tape.value(e0).nrows()
            ),
        });
    }
    if let Some(w) = weights {
        if w.len() != opts.layers {
            return Err(Error::Config(format!(
                "encoder got {} weight matrices for {} layers",
                w.len(),
                opts.layers
            )));
        }
    }
    let mut out = e0;
    let mut cur = e0;
    for l in 0..opts.layers {
        cur = tape.spmv(graph, cur)?;
        if let Some(w) = weights {
            cur = tape.matmul(cur, w[l])?;
        }
        if opts.normalize {
            cur = tape.l2_normalize_rows(cur, NORM_EPS);
        }
        out = tape.add(out, cur)?;
    }
    Ok(out)
}

/// Encode the bipartite interaction graph; output has |U|+|V| rows.
pub fn encode_interaction(
    tape: &mut Tape,
    g_r: &Arc<SparseGraph>,
    e0_r: Var,
    weights: Option<&[Var]>,
    opts: EncodeOpts,
) -> Result<Var> {
    encode(tape, g_r, e0_r, weights, opts)
}

/// Encode the social graph; output has |U| rows.
pub fn encode_social(
    tape: &mut Tape,
    g_s: &Arc<SparseGraph>,
    e0_s: Var,
    weights: Option<&[Var]>,
    opts: EncodeOpts,
) -> Result<Var> {
    encode(tape, g_s, e0_s, weights, opts)
}
