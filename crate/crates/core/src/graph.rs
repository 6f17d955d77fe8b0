//! Per-session graphs with normalized incoming/outgoing adjacency, and padding
//! into fixed-size batches.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How repeated transitions contribute to edge weights before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Weight = number of times the ordered pair occurs.
    #[default]
    Weighted,
    /// Weight = 1 for every distinct ordered pair.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionGraph {
    /// Distinct items in order of first occurrence.
    pub nodes: Vec<usize>,
    /// Row `j` holds the normalized weights of edges entering node `j`.
    pub a_in: Vec<f64>,
    /// Row `j` holds the normalized weights of edges leaving node `j`.
    pub a_out: Vec<f64>,
    /// Node row of each sequence position.
    pub alias: Vec<usize>,
    pub last_node: usize,
}

impl SessionGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn a_in_at(&self, row: usize, col: usize) -> f64 {
        self.a_in[row * self.len() + col]
    }

    pub fn a_out_at(&self, row: usize, col: usize) -> f64 {
        self.a_out[row * self.len() + col]
    }
}

fn row_normalize(m: &mut [f64], n: usize) {
    for r in 0..n {
        let row = &mut m[r * n..(r + 1) * n];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
}

pub fn build_session_graph(sequence: &[usize], mode: EdgeMode) -> Result<SessionGraph> {
    if sequence.is_empty() {
        return Err(Error::invalid("session graph of an empty sequence"));
    }
    let mut nodes = Vec::new();
    let mut row_of: HashMap<usize, usize> = HashMap::new();
    let alias: Vec<usize> = sequence
        .iter()
        .map(|&item| {
            *row_of.entry(item).or_insert_with(|| {
                nodes.push(item);
                nodes.len() - 1
            })
        })
        .collect();
    let n = nodes.len();
    let mut out_w = vec![0.0; n * n];
    for pair in alias.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        match mode {
            EdgeMode::Weighted => out_w[u * n + v] += 1.0,
            EdgeMode::Binary => out_w[u * n + v] = 1.0,
        }
    }
    let mut in_w = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            in_w[v * n + u] = out_w[u * n + v];
        }
    }
    row_normalize(&mut out_w, n);
    row_normalize(&mut in_w, n);
    Ok(SessionGraph {
        nodes,
        a_in: in_w,
        a_out: out_w,
        last_node: *alias.last().unwrap(),
        alias,
    })
}

/// Graphs padded to a common node count.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub batch: usize,
    pub pad: usize,
    /// `[batch × pad]` item indices; padding slots hold the dummy index.
    pub node_items: Vec<usize>,
    /// `[batch × pad × pad]`, zero-padded.
    pub a_in: Vec<f64>,
    pub a_out: Vec<f64>,
    /// `[batch × pad]`, true for real nodes.
    pub mask: Vec<bool>,
}

pub fn batch_graphs(graphs: &[SessionGraph], pad_to: usize, dummy: usize) -> Result<GraphBatch> {
    let b = graphs.len();
    let mut out = GraphBatch {
        batch: b,
        pad: pad_to,
        node_items: vec![dummy; b * pad_to],
        a_in: vec![0.0; b * pad_to * pad_to],
        a_out: vec![0.0; b * pad_to * pad_to],
        mask: vec![false; b * pad_to],
    };
    for (g_idx, g) in graphs.iter().enumerate() {
        let n = g.len();
        if n > pad_to {
            return Err(Error::invalid(format!("graph with {n} nodes exceeds pad size {pad_to}")));
        }
        let node_base = g_idx * pad_to;
        out.node_items[node_base..node_base + n].copy_from_slice(&g.nodes);
        out.mask[node_base..node_base + n].iter_mut().for_each(|m| *m = true);
        let mat_base = g_idx * pad_to * pad_to;
        for r in 0..n {
            let dst = mat_base + r * pad_to;
            out.a_in[dst..dst + n].copy_from_slice(&g.a_in[r * n..(r + 1) * n]);
            out.a_out[dst..dst + n].copy_from_slice(&g.a_out[r * n..(r + 1) * n]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_session() {
        // i1, i2, i1, i3, i4
        let g = build_session_graph(&[1, 2, 1, 3, 4], EdgeMode::Weighted).unwrap();
        assert_eq!(g.nodes, vec![1, 2, 3, 4]);
        assert_eq!(g.alias, vec![0, 1, 0, 2, 3]);
        assert_eq!(g.last_node, 3);
        let out = |r, c| g.a_out_at(r, c);
        let inn = |r, c| g.a_in_at(r, c);
        assert_eq!([out(0, 1), out(0, 2)], [0.5, 0.5]);
        assert_eq!(out(1, 0), 1.0);
        assert_eq!(out(2, 3), 1.0);
        assert!((0..4).all(|c| out(3, c) == 0.0));
        assert_eq!(inn(0, 1), 1.0);
        assert_eq!(inn(1, 0), 1.0);
        assert_eq!(inn(2, 0), 1.0);
        assert_eq!(inn(3, 2), 1.0);
        let total_out: f64 = g.a_out.iter().sum();
        assert_eq!(total_out, 3.0);
    }

    #[test]
    fn single_item() {
        let g = build_session_graph(&[7], EdgeMode::Weighted).unwrap();
        assert_eq!(g.nodes, vec![7]);
        assert_eq!(g.a_in, vec![0.0]);
        assert_eq!(g.a_out, vec![0.0]);
    }

    #[test]
    fn self_loop() {
        let g = build_session_graph(&[5, 5, 5], EdgeMode::Weighted).unwrap();
        assert_eq!(g.nodes, vec![5]);
        assert_eq!(g.a_out, vec![1.0]);
        assert_eq!(g.a_in, vec![1.0]);
        assert_eq!(g.alias, vec![0, 0, 0]);
    }

    #[test]
    fn binary_mode_ignores_multiplicity() {
        // a->b twice, a->c once
        let w = build_session_graph(&[0, 1, 0, 1, 0, 2], EdgeMode::Weighted).unwrap();
        let b = build_session_graph(&[0, 1, 0, 1, 0, 2], EdgeMode::Binary).unwrap();
        assert!((w.a_out_at(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.a_out_at(0, 1), 0.5);
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(build_session_graph(&[], EdgeMode::Weighted).is_err());
    }

    #[test]
    fn batching_pads_and_masks() {
        let g1 = build_session_graph(&[0, 1], EdgeMode::Weighted).unwrap();
        let g2 = build_session_graph(&[2, 3, 4, 5], EdgeMode::Weighted).unwrap();
        let b = batch_graphs(&[g1.clone(), g2], 4, 99).unwrap();
        assert_eq!(b.node_items.len(), 8);
        assert_eq!(b.a_in.len(), 32);
        assert_eq!(b.mask, vec![true, true, false, false, true, true, true, true]);
        assert_eq!(&b.node_items[..4], &[0, 1, 99, 99]);
        assert_eq!(b.a_out[1], 1.0);

        let single = batch_graphs(&[g1.clone()], 2, 99).unwrap();
        assert_eq!(single.a_out, g1.a_out);
        assert_eq!(single.node_items, g1.nodes);

        assert!(batch_graphs(&[g1], 1, 99).is_err());
    }
}
