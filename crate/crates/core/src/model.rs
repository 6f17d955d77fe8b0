//! Gated graph network session encoder with optional item/session embedding
//! normalization, position embeddings and input dropout.
//!
//! Forward pass for a batch of prefixes:
//!
//! ```text
//! I ──(normalize?)──► Ĩ ──gather nodes──► dropout? ──► GGNN × τ ──alias──► + P? ──► attention readout ──► s
//! logits = σ·Ĩ·(s/‖s‖)   (NISER / NISER+)
//!        =   Ĩ·s         (NIR)
//!        =   I·s         (GNN / GNN+)
//! ```
//!
//! The item table has one extra trailing row, the padding dummy, which is pinned
//! to zero, excluded from normalization and masked out of the softmax.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check_with, GradCheck, Gradients, Graph, Stencil, Var};
use crate::error::{Error, Result};
use crate::graph::{build_session_graph, EdgeMode, SessionGraph};
use crate::ingest::{Example, DEFAULT_CAP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "gnn")]
    Gnn,
    #[serde(rename = "gnn+")]
    GnnPlus,
    #[serde(rename = "nir")]
    Nir,
    #[serde(rename = "niser")]
    Niser,
    #[serde(rename = "niser+")]
    NiserPlus,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gnn,
        Variant::GnnPlus,
        Variant::Nir,
        Variant::Niser,
        Variant::NiserPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gnn => "gnn",
            Variant::GnnPlus => "gnn+",
            Variant::Nir => "nir",
            Variant::Niser => "niser",
            Variant::NiserPlus => "niser+",
        }
    }

    /// Variants trained on the most recent [`DEFAULT_CAP`] clicks only.
    pub fn is_truncated(self) -> bool {
        matches!(self, Variant::GnnPlus | Variant::NiserPlus)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace("_plus", "+").replace("-plus", "+");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}` (gnn, gnn+, nir, niser, niser+)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding width.
    pub d: usize,
    /// Maximum prefix length (rows of the position table).
    pub max_len: usize,
    /// Propagation steps.
    pub tau: usize,
    /// Softmax scale applied to cosine logits.
    pub sigma: f64,
    pub normalize_items: bool,
    pub normalize_session: bool,
    pub use_position_embeddings: bool,
    pub dropout_p: f64,
    pub edge_mode: EdgeMode,
    pub reduction: Reduction,
}

impl ModelConfig {
    /// Flags fixed by `variant`, with `d = 100`, `σ = 16`, `τ = 1`.
    pub fn for_variant(variant: Variant) -> Self {
        let (ni, ns, pe, drop) = match variant {
            Variant::Gnn | Variant::GnnPlus => (false, false, false, 0.0),
            Variant::Nir => (true, false, false, 0.0),
            Variant::Niser => (true, true, false, 0.0),
            Variant::NiserPlus => (true, true, true, 0.1),
        };
        Self {
            variant,
            d: 100,
            max_len: if variant.is_truncated() { DEFAULT_CAP } else { 50 },
            tau: 1,
            sigma: 16.0,
            normalize_items: ni,
            normalize_session: ns,
            use_position_embeddings: pe,
            dropout_p: drop,
            edge_mode: EdgeMode::Weighted,
            reduction: Reduction::Mean,
        }
    }

    pub fn with_dims(mut self, d: usize, max_len: usize, tau: usize) -> Self {
        self.d = d;
        self.max_len = max_len;
        self.tau = tau;
        self
    }

    /// Longest prefix fed to the model.
    pub fn prefix_cap(&self) -> usize {
        if self.variant.is_truncated() {
            DEFAULT_CAP.min(self.max_len)
        } else {
            self.max_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::for_variant(self.variant);
        if (self.normalize_items, self.normalize_session, self.use_position_embeddings)
            != (
                expected.normalize_items,
                expected.normalize_session,
                expected.use_position_embeddings,
            )
        {
            return Err(Error::invalid(format!(
                "normalization/position flags do not match variant {}",
                self.variant
            )));
        }
        if self.variant != Variant::NiserPlus && self.dropout_p != 0.0 {
            return Err(Error::invalid(format!("variant {} does not use dropout", self.variant)));
        }
        if self.d == 0 || self.max_len == 0 {
            return Err(Error::invalid("d and max_len must be at least 1"));
        }
        if self.normalize_session && !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 16] = [
    "item_embeddings",
    "position_embeddings",
    "ggnn.h1",
    "ggnn.h2",
    "ggnn.b",
    "ggnn.wz",
    "ggnn.wr",
    "ggnn.wo",
    "ggnn.uz",
    "ggnn.ur",
    "ggnn.uo",
    "attn.q",
    "attn.c",
    "attn.w1",
    "attn.w2",
    "mix.w3",
];

/// Every trainable array. Matrices applied to column vectors (`W·x`) are stored
/// in that orientation (`[out × in]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    /// `[m + 1, d]`; the last row is the padding dummy and stays zero.
    pub item_embeddings: Tensor<T>,
    /// `[L, d]`
    pub position_embeddings: Tensor<T>,
    pub h1: Tensor<T>,
    pub h2: Tensor<T>,
    /// `[2d]`
    pub b: Tensor<T>,
    /// `[d, 2d]`
    pub wz: Tensor<T>,
    pub wr: Tensor<T>,
    pub wo: Tensor<T>,
    /// `[d, d]`
    pub uz: Tensor<T>,
    pub ur: Tensor<T>,
    pub uo: Tensor<T>,
    /// `[d]`
    pub q: Tensor<T>,
    pub c: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    /// `[d, 2d]`
    pub w3: Tensor<T>,
}

impl<T: Scalar> Parameters<T> {
    /// Expected shape of each tensor, in [`PARAM_NAMES`] order.
    pub fn shapes(n_items: usize, d: usize, max_len: usize) -> [Vec<usize>; 16] {
        [
            vec![n_items + 1, d],
            vec![max_len, d],
            vec![d, d],
            vec![d, d],
            vec![2 * d],
            vec![d, 2 * d],
            vec![d, 2 * d],
            vec![d, 2 * d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, 2 * d],
        ]
    }

    /// Uniform(−1/√d, 1/√d) for every entry; dummy row zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, n_items: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cfg.d as f64).sqrt();
        let tensors = Self::shapes(n_items, cfg.d, cfg.max_len)
            .map(|shape| Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound))));
        let mut p = Self::from_vec(tensors.into_iter().collect()).expect("shapes are consistent");
        p.zero_dummy();
        p
    }

    pub fn zeros(n_items: usize, d: usize, max_len: usize) -> Self {
        Self::from_vec(Self::shapes(n_items, d, max_len).map(Tensor::zeros).into_iter().collect())
            .expect("shapes are consistent")
    }

    /// Builds from tensors in [`PARAM_NAMES`] order, checking shapes.
    pub fn from_vec(tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::invalid(format!("expected 16 parameter tensors, got {}", tensors.len())));
        }
        let items = tensors[0].shape();
        if items.len() != 2 || items[0] == 0 {
            return Err(shape_mismatch("item_embeddings", items, &[0, 0]));
        }
        let (n_items, d) = (items[0] - 1, items[1]);
        let max_len = tensors[1].shape().first().copied().unwrap_or(0);
        let shapes = Self::shapes(n_items, d, max_len);
        for ((t, shape), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(shape_mismatch(name, t.shape(), shape));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            item_embeddings: next(),
            position_embeddings: next(),
            h1: next(),
            h2: next(),
            b: next(),
            wz: next(),
            wr: next(),
            wo: next(),
            uz: next(),
            ur: next(),
            uo: next(),
            q: next(),
            c: next(),
            w1: next(),
            w2: next(),
            w3: next(),
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.item_embeddings,
            &self.position_embeddings,
            &self.h1,
            &self.h2,
            &self.b,
            &self.wz,
            &self.wr,
            &self.wo,
            &self.uz,
            &self.ur,
            &self.uo,
            &self.q,
            &self.c,
            &self.w1,
            &self.w2,
            &self.w3,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.item_embeddings,
            &mut self.position_embeddings,
            &mut self.h1,
            &mut self.h2,
            &mut self.b,
            &mut self.wz,
            &mut self.wr,
            &mut self.wo,
            &mut self.uz,
            &mut self.ur,
            &mut self.uo,
            &mut self.q,
            &mut self.c,
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
        ]
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.shape()[0] - 1
    }

    pub fn d(&self) -> usize {
        self.item_embeddings.shape()[1]
    }

    pub fn max_len(&self) -> usize {
        self.position_embeddings.shape()[0]
    }

    pub fn dummy_index(&self) -> usize {
        self.n_items()
    }

    pub fn zero_dummy(&mut self) {
        let dummy = self.dummy_index();
        self.item_embeddings.row_mut(dummy).iter_mut().for_each(|v| *v = T::zero());
    }

    /// Appends freshly initialized item rows (new rows go before the dummy).
    pub fn grow_items<R: Rng + ?Sized>(&mut self, new_n_items: usize, rng: &mut R) {
        let (m, d) = (self.n_items(), self.d());
        if new_n_items <= m {
            return;
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut data = self.item_embeddings.data()[..m * d].to_vec();
        data.extend((0..(new_n_items - m) * d).map(|_| T::lit(rng.gen_range(-bound..bound))));
        data.extend(std::iter::repeat(T::zero()).take(d));
        self.item_embeddings = Tensor::new(vec![new_n_items + 1, d], data).expect("consistent shape");
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters::from_vec(self.tensors().iter().map(|t| t.cast()).collect()).expect("same shapes")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn shape_mismatch(name: &'static str, got: &[usize], want: &[usize]) -> Error {
    Error::Shape {
        op: name,
        lhs: got.to_vec(),
        rhs: want.to_vec(),
    }
}

/// Graph handles for one forward pass's parameter leaves.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: [Var; 16],
}

impl ParamVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, p: &Parameters<T>, trainable: bool) -> Self {
        let vars = p
            .tensors()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) });
        Self { vars }
    }

    pub fn item_embeddings(&self) -> Var {
        self.vars[0]
    }

    pub fn position_embeddings(&self) -> Var {
        self.vars[1]
    }

    /// Collects the gradient of every parameter.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Parameters<T> {
        Parameters::from_vec(self.vars.iter().map(|&v| grads.take(v)).collect())
            .expect("gradients mirror parameter shapes")
    }
}

/// GGNN weights prepared for row-vector products.
#[derive(Debug, Clone, Copy)]
pub struct GgnnVars {
    pub h1: Var,
    pub h2: Var,
    pub b: Var,
    pub wz_t: Var,
    pub wr_t: Var,
    pub wo_t: Var,
    pub uz_t: Var,
    pub ur_t: Var,
    pub uo_t: Var,
}

impl GgnnVars {
    pub fn prepare<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars) -> Result<Self> {
        let v = &pv.vars;
        Ok(Self {
            h1: v[2],
            h2: v[3],
            b: v[4],
            wz_t: g.transpose(v[5])?,
            wr_t: g.transpose(v[6])?,
            wo_t: g.transpose(v[7])?,
            uz_t: g.transpose(v[8])?,
            ur_t: g.transpose(v[9])?,
            uo_t: g.transpose(v[10])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `[d, 1]`
    pub q: Var,
    pub c: Var,
    pub w1_t: Var,
    pub w2_t: Var,
    pub w3_t: Var,
}

impl AttentionVars {
    pub fn prepare<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars) -> Result<Self> {
        let v = &pv.vars;
        let d = g.shape(v[11])[0];
        Ok(Self {
            q: g.reshape(v[11], vec![d, 1])?,
            c: v[12],
            w1_t: g.transpose(v[13])?,
            w2_t: g.transpose(v[14])?,
            w3_t: g.transpose(v[15])?,
        })
    }
}

/// Row-wise unit normalization of the item table; the all-zero dummy row is exempt.
pub fn normalize_item_table<T: Scalar>(g: &mut Graph<T>, table: Var) -> Result<Var> {
    g.l2_normalize(table, true)
}

/// Per-session adjacency blocks for a batch of graphs whose node rows are
/// stacked session after session.
#[derive(Debug, Clone)]
pub struct BlockAdjacency<T> {
    /// Node count of each session.
    pub sizes: Arc<[usize]>,
    /// Row-normalized incoming blocks, back to back, each `n × n` row-major.
    pub a_in: Arc<[T]>,
    pub a_out: Arc<[T]>,
}

impl<T: Scalar> BlockAdjacency<T> {
    pub fn from_graphs(graphs: &[SessionGraph]) -> Self {
        let cast = |f: fn(&SessionGraph) -> &[f64]| -> Arc<[T]> {
            graphs.iter().flat_map(|g| f(g).iter().map(|&v| T::lit(v))).collect()
        };
        Self {
            sizes: graphs.iter().map(SessionGraph::len).collect(),
            a_in: cast(|g| &g.a_in),
            a_out: cast(|g| &g.a_out),
        }
    }
}

/// `tau` gated propagation steps. `nodes` is `[Σ n_b, d]`, rows grouped by session
/// as in `adj`.
pub fn ggnn_propagate<T: Scalar>(
    g: &mut Graph<T>,
    adj: &BlockAdjacency<T>,
    nodes: Var,
    w: &GgnnVars,
    tau: usize,
) -> Result<Var> {
    let mut e = nodes;
    for _ in 0..tau {
        let e_h1 = g.matmul(e, w.h1)?;
        let m_in = g.block_matmul(e_h1, adj.sizes.clone(), adj.a_in.clone())?;
        let e_h2 = g.matmul(e, w.h2)?;
        let m_out = g.block_matmul(e_h2, adj.sizes.clone(), adj.a_out.clone())?;
        let a = g.concat(m_in, m_out)?;
        let a = g.add(a, w.b)?;

        let z_a = g.matmul(a, w.wz_t)?;
        let z_e = g.matmul(e, w.uz_t)?;
        let z_pre = g.add(z_a, z_e)?;
        let z = g.sigmoid(z_pre)?;

        let r_a = g.matmul(a, w.wr_t)?;
        let r_e = g.matmul(e, w.ur_t)?;
        let r_pre = g.add(r_a, r_e)?;
        let r = g.sigmoid(r_pre)?;

        let o_a = g.matmul(a, w.wo_t)?;
        let re = g.mul(r, e)?;
        let o_e = g.matmul(re, w.uo_t)?;
        let o_pre = g.add(o_a, o_e)?;
        let cand = g.tanh(o_pre)?;

        // (1 − z)⊙e + z⊙cand = e + z⊙(cand − e)
        let delta = g.sub(cand, e)?;
        let step = g.mul(z, delta)?;
        e = g.add(e, step)?;
    }
    Ok(e)
}

/// Adds `P[positions[k]]` to row `k` of `seq`.
pub fn add_position_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    positions: &Arc<[usize]>,
    pos_table: Var,
) -> Result<Var> {
    let max_len = g.shape(pos_table)[0];
    if let Some(&p) = positions.iter().find(|&&p| p >= max_len) {
        return Err(Error::invalid(format!(
            "position {} exceeds the {max_len}-row position table",
            p + 1
        )));
    }
    let pe = g.gather(pos_table, positions.clone())?;
    g.add(seq, pe)
}

/// Soft-attention pooling of `seq` (`[batch·len, d]`) against the last item
/// (`[batch, d]`), then the linear mix of `[s′; last]`.
pub fn attention_readout<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    last: Var,
    w: &AttentionVars,
    mask: &Arc<[bool]>,
    batch: usize,
    len: usize,
) -> Result<Var> {
    for b in 0..batch {
        if !mask[b * len..(b + 1) * len].iter().any(|&m| m) {
            return Err(Error::invalid(format!("readout mask for row {b} is empty")));
        }
    }
    let d = g.shape(seq)[1];
    let last_w = g.matmul(last, w.w1_t)?;
    let owner: Arc<[usize]> = (0..batch * len).map(|k| k / len).collect();
    let last_w = g.gather(last_w, owner)?;
    let seq_w = g.matmul(seq, w.w2_t)?;
    let pre = g.add(seq_w, last_w)?;
    let pre = g.add(pre, w.c)?;
    let act = g.sigmoid(pre)?;
    let logits = g.matmul(act, w.q)?;
    let logits = g.reshape(logits, vec![batch, len])?;
    let alpha = g.masked_softmax(logits, mask.clone())?;
    let alpha = g.reshape(alpha, vec![batch, 1, len])?;
    let seq3 = g.reshape(seq, vec![batch, len, d])?;
    let pooled = g.matmul(alpha, seq3)?;
    let pooled = g.reshape(pooled, vec![batch, d])?;
    let cat = g.concat(pooled, last)?;
    g.matmul(cat, w.w3_t)
}

/// Item logits `[batch, m + 1]` for session embeddings `s` against `table`
/// (already normalized when the config asks for it).
pub fn score_items<T: Scalar>(g: &mut Graph<T>, s: Var, table: Var, cfg: &ModelConfig) -> Result<Var> {
    let table_t = g.transpose(table)?;
    if cfg.normalize_session {
        let s_n = g.l2_normalize(s, false)?;
        let cos = g.matmul(s_n, table_t)?;
        g.scale(cos, T::lit(cfg.sigma))
    } else {
        g.matmul(s, table_t)
    }
}

/// Probability rows over the `m` live items from `[batch, m + 1]` logits.
pub fn scores_from_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (logits.rows(), logits.last_dim());
    let m = cols - 1;
    let mut out = Tensor::zeros(vec![rows, m]);
    for r in 0..rows {
        let row = &logits.row(r)[..m];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let dst = out.row_mut(r);
        let mut total = T::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        dst.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `−log ŷ_target` per row, reduced over the batch.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let cols = g.shape(logits)[1];
    let live: Arc<[bool]> = (0..cols).map(|j| j + 1 < cols).collect();
    let per_row = g.softmax_cross_entropy(logits, targets.into(), Some(live))?;
    match reduction {
        Reduction::Mean => g.mean(per_row),
        Reduction::Sum => g.sum(per_row),
    }
}

/// Prepared inputs for one batch.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub batch: usize,
    pub len_pad: usize,
    pub graphs: Vec<SessionGraph>,
    /// Item of every node row, sessions stacked in order.
    pub node_items: Arc<[usize]>,
    /// Row of the propagated node table feeding each `[batch·len_pad]` position.
    pub seq_index: Arc<[usize]>,
    pub positions: Arc<[usize]>,
    pub seq_mask: Arc<[bool]>,
    /// Row of the position table feeding the last position of each example.
    pub last_index: Arc<[usize]>,
    pub targets: Vec<usize>,
}

impl BatchInputs {
    pub fn build(examples: &[&Example], cfg: &ModelConfig, n_items: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let graphs: Vec<SessionGraph> = examples
            .iter()
            .map(|ex| build_session_graph(&ex.prefix, cfg.edge_mode))
            .collect::<Result<_>>()?;
        for ex in examples {
            if let Some(&bad) = ex.prefix.iter().chain(std::iter::once(&ex.target)).find(|&&i| i >= n_items) {
                return Err(Error::invalid(format!("item index {bad} outside vocabulary of {n_items}")));
            }
        }
        let batch = examples.len();
        let len_pad = examples.iter().map(|e| e.prefix.len()).max().unwrap();
        let node_items: Arc<[usize]> = graphs.iter().flat_map(|g| g.nodes.iter().copied()).collect();
        let mut seq_index = vec![0; batch * len_pad];
        let mut positions = vec![0; batch * len_pad];
        let mut seq_mask = vec![false; batch * len_pad];
        let mut last_index = Vec::with_capacity(batch);
        let mut offset = 0;
        for (b, g) in graphs.iter().enumerate() {
            for (j, &node) in g.alias.iter().enumerate() {
                seq_index[b * len_pad + j] = offset + node;
                positions[b * len_pad + j] = j;
                seq_mask[b * len_pad + j] = true;
            }
            for j in g.alias.len()..len_pad {
                seq_index[b * len_pad + j] = offset;
            }
            last_index.push(b * len_pad + g.alias.len() - 1);
            offset += g.len();
        }
        Ok(Self {
            batch,
            len_pad,
            node_items,
            graphs,
            seq_index: seq_index.into(),
            positions: positions.into(),
            seq_mask: seq_mask.into(),
            last_index: last_index.into(),
            targets: examples.iter().map(|e| e.target).collect(),
        })
    }
}

/// Everything recorded by [`forward`].
#[derive(Debug)]
pub struct Forward<T> {
    pub graph: Graph<T>,
    pub params: ParamVars,
    /// `[batch, m + 1]`; the last column belongs to the dummy row.
    pub logits: Var,
    pub loss: Var,
    /// Session embedding before any normalization, `[batch, d]`.
    pub session: Var,
    /// Item table used for scoring (normalized when the variant says so).
    pub table: Var,
}

impl<T: Scalar> Forward<T> {
    pub fn scores(&self) -> Tensor<T> {
        scores_from_logits(self.graph.value(self.logits))
    }

    pub fn loss_value(&self) -> T {
        self.graph.value(self.loss).data()[0]
    }
}

pub fn forward<T: Scalar, R: Rng + ?Sized>(
    examples: &[&Example],
    params: &Parameters<T>,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<Forward<T>> {
    let inputs = BatchInputs::build(examples, cfg, params.n_items())?;
    forward_inputs(&inputs, params, cfg, train, rng)
}

pub fn forward_inputs<T: Scalar, R: Rng + ?Sized>(
    inp: &BatchInputs,
    params: &Parameters<T>,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<Forward<T>> {
    let d = params.d();
    if d != cfg.d {
        return Err(Error::invalid(format!("parameters have d={d}, config says d={}", cfg.d)));
    }
    if cfg.use_position_embeddings && inp.len_pad > params.max_len() {
        return Err(Error::invalid(format!(
            "prefix of length {} exceeds max_len {}",
            inp.len_pad,
            params.max_len()
        )));
    }
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params, train);
    let ggnn = GgnnVars::prepare(&mut g, &pv)?;
    let attn = AttentionVars::prepare(&mut g, &pv)?;

    let table = if cfg.normalize_items {
        normalize_item_table(&mut g, pv.item_embeddings())?
    } else {
        pv.item_embeddings()
    };
    let nodes = g.gather(table, inp.node_items.clone())?;
    let nodes = g.dropout(nodes, cfg.dropout_p, train, rng)?;

    let adj = BlockAdjacency::from_graphs(&inp.graphs);
    let propagated = ggnn_propagate(&mut g, &adj, nodes, &ggnn, cfg.tau)?;
    let b = inp.batch;

    let mut seq = g.gather(propagated, inp.seq_index.clone())?;
    if cfg.use_position_embeddings {
        seq = add_position_embeddings(&mut g, seq, &inp.positions, pv.position_embeddings())?;
    }
    let last = g.gather(seq, inp.last_index.clone())?;
    let session = attention_readout(&mut g, seq, last, &attn, &inp.seq_mask, b, inp.len_pad)?;
    let logits = score_items(&mut g, session, table, cfg)?;
    let loss = cross_entropy(&mut g, logits, &inp.targets, cfg.reduction)?;
    Ok(Forward {
        graph: g,
        params: pv,
        logits,
        loss,
        session,
        table,
    })
}

/// Finite-difference check of the full training loss with respect to every
/// parameter tensor (`GradCheck::per_leaf` follows [`PARAM_NAMES`]). Dropout is
/// disabled. Some gradients sit near 1e-9, so a Richardson stencil at `eps = 1e-3`
/// keeps roundoff below the relative-error floor.
pub fn model_grad_check(cfg: &ModelConfig, params: &Parameters<f64>, examples: &[Example]) -> Result<GradCheck> {
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..cfg.clone()
    };
    let refs: Vec<&Example> = examples.iter().collect();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut f = forward(&refs, params, &cfg, true, &mut rng)?;
    let leaves = f.params.vars.to_vec();
    finite_diff_check_with(&mut f.graph, f.loss, &leaves, 1e-3, Stencil::Richardson)
}
