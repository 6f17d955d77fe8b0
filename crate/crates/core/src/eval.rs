//! Ranking metrics, popularity-bias metrics, long-tail slicing and the
//! embedding-norm versus popularity diagnostic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Example, ItemVocab};
use crate::model::{forward_inputs, BatchInputs, ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 20;

/// Long-tail thresholds reported by default.
pub const DEFAULT_PHI_GRID: [f64; 7] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    /// Position of the example in the evaluated list.
    pub example: usize,
    /// Top-K items, best first.
    pub top_k: Vec<usize>,
    pub target: usize,
    /// 1-based rank of the target among all items.
    pub rank: usize,
}

/// `1 + #{k : s_k > s_t} + #{k < t : s_k = s_t}`
pub fn rank_of<T: Scalar>(scores: &[T], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > st || (s == st && k < target))
        .count()
}

/// Indices of the `k` best scores; ties go to the lower index.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Rank of each row's target in a `[rows, m]` score matrix.
pub fn rank_targets<T: Scalar>(scores: &Tensor<T>, targets: &[usize]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| rank_of(scores.row(r), t))
        .collect()
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Reciprocal rank within the top `k`, zero beyond it.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

/// Average recommendation popularity: mean over lists of `Σ φ(i) / K`.
pub fn arp(lists: &[RankedList], vocab: &ItemVocab, k: usize) -> Result<f64> {
    if lists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for list in lists {
        let mut sum = 0u64;
        for &i in &list.top_k {
            if i >= vocab.len() {
                return Err(Error::invalid(format!("recommended item {i} not in vocabulary")));
            }
            sum += vocab.phi(i);
        }
        total += sum as f64 / k as f64;
    }
    Ok(total / lists.len() as f64)
}

/// `φ(i) / max φ ≤ φ*`. With an all-zero popularity table every item qualifies.
pub fn is_long_tail(vocab: &ItemVocab, item: usize, phi_star: f64) -> bool {
    let max = vocab.max_popularity();
    if max == 0 {
        return true;
    }
    vocab.phi(item) as f64 / max as f64 <= phi_star
}

pub fn long_tail_set(vocab: &ItemVocab, phi_star: f64) -> Vec<usize> {
    (0..vocab.len()).filter(|&i| is_long_tail(vocab, i, phi_star)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub phi_star: f64,
    pub count: usize,
    /// Absent when no example's target falls in the slice.
    pub recall: Option<f64>,
    pub mrr: Option<f64>,
}

pub fn sliced_metrics(lists: &[RankedList], vocab: &ItemVocab, grid: &[f64], k: usize) -> Vec<SliceMetrics> {
    grid.iter()
        .map(|&phi_star| {
            let ranks: Vec<usize> = lists
                .iter()
                .filter(|l| is_long_tail(vocab, l.target, phi_star))
                .map(|l| l.rank)
                .collect();
            let present = !ranks.is_empty();
            SliceMetrics {
                phi_star,
                count: ranks.len(),
                recall: present.then(|| recall_at_k(&ranks, k)),
                mrr: present.then(|| mrr_at_k(&ranks, k)),
            }
        })
        .collect()
}

/// Ranks with ties replaced by their average (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks); 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileNorm {
    /// 0 = least popular tenth.
    pub decile: usize,
    pub n_items: usize,
    pub min_phi: u64,
    pub max_phi: u64,
    pub mean_phi: f64,
    pub mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormDiag {
    pub deciles: Vec<DecileNorm>,
    pub spearman: f64,
}

/// Mean embedding norm per popularity decile and the rank correlation between
/// popularity and norm, over the live rows of `table` (`[≥ m, d]`).
pub fn norm_popularity_report<T: Scalar>(table: &Tensor<T>, vocab: &ItemVocab) -> NormDiag {
    let m = vocab.len();
    let norms: Vec<f64> = table.row_norms().into_iter().take(m).map(Scalar::as_f64).collect();
    let phi: Vec<u64> = vocab.popularity().to_vec();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&i| (phi[i], i));
    let deciles = (0..10)
        .filter_map(|b| {
            let bucket = &order[b * m / 10..(b + 1) * m / 10];
            if bucket.is_empty() {
                return None;
            }
            let n = bucket.len() as f64;
            Some(DecileNorm {
                decile: b,
                n_items: bucket.len(),
                min_phi: phi[bucket[0]],
                max_phi: phi[*bucket.last().unwrap()],
                mean_phi: bucket.iter().map(|&i| phi[i] as f64).sum::<f64>() / n,
                mean_norm: bucket.iter().map(|&i| norms[i]).sum::<f64>() / n,
            })
        })
        .collect();
    let phi_f: Vec<f64> = phi.iter().map(|&p| p as f64).collect();
    NormDiag {
        deciles,
        spearman: spearman(&phi_f, &norms),
    }
}

impl NormDiag {
    /// Decile table as CSV text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("decile,n_items,min_phi,max_phi,mean_phi,mean_norm\n");
        for d in &self.deciles {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                d.decile, d.n_items, d.min_phi, d.max_phi, d.mean_phi, d.mean_norm
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub n_examples: usize,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub arp: f64,
    pub per_phi_star: Vec<SliceMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_diag: Option<NormDiag>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub k: usize,
    pub batch_size: usize,
    pub phi_grid: Vec<f64>,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            batch_size: 100,
            phi_grid: DEFAULT_PHI_GRID.to_vec(),
            workers: 1,
        }
    }
}

fn rank_batch<T: Scalar>(
    examples: &[Example],
    offset: usize,
    params: &Parameters<T>,
    cfg: &ModelConfig,
    k: usize,
) -> Result<Vec<RankedList>> {
    let refs: Vec<&Example> = examples.iter().collect();
    let inputs = BatchInputs::build(&refs, cfg, params.n_items())?;
    // eval mode never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = forward_inputs(&inputs, params, cfg, false, &mut rng)?;
    let logits = f.graph.value(f.logits);
    let m = params.n_items();
    Ok(examples
        .iter()
        .enumerate()
        .map(|(r, ex)| {
            let row = &logits.row(r)[..m];
            RankedList {
                example: offset + r,
                top_k: top_k(row, k),
                target: ex.target,
                rank: rank_of(row, ex.target),
            }
        })
        .collect())
}

/// Ranks every example's target under the model. Batches are sharded across
/// `opts.workers` threads and merged in input order.
pub fn rank_examples<T: Scalar>(
    params: &Parameters<T>,
    cfg: &ModelConfig,
    examples: &[Example],
    opts: &EvalOptions,
) -> Result<Vec<RankedList>> {
    let bs = opts.batch_size.max(1);
    let batches: Vec<(usize, &[Example])> = examples.chunks(bs).enumerate().map(|(i, c)| (i * bs, c)).collect();
    let workers = opts.workers.max(1).min(batches.len().max(1));
    if workers == 1 {
        let mut out = Vec::with_capacity(examples.len());
        for (offset, chunk) in batches {
            out.extend(rank_batch(chunk, offset, params, cfg, opts.k)?);
        }
        return Ok(out);
    }
    let per = batches.len().div_ceil(workers);
    let shards: Vec<Result<Vec<RankedList>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batches
            .chunks(per)
            .map(|shard| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for &(offset, chunk) in shard {
                        out.extend(rank_batch(chunk, offset, params, cfg, opts.k)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(examples.len());
    for shard in shards {
        out.extend(shard?);
    }
    Ok(out)
}

/// Summary metrics over already-ranked lists.
pub fn summarize(lists: &[RankedList], vocab: &ItemVocab, opts: &EvalOptions) -> Result<MetricsReport> {
    if lists.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let ranks: Vec<usize> = lists.iter().map(|l| l.rank).collect();
    Ok(MetricsReport {
        k: opts.k,
        n_examples: lists.len(),
        recall_at_k: recall_at_k(&ranks, opts.k),
        mrr_at_k: mrr_at_k(&ranks, opts.k),
        arp: arp(lists, vocab, opts.k)?,
        per_phi_star: sliced_metrics(lists, vocab, &opts.phi_grid, opts.k),
        norm_diag: None,
    })
}

pub fn evaluate<T: Scalar>(
    params: &Parameters<T>,
    cfg: &ModelConfig,
    examples: &[Example],
    vocab: &ItemVocab,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<RankedList>)> {
    let lists = rank_examples(params, cfg, examples, opts)?;
    let report = summarize(&lists, vocab, opts)?;
    Ok((report, lists))
}
