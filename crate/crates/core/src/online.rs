//! Daily retraining on an expanding window, evaluated on next-day sessions whose
//! target is a long-tail item introduced the day before.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, is_long_tail, EvalOptions};
use crate::ingest::{augment_all, split_by_day, split_holdout, Example, ItemVocab, Session};
use crate::model::{ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::train::{train_model_from, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    /// Day buckets used as the initial training window; `None` = first half.
    pub initial_days: Option<usize>,
    pub n_days: usize,
    pub phi_star: f64,
    /// Temporal validation share for each day's early stopping.
    pub val_fraction: f64,
    /// Start each day from the previous day's parameters instead of a fresh init.
    pub warm_start: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            initial_days: None,
            n_days: 1,
            phi_star: 0.01,
            val_fraction: 0.1,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    /// Calendar day index of the simulated day.
    pub day: i64,
    pub n_train_sessions: usize,
    pub n_items: usize,
    /// Items first seen on this day that are in the long tail of this day's training counts.
    pub new_items: Vec<String>,
    /// Share of all training sessions with a target in `new_items`.
    pub f: f64,
    /// Same share among this day's sessions only.
    pub f_day: f64,
    pub n_eval: usize,
    pub recall: Option<f64>,
    pub mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRun {
    pub phi_star: f64,
    pub initial_days: usize,
    pub days: Vec<DayRecord>,
}

impl OnlineRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,n_train_sessions,n_items,n_new_items,f,f_day,n_eval,recall,mrr\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for d in &self.days {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                d.day,
                d.n_train_sessions,
                d.n_items,
                d.new_items.len(),
                d.f,
                d.f_day,
                d.n_eval,
                opt(d.recall),
                opt(d.mrr)
            ));
        }
        out
    }
}

/// Sessions with at least one target position (any item after the first) in `set`.
pub fn count_targeting<'a>(sessions: impl IntoIterator<Item = &'a Session>, set: &HashSet<usize>) -> usize {
    sessions
        .into_iter()
        .filter(|s| s.items.iter().skip(1).any(|i| set.contains(i)))
        .count()
}

fn item_bound<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> usize {
    sessions
        .into_iter()
        .flat_map(|s| s.items.iter())
        .map(|&i| i + 1)
        .max()
        .unwrap_or(0)
}

/// Day-`t+1` examples whose target is in `targets`, with prefix items unknown on day `t` removed.
fn eval_examples(sessions: &[Session], targets: &HashSet<usize>, n_items: usize, cap: usize) -> Vec<Example> {
    augment_all(sessions, usize::MAX)
        .into_iter()
        .filter(|e| targets.contains(&e.target))
        .filter_map(|mut e| {
            e.prefix.retain(|&i| i < n_items);
            let start = e.prefix.len().saturating_sub(cap);
            e.prefix.drain(..start);
            (!e.prefix.is_empty()).then_some(e)
        })
        .collect()
}

/// Runs the simulation. `sessions` must index items in order of first appearance
/// (as [`crate::ingest::build_corpus`] does) so that every day's vocabulary is a
/// prefix of `vocab`.
pub fn run_online<T: Scalar>(
    sessions: &[Session],
    vocab: &ItemVocab,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    ocfg: &OnlineConfig,
    eval_opts: &EvalOptions,
) -> Result<OnlineRun> {
    mcfg.validate()?;
    tcfg.validate()?;
    if !(ocfg.phi_star > 0.0 && ocfg.phi_star <= 1.0) {
        return Err(Error::invalid(format!("phi_star must lie in (0, 1], got {}", ocfg.phi_star)));
    }
    if ocfg.n_days == 0 {
        return Err(Error::invalid("n_days must be ≥ 1"));
    }
    let buckets: BTreeMap<i64, Vec<Session>> = split_by_day(sessions);
    let days: Vec<i64> = buckets.keys().copied().collect();
    let initial = ocfg.initial_days.unwrap_or(days.len() / 2).max(1);
    if days.len() < initial + ocfg.n_days + 1 {
        return Err(Error::invalid(format!(
            "need {} day buckets ({initial} initial + {} simulated + 1 evaluation), have {}",
            initial + ocfg.n_days + 1,
            ocfg.n_days,
            days.len()
        )));
    }
    if item_bound(sessions) > vocab.len() {
        return Err(Error::invalid("session references an item outside the vocabulary"));
    }
    let cap = mcfg.prefix_cap();
    let mut train: Vec<Session> = days[..initial].iter().flat_map(|d| buckets[d].clone()).collect();
    let mut prev_params: Option<Parameters<T>> = None;
    let mut out = Vec::with_capacity(ocfg.n_days);
    for t in 0..ocfg.n_days {
        let day = days[initial + t];
        let prev_bound = item_bound(&train);
        let today = &buckets[&day];
        train.extend(today.iter().cloned());
        let n_items = item_bound(&train);
        let mut day_vocab = vocab.prefix(n_items);
        day_vocab.count_popularity(&train);

        let new_set: HashSet<usize> = (prev_bound..n_items)
            .filter(|&i| day_vocab.phi(i) > 0 && is_long_tail(&day_vocab, i, ocfg.phi_star))
            .collect();
        let mut new_sorted: Vec<usize> = new_set.iter().copied().collect();
        new_sorted.sort_unstable();
        let f = count_targeting(&train, &new_set) as f64 / train.len() as f64;
        let f_day = count_targeting(today, &new_set) as f64 / today.len().max(1) as f64;

        let (fit, val) = split_holdout(&train, ocfg.val_fraction)?;
        let (fit, val) = (augment_all(&fit, cap), augment_all(&val, cap));
        let init = if ocfg.warm_start { prev_params.as_ref() } else { None };
        let (params, _) = train_model_from::<T>(&fit, &val, n_items, mcfg, tcfg, init)?;

        let next = &buckets[&days[initial + t + 1]];
        let examples = eval_examples(next, &new_set, n_items, cap);
        let (recall, mrr) = if examples.is_empty() {
            (None, None)
        } else {
            let (report, _) = eval::evaluate(&params, mcfg, &examples, &day_vocab, eval_opts)?;
            (Some(report.recall_at_k), Some(report.mrr_at_k))
        };
        out.push(DayRecord {
            day,
            n_train_sessions: train.len(),
            n_items,
            new_items: new_sorted.iter().map(|&i| vocab.key(i).to_string()).collect(),
            f,
            f_day,
            n_eval: examples.len(),
            recall,
            mrr,
        });
        if ocfg.warm_start {
            prev_params = Some(params);
        }
    }
    Ok(OnlineRun {
        phi_star: ocfg.phi_star,
        initial_days: initial,
        days: out,
    })
}
