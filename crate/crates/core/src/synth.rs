//! Synthetic click streams: Zipf item popularity, sparse Markov transitions and
//! day-wise injection of brand-new items.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RawEvent, SECONDS_PER_DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Catalog size, including items reserved for injection.
    pub m: usize,
    pub zipf_s: f64,
    pub n_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a transition goes to the current item's successor set
    /// rather than a popularity-proportional draw.
    pub markov_concentration: f64,
    /// Size of each item's successor set.
    pub successors: usize,
    pub n_days: usize,
    /// Items introduced on every day after the first.
    pub new_items_per_day: usize,
    /// Sessions per new item that receive it, on its first day and again on the next.
    pub injections_per_item: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m: 500,
            zipf_s: 1.1,
            n_sessions: 30_000,
            min_len: 2,
            max_len: 10,
            markov_concentration: 0.7,
            successors: 4,
            n_days: 1,
            new_items_per_day: 0,
            injections_per_item: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 10 {
            return Err(Error::invalid(format!("m must be ≥ 10, got {}", self.m)));
        }
        if !(self.zipf_s > 0.0) {
            return Err(Error::invalid("zipf_s must be > 0"));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::invalid("need 2 ≤ min_len ≤ max_len"));
        }
        if !(0.0..=1.0).contains(&self.markov_concentration) {
            return Err(Error::invalid("markov_concentration must lie in [0, 1]"));
        }
        if self.n_days == 0 || self.n_sessions == 0 {
            return Err(Error::invalid("n_days and n_sessions must be ≥ 1"));
        }
        if self.successors == 0 {
            return Err(Error::invalid("successors must be ≥ 1"));
        }
        Ok(())
    }

    fn reserved(&self) -> usize {
        self.new_items_per_day * (self.n_days - 1)
    }
}

/// Popularity weights `∝ 1 / rank^s`, rank 1 first, summing to one.
pub fn gen_catalog(m: usize, zipf_s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=m).map(|r| (r as f64).powf(-zipf_s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSession {
    pub id: String,
    pub day: usize,
    /// Catalog indices.
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub weights: Vec<f64>,
    /// Successor set of each catalog item.
    pub successors: Vec<Vec<usize>>,
    pub sessions: Vec<SynthSession>,
    /// `(day, item)` for every injected item.
    pub new_items: Vec<(usize, usize)>,
}

impl SynthCorpus {
    /// Ground-truth probability of moving from `from` to `to` for non-injected items.
    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        let c = self.config.markov_concentration;
        let succ = &self.successors[from];
        let hits = succ.iter().filter(|&&s| s == to).count() as f64;
        c * hits / succ.len() as f64 + (1.0 - c) * self.weights[to]
    }

    pub fn item_key(item: usize) -> String {
        format!("i{item}")
    }

    /// One event per click. Sessions on day `d` start inside day `d` and clicks are
    /// one second apart.
    pub fn events(&self) -> Vec<RawEvent> {
        let per_day = self.sessions.len().div_ceil(self.config.n_days).max(1);
        let spacing = ((SECONDS_PER_DAY as usize - self.config.max_len - 1) / per_day).max(1);
        let mut slot = vec![0usize; self.config.n_days];
        let mut out = Vec::new();
        for s in &self.sessions {
            let offset = (slot[s.day] * spacing) as i64 % (SECONDS_PER_DAY - self.config.max_len as i64 - 1);
            slot[s.day] += 1;
            let start = s.day as i64 * SECONDS_PER_DAY + offset;
            for (j, &item) in s.items.iter().enumerate() {
                out.push(RawEvent {
                    session_id: s.id.clone(),
                    item_id: Self::item_key(item),
                    timestamp: start + j as i64,
                });
            }
        }
        out
    }

    pub fn write_events_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["session_id", "item_id", "timestamp"]).map_err(|e| csv_io(path, e))?;
        for ev in self.events() {
            w.write_record([ev.session_id.as_str(), ev.item_id.as_str(), &ev.timestamp.to_string()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Successor-set transitions as `from,to,prob`. Every row additionally spreads
    /// `1 - markov_concentration` over the popularity weights.
    pub fn write_transitions_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "from,to,prob").map_err(io)?;
        for (from, succ) in self.successors.iter().enumerate() {
            let mut seen = HashSet::new();
            for &to in succ {
                if seen.insert(to) {
                    writeln!(
                        f,
                        "{},{},{}",
                        Self::item_key(from),
                        Self::item_key(to),
                        self.transition_prob(from, to)
                    )
                    .map_err(io)?;
                }
            }
        }
        f.flush().map_err(io)
    }

    /// Fraction of clicks on the top 10% most clicked items.
    pub fn top_decile_share(&self) -> f64 {
        let mut counts = vec![0u64; self.config.m];
        for s in &self.sessions {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = counts[..self.config.m.div_ceil(10)].iter().sum();
        top as f64 / total.max(1) as f64
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Generates a corpus. The least popular `new_items_per_day · (n_days − 1)` catalog
/// entries are held back from ordinary sampling and injected on their day; on days
/// after the first, ordinary draws are limited to items already seen so that the
/// injected ones are the only items that first appear after day 0.
pub fn gen_sessions(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let reserved = cfg.reserved();
    if reserved * 2 > cfg.m {
        return Err(Error::invalid(format!(
            "catalog exhausted: {reserved} injected items need at least {} catalog entries, have {}",
            reserved * 2,
            cfg.m
        )));
    }
    let base = cfg.m - reserved;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = gen_catalog(cfg.m, cfg.zipf_s);
    let popular = WeightedIndex::new(&weights[..base]).map_err(|e| Error::invalid(e.to_string()))?;
    // successor sets favour popular items but much less steeply
    let flat: Vec<f64> = weights[..base].iter().map(|w| w.sqrt()).collect();
    let flat = WeightedIndex::new(&flat).map_err(|e| Error::invalid(e.to_string()))?;
    let successors: Vec<Vec<usize>> = (0..cfg.m)
        .map(|_| (0..cfg.successors).map(|_| flat.sample(&mut rng)).collect())
        .collect();

    let mut seen = vec![false; cfg.m];
    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for k in 0..cfg.n_sessions {
        let day = k % cfg.n_days;
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut items = Vec::with_capacity(len);
        while items.len() < len {
            let prev: Option<usize> = items.last().copied();
            let next = |rng: &mut ChaCha8Rng| -> usize {
                match prev {
                    Some(p) if rng.gen::<f64>() < cfg.markov_concentration => {
                        *successors[p].choose(rng).expect("nonempty successor set")
                    }
                    _ => popular.sample(rng),
                }
            };
            let mut item = next(&mut rng);
            if day > 0 {
                let mut tries = 0;
                while !seen[item] && tries < 32 {
                    item = next(&mut rng);
                    tries += 1;
                }
                if !seen[item] {
                    item = 0;
                }
            }
            items.push(item);
        }
        if day == 0 {
            items.iter().for_each(|&i| seen[i] = true);
        }
        sessions.push(SynthSession {
            id: format!("s{k}"),
            day,
            items,
        });
    }
    if !seen[0] && cfg.n_days > 1 {
        return Err(Error::invalid("day 0 too small to seed the catalog"));
    }

    let mut by_day: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_days];
    for (i, s) in sessions.iter().enumerate() {
        by_day[s.day].push(i);
    }
    let mut new_items = Vec::new();
    let mut next_reserved = base;
    for day in 1..cfg.n_days {
        let fresh: Vec<usize> = (next_reserved..next_reserved + cfg.new_items_per_day).collect();
        next_reserved += cfg.new_items_per_day;
        let mut pool = by_day[day].clone();
        pool.shuffle(&mut rng);
        let mut pool = pool.into_iter();
        for &item in &fresh {
            new_items.push((day, item));
            for j in 0..cfg.injections_per_item {
                let Some(si) = pool.next() else { break };
                let items = &mut sessions[si].items;
                // alternate between target and context placements
                if j % 2 == 0 {
                    *items.last_mut().unwrap() = item;
                } else {
                    items[0] = item;
                }
            }
        }
        if day + 1 < cfg.n_days {
            let mut pool = by_day[day + 1].clone();
            pool.shuffle(&mut rng);
            let mut pool = pool.into_iter();
            for &item in &fresh {
                for _ in 0..cfg.injections_per_item {
                    let Some(si) = pool.next() else { break };
                    *sessions[si].items.last_mut().unwrap() = item;
                }
            }
        }
    }
    Ok(SynthCorpus {
        config: cfg.clone(),
        weights,
        successors,
        sessions,
        new_items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::build_corpus;

    #[test]
    fn catalog_weights() {
        let w = gen_catalog(2, 1.0);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = gen_catalog(1000, 1.1);
        assert!(w[..100].iter().sum::<f64>() > w[900..].iter().sum::<f64>());
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
        // near-zero exponent is near-uniform
        let w = gen_catalog(5, 1e-12);
        assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-9));
    }

    #[test]
    fn deterministic_and_within_bounds() {
        let cfg = SynthConfig {
            m: 100,
            n_sessions: 500,
            min_len: 3,
            max_len: 7,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = gen_sessions(&cfg).unwrap();
        let b = gen_sessions(&cfg).unwrap();
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.events(), b.events());
        for s in &a.sessions {
            assert!((3..=7).contains(&s.items.len()));
            assert!(s.items.iter().all(|&i| i < 100));
        }
    }

    #[test]
    fn new_items_first_appear_on_their_day() {
        let cfg = SynthConfig {
            m: 200,
            n_sessions: 2000,
            n_days: 5,
            new_items_per_day: 2,
            ..SynthConfig::default()
        };
        let c = gen_sessions(&cfg).unwrap();
        let mut first = vec![usize::MAX; cfg.m];
        for s in &c.sessions {
            for &i in &s.items {
                first[i] = first[i].min(s.day);
            }
        }
        let late: Vec<usize> = (0..cfg.m).filter(|&i| first[i] != usize::MAX && first[i] >= 1).collect();
        assert_eq!(late.len(), 8);
        for &(day, item) in &c.new_items {
            assert_eq!(first[item], day);
        }
        // each day's items are targets on the following day
        for &(day, item) in c.new_items.iter().filter(|(d, _)| d + 1 < cfg.n_days) {
            let hits = c
                .sessions
                .iter()
                .filter(|s| s.day == day + 1 && *s.items.last().unwrap() == item)
                .count();
            assert!(hits >= 1);
        }
    }

    #[test]
    fn catalog_exhaustion_rejected() {
        let cfg = SynthConfig {
            m: 20,
            n_days: 10,
            new_items_per_day: 5,
            ..SynthConfig::default()
        };
        assert!(gen_sessions(&cfg).is_err());
        assert!(gen_sessions(&SynthConfig { m: 5, ..SynthConfig::default() }).is_err());
        assert!(gen_sessions(&SynthConfig { min_len: 1, ..SynthConfig::default() }).is_err());
    }

    #[test]
    fn marginals_follow_popularity_without_markov() {
        let cfg = SynthConfig {
            m: 20,
            zipf_s: 1.0,
            n_sessions: 20_000,
            min_len: 5,
            max_len: 5,
            markov_concentration: 0.0,
            ..SynthConfig::default()
        };
        let c = gen_sessions(&cfg).unwrap();
        let mut counts = vec![0f64; cfg.m];
        for s in &c.sessions {
            for &i in &s.items {
                counts[i] += 1.0;
            }
        }
        let n: f64 = counts.iter().sum();
        assert!(n >= 1e5);
        let chi2: f64 = counts
            .iter()
            .zip(&c.weights)
            .map(|(&o, &w)| (o - n * w).powi(2) / (n * w))
            .sum();
        // 19 degrees of freedom; 99.9th percentile ≈ 43.8
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn long_tailed_and_loadable() {
        let cfg = SynthConfig {
            n_sessions: 3000,
            seed: 3,
            ..SynthConfig::default()
        };
        let c = gen_sessions(&cfg).unwrap();
        assert!(c.top_decile_share() > 0.5, "{}", c.top_decile_share());
        let (vocab, sessions) = build_corpus(&c.events(), 1, 2).unwrap();
        assert_eq!(sessions.len(), 3000);
        assert!(vocab.len() <= cfg.m);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.csv");
        c.write_events_csv(&p).unwrap();
        let loaded = crate::ingest::load_events(&p, crate::ingest::EventFormat::Csv).unwrap();
        assert_eq!(loaded.events, c.events());
        let t = dir.path().join("tr.csv");
        c.write_transitions_csv(&t).unwrap();
        assert!(std::fs::read_to_string(t).unwrap().starts_with("from,to,prob\n"));
    }
}
