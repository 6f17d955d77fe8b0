//! Click-log loading, vocabulary construction and example generation.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per day used to derive [`Session::day`].
pub const SECONDS_PER_DAY: i64 = 86_400;

/// Default cap on prefix length for the truncated ("+") model variants.
pub const DEFAULT_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Tsv,
    Jsonl,
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            "jsonl" | "ndjson" => Ok(Self::Jsonl),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        ext.parse()
    }
}

/// Events in file order plus the number of records that could not be parsed.
#[derive(Debug, Clone, Default)]
pub struct LoadedEvents {
    pub events: Vec<RawEvent>,
    pub malformed: usize,
}

fn validate(session_id: &str, item_id: &str, timestamp: &str) -> Option<RawEvent> {
    let timestamp: i64 = timestamp.trim().parse().ok()?;
    let (session_id, item_id) = (session_id.trim(), item_id.trim());
    if timestamp < 0 || session_id.is_empty() || item_id.is_empty() {
        return None;
    }
    Some(RawEvent {
        session_id: session_id.to_string(),
        item_id: item_id.to_string(),
        timestamp,
    })
}

pub fn load_events(path: &Path, format: EventFormat) -> Result<LoadedEvents> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut out = LoadedEvents::default();
    let mut total = 0usize;
    match format {
        EventFormat::Csv | EventFormat::Tsv => {
            let delim = if format == EventFormat::Csv { b',' } else { b'\t' };
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delim)
                .flexible(true)
                .from_reader(file);
            let headers = match reader.headers() {
                Ok(h) => h.clone(),
                Err(e) if e.is_io_error() => {
                    return Err(Error::Io {
                        path: path.to_path_buf(),
                        source: std::io::Error::other(e.to_string()),
                    })
                }
                Err(_) => return Err(Error::invalid("unreadable header row")),
            };
            if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
                return Ok(out);
            }
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| Error::invalid(format!("missing column `{name}`")))
            };
            let (cs, ci, ct) = (col("session_id")?, col("item_id")?, col("timestamp")?);
            for record in reader.records() {
                total += 1;
                let parsed = record.ok().and_then(|r| {
                    validate(r.get(cs)?, r.get(ci)?, r.get(ct)?)
                });
                match parsed {
                    Some(ev) => out.events.push(ev),
                    None => out.malformed += 1,
                }
            }
        }
        EventFormat::Jsonl => {
            #[derive(Deserialize)]
            struct Line {
                session_id: serde_json::Value,
                item_id: serde_json::Value,
                timestamp: serde_json::Value,
            }
            let text = |v: &serde_json::Value| match v {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            };
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                total += 1;
                let parsed = serde_json::from_str::<Line>(&line).ok().and_then(|l| {
                    validate(&text(&l.session_id)?, &text(&l.item_id)?, &text(&l.timestamp)?)
                });
                match parsed {
                    Some(ev) => out.events.push(ev),
                    None => out.malformed += 1,
                }
            }
        }
    }
    if out.malformed * 10 > total {
        return Err(Error::TooManyMalformed {
            malformed: out.malformed,
            total,
        });
    }
    Ok(out)
}

/// Dense item indexing with training-set popularity counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVocab {
    keys: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    popularity: Vec<u64>,
}

impl ItemVocab {
    pub fn from_keys(keys: Vec<String>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let popularity = vec![0; keys.len()];
        Self {
            keys,
            index,
            popularity,
        }
    }

    /// Rebuilds the key index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key(&self, index: usize) -> &str {
        &self.keys[index]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    pub fn phi(&self, index: usize) -> u64 {
        self.popularity[index]
    }

    pub fn max_popularity(&self) -> u64 {
        self.popularity.iter().copied().max().unwrap_or(0)
    }

    /// Appends an unseen key and returns its index, or the existing index.
    pub fn push(&mut self, key: &str) -> usize {
        if let Some(i) = self.index_of(key) {
            return i;
        }
        self.keys.push(key.to_string());
        self.popularity.push(0);
        self.index.insert(key.to_string(), self.keys.len() - 1);
        self.keys.len() - 1
    }

    /// Replaces popularity with occurrence counts over `sessions`.
    pub fn count_popularity<'a>(&mut self, sessions: impl IntoIterator<Item = &'a Session>) {
        self.popularity.iter_mut().for_each(|p| *p = 0);
        for s in sessions {
            for &i in &s.items {
                self.popularity[i] += 1;
            }
        }
    }

    /// Vocabulary restricted to the first `len` items (used by the online simulator,
    /// where indices are assigned in order of first appearance).
    pub fn prefix(&self, len: usize) -> Self {
        let mut v = Self::from_keys(self.keys[..len].to_vec());
        v.popularity.copy_from_slice(&self.popularity[..len]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub items: Vec<usize>,
    /// Day index of the first click (`timestamp / 86400`).
    pub day: i64,
    /// Timestamp of the first click.
    pub start: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// A session as raw item keys, chronologically ordered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedSession {
    pub id: String,
    pub items: Vec<String>,
    pub start: i64,
}

/// Groups events by session (first-appearance order) and sorts each session's clicks
/// by timestamp, ties kept in input order.
pub fn group_sessions(events: &[RawEvent]) -> Vec<KeyedSession> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_session: HashMap<&str, Vec<(i64, usize)>> = HashMap::new();
    for (pos, ev) in events.iter().enumerate() {
        let entry = by_session.entry(ev.session_id.as_str()).or_insert_with(|| {
            order.push(ev.session_id.as_str());
            Vec::new()
        });
        entry.push((ev.timestamp, pos));
    }
    order
        .into_iter()
        .map(|id| {
            let mut clicks = by_session.remove(id).unwrap();
            clicks.sort_by_key(|&(ts, pos)| (ts, pos));
            KeyedSession {
                id: id.to_string(),
                start: clicks[0].0,
                items: clicks.into_iter().map(|(_, pos)| events[pos].item_id.clone()).collect(),
            }
        })
        .collect()
}

/// Applies item-support and session-length filters until neither removes anything,
/// then builds the vocabulary (first-appearance order over chronologically sorted
/// sessions) and popularity counts on the survivors.
pub fn build_corpus(
    events: &[RawEvent],
    min_item_support: usize,
    min_session_len: usize,
) -> Result<(ItemVocab, Vec<Session>)> {
    if events.is_empty() {
        return Err(Error::EmptyCorpus("no events".into()));
    }
    let mut sessions = group_sessions(events);
    loop {
        let mut support: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            for item in &s.items {
                *support.entry(item.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = support
            .into_iter()
            .filter(|&(_, c)| c < min_item_support)
            .map(|(k, _)| k.to_string())
            .collect();
        let before: usize = sessions.iter().map(|s| s.items.len()).sum::<usize>() + sessions.len();
        for s in &mut sessions {
            s.items.retain(|i| !rare.contains(i));
        }
        sessions.retain(|s| s.items.len() >= min_session_len.max(1));
        let after: usize = sessions.iter().map(|s| s.items.len()).sum::<usize>() + sessions.len();
        if after == before {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus("every session was filtered out".into()));
    }
    sessions.sort_by_key(|s| s.start);
    let mut vocab = ItemVocab::from_keys(Vec::new());
    let sessions: Vec<Session> = sessions
        .into_iter()
        .map(|s| Session {
            items: s.items.iter().map(|k| vocab.push(k)).collect(),
            day: s.start.div_euclid(SECONDS_PER_DAY),
            start: s.start,
            id: s.id,
        })
        .collect();
    vocab.count_popularity(&sessions);
    Ok((vocab, sessions))
}

/// Maps keyed sessions through a frozen vocabulary, dropping unknown items and
/// sessions left shorter than `min_session_len`.
pub fn map_sessions(keyed: &[KeyedSession], vocab: &ItemVocab, min_session_len: usize) -> Vec<Session> {
    keyed
        .iter()
        .filter_map(|s| {
            let items: Vec<usize> = s.items.iter().filter_map(|k| vocab.index_of(k)).collect();
            (items.len() >= min_session_len.max(1)).then(|| Session {
                id: s.id.clone(),
                items,
                day: s.start.div_euclid(SECONDS_PER_DAY),
                start: s.start,
            })
        })
        .collect()
}

/// The last `min(len, cap)` items, order preserved.
pub fn truncate_recent(sequence: &[usize], cap: usize) -> &[usize] {
    let cap = cap.max(1);
    &sequence[sequence.len().saturating_sub(cap)..]
}

/// Every proper prefix of the session paired with the item that follows it.
pub fn augment_prefixes(session: &Session, cap: usize) -> Vec<Example> {
    (1..session.items.len())
        .map(|j| Example {
            prefix: truncate_recent(&session.items[..j], cap).to_vec(),
            target: session.items[j],
        })
        .collect()
}

pub fn augment_all<'a>(sessions: impl IntoIterator<Item = &'a Session>, cap: usize) -> Vec<Example> {
    sessions.into_iter().flat_map(|s| augment_prefixes(s, cap)).collect()
}

/// Holds out the temporally latest `⌈fraction · n⌉` sessions (at least one, leaving at
/// least one for training).
pub fn split_holdout(sessions: &[Session], fraction: f64) -> Result<(Vec<Session>, Vec<Session>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let n = sessions.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 sessions to hold out, got {n}")));
    }
    let mut sorted = sessions.to_vec();
    sorted.sort_by_key(|s| (s.day, s.start));
    let n_val = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let val = sorted.split_off(n - n_val);
    Ok((sorted, val))
}

pub fn split_by_day(sessions: &[Session]) -> BTreeMap<i64, Vec<Session>> {
    let mut days: BTreeMap<i64, Vec<Session>> = BTreeMap::new();
    for s in sessions {
        days.entry(s.day).or_default().push(s.clone());
    }
    days
}
