//! Line-delimited tweet/profile ingestion and network construction.
//!
//! Input files hold one JSON object per line, optionally gzip-compressed.
//! Malformed lines are skipped and tallied instead of aborting the load.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DirectedWeightedGraph, GraphBuilder};

pub const DEFAULT_FOLLOWINGS_CAP: usize = 2000;

/// UTC calendar day.
pub type Day = NaiveDate;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("read error in {path} at line {line}: {source}")]
    Read {
        path: PathBuf,
        line: usize,
        #[source]
        source: io::Error,
    },
    #[error("collection window end {end} precedes start {start}")]
    EmptyWindow { start: Day, end: Day },
    #[error("tweet {tweet_id} on {day} lies outside the collection window {start}..={end}")]
    OutsideWindow {
        tweet_id: String,
        day: Day,
        start: Day,
        end: Day,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub author_id: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub retweeted_author_id: Option<String>,
    #[serde(default)]
    pub urls: Vec<String>,
    #[serde(default)]
    pub opinion: Option<f64>,
    #[serde(default)]
    pub toxicity: Option<f64>,
}

impl TweetRecord {
    pub fn day(&self) -> Day {
        self.timestamp.date_naive()
    }

    pub fn is_retweet(&self) -> bool {
        self.retweeted_author_id.is_some()
    }

    fn validate(&self) -> Result<(), String> {
        if self.tweet_id.is_empty() || self.author_id.is_empty() {
            return Err("empty tweet_id or author_id".into());
        }
        for (name, v) in [("opinion", self.opinion), ("toxicity", self.toxicity)] {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(format!("{name} {x} outside [0,1]"));
                }
            }
        }
        match self.retweeted_author_id.as_deref() {
            Some("") => Err("empty retweeted_author_id".into()),
            Some(rt) if rt == self.author_id => Err("account retweets itself".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfileRecord {
    pub account_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub following_ids: Vec<String>,
}

impl UserProfileRecord {
    fn validate(&self) -> Result<(), String> {
        if self.account_id.is_empty() {
            return Err("empty account_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionWindow {
    start: Day,
    end: Day,
}

impl CollectionWindow {
    pub fn new(start: Day, end: Day) -> Result<Self, IngestError> {
        if end < start {
            return Err(IngestError::EmptyWindow { start, end });
        }
        Ok(Self { start, end })
    }

    /// Smallest window covering every tweet; `None` for an empty corpus.
    pub fn covering<'a, I>(tweets: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a TweetRecord>,
    {
        let mut bounds: Option<(Day, Day)> = None;
        for t in tweets {
            let d = t.day();
            bounds = Some(match bounds {
                None => (d, d),
                Some((lo, hi)) => (lo.min(d), hi.max(d)),
            });
        }
        bounds.map(|(start, end)| Self { start, end })
    }

    pub fn start(&self) -> Day {
        self.start
    }

    pub fn end(&self) -> Day {
        self.end
    }

    pub fn duration_days(&self) -> u64 {
        (self.end - self.start).num_days() as u64 + 1
    }

    pub fn contains(&self, day: Day) -> bool {
        self.start <= day && day <= self.end
    }

    pub fn days(&self) -> impl Iterator<Item = Day> {
        let start = self.start;
        (0..self.duration_days()).map(move |k| start + chrono::Days::new(k))
    }
}

/// A line that failed to parse.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

/// Streaming reader over a line-delimited record file.
pub struct RecordStream<T> {
    path: PathBuf,
    lines: io::Lines<BufReader<Box<dyn Read>>>,
    line_no: usize,
    skipped: Vec<SkippedLine>,
    validate: fn(&T) -> Result<(), String>,
}

impl<T: for<'de> Deserialize<'de>> RecordStream<T> {
    fn open(path: &Path, validate: fn(&T) -> Result<(), String>) -> Result<Self, IngestError> {
        let reader = open_maybe_gzip(path)?;
        Ok(Self {
            path: path.to_owned(),
            lines: BufReader::new(reader).lines(),
            line_no: 0,
            skipped: Vec::new(),
            validate,
        })
    }

    pub fn skipped(&self) -> &[SkippedLine] {
        &self.skipped
    }

    /// Drains the stream, returning records and the skip log.
    pub fn collect_all(mut self) -> Result<(Vec<T>, Vec<SkippedLine>), IngestError> {
        let mut out = Vec::new();
        while let Some(rec) = self.next() {
            out.push(rec?);
        }
        Ok((out, self.skipped))
    }
}

impl<T: for<'de> Deserialize<'de>> Iterator for RecordStream<T> {
    type Item = Result<T, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(IngestError::Read {
                        path: self.path.clone(),
                        line: self.line_no,
                        source,
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<T>(&line)
                .map_err(|e| e.to_string())
                .and_then(|rec| (self.validate)(&rec).map(|_| rec));
            match parsed {
                Ok(rec) => return Some(Ok(rec)),
                Err(reason) => self.skipped.push(SkippedLine {
                    line: self.line_no,
                    reason,
                }),
            }
        }
    }
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn Read>, IngestError> {
    let open_err = |source| IngestError::Open {
        path: path.to_owned(),
        source,
    };
    let mut file = BufReader::new(File::open(path).map_err(open_err)?);
    let is_gzip = file.fill_buf().map_err(open_err)?.starts_with(&[0x1f, 0x8b]);
    Ok(if is_gzip {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    })
}

pub fn load_tweets(path: &Path) -> Result<RecordStream<TweetRecord>, IngestError> {
    RecordStream::open(path, TweetRecord::validate)
}

pub fn load_profiles(path: &Path) -> Result<RecordStream<UserProfileRecord>, IngestError> {
    RecordStream::open(path, UserProfileRecord::validate)
}

/// Retweet network for one UTC day. Edge `(u, v)` counts how often `v`
/// retweeted `u` that day.
pub fn build_daily_retweet_network<'a, I>(tweets: I, day: Day) -> DirectedWeightedGraph
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    let mut builder = GraphBuilder::new();
    for t in tweets.into_iter().filter(|t| t.day() == day) {
        add_tweet(&mut builder, t);
    }
    builder.build()
}

/// Every day's retweet network in one pass.
pub fn daily_retweet_networks<'a, I>(tweets: I) -> BTreeMap<Day, DirectedWeightedGraph>
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    let mut builders: BTreeMap<Day, GraphBuilder> = BTreeMap::new();
    for t in tweets {
        add_tweet(builders.entry(t.day()).or_default(), t);
    }
    builders.into_iter().map(|(d, b)| (d, b.build())).collect()
}

fn add_tweet(builder: &mut GraphBuilder, t: &TweetRecord) {
    match &t.retweeted_author_id {
        Some(src) => builder
            .add_interaction(src, &t.author_id, 1.0)
            .expect("validated tweet cannot self-retweet"),
        None => {
            builder.add_node(&t.author_id);
        }
    }
}

/// Outcome of building the follower network.
#[derive(Debug, Clone)]
pub struct FollowerNetwork {
    pub graph: DirectedWeightedGraph,
    /// Profiles whose following lists exceeded the cap and were truncated.
    pub truncated_profiles: usize,
}

/// Follower network restricted to `corpus_accounts`. A profile for `i` listing
/// `j` yields the edge `(j, i)`.
pub fn build_follower_network<I>(
    profiles: I,
    corpus_accounts: &BTreeSet<String>,
    followings_cap: usize,
) -> FollowerNetwork
where
    I: IntoIterator<Item = UserProfileRecord>,
{
    let mut builder = GraphBuilder::new();
    for a in corpus_accounts {
        builder.add_node(a);
    }
    let mut truncated_profiles = 0;
    let mut seen = HashSet::new();
    for p in profiles {
        if !corpus_accounts.contains(&p.account_id) || !seen.insert(p.account_id.clone()) {
            continue;
        }
        if p.following_ids.len() > followings_cap {
            truncated_profiles += 1;
        }
        for j in p.following_ids.iter().take(followings_cap) {
            if j != &p.account_id && corpus_accounts.contains(j) {
                builder
                    .add_interaction(j, &p.account_id, 1.0)
                    .expect("distinct endpoints");
            }
        }
    }
    // Repeated ids in one following list would otherwise inflate weights.
    let built = builder.build();
    let mut unit = GraphBuilder::new();
    for id in built.node_ids() {
        unit.add_node(built.label(id));
    }
    for (s, t, _) in built.edges() {
        unit.add_interaction(built.label(s), built.label(t), 1.0)
            .expect("distinct endpoints");
    }
    FollowerNetwork {
        graph: unit.build(),
        truncated_profiles,
    }
}

/// Per-account tweet counts over a window, yielding rates in tweets per day.
#[derive(Debug, Clone, PartialEq)]
pub struct TweetRates {
    counts: BTreeMap<String, u64>,
    duration_days: u64,
}

impl TweetRates {
    pub fn count(&self, account: &str) -> u64 {
        self.counts.get(account).copied().unwrap_or(0)
    }

    /// Accounts that never posted get rate 0.
    pub fn rate(&self, account: &str) -> f64 {
        self.count(account) as f64 / self.duration_days as f64
    }

    pub fn duration_days(&self) -> u64 {
        self.duration_days
    }

    pub fn total_tweets(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }
}

pub fn tweet_rates<'a, I>(tweets: I, window: CollectionWindow) -> Result<TweetRates, IngestError>
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    let mut counts = BTreeMap::new();
    for t in tweets {
        let day = t.day();
        if !window.contains(day) {
            return Err(IngestError::OutsideWindow {
                tweet_id: t.tweet_id.clone(),
                day,
                start: window.start,
                end: window.end,
            });
        }
        *counts.entry(t.author_id.clone()).or_insert(0u64) += 1;
    }
    Ok(TweetRates {
        counts,
        duration_days: window.duration_days(),
    })
}

/// Accounts authoring at least one tweet (original or retweet) on `day`.
pub fn active_set<'a, I>(tweets: I, day: Day) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    tweets
        .into_iter()
        .filter(|t| t.day() == day)
        .map(|t| t.author_id.clone())
        .collect()
}

/// Active sets for every day in one pass.
pub fn daily_active_sets<'a, I>(tweets: I) -> BTreeMap<Day, BTreeSet<String>>
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    let mut out: BTreeMap<Day, BTreeSet<String>> = BTreeMap::new();
    for t in tweets {
        out.entry(t.day()).or_default().insert(t.author_id.clone());
    }
    out
}
