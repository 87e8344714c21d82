//! Account labels and per-group aggregates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::graph::{DirectedWeightedGraph, NodeId};
use crate::ingest::{TweetRates, TweetRecord};

pub const DEFAULT_PARTISAN_CUTOFF: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("opinion {0} outside [0,1]")]
    OpinionOutOfRange(f64),
    #[error("ratings line {line}: {reason}")]
    RatingsParse { line: usize, reason: String },
    #[error("keyword set `{0}` contains no terms")]
    EmptyKeywordSet(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partisanship {
    Anti,
    Pro,
}

impl fmt::Display for Partisanship {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partisanship::Anti => "anti",
            Partisanship::Pro => "pro",
        })
    }
}

impl std::str::FromStr for Partisanship {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "anti" => Ok(Self::Anti),
            "pro" => Ok(Self::Pro),
            other => Err(format!("unknown partisanship `{other}`")),
        }
    }
}

/// Anti at or below `cutoff`, pro above it.
pub fn label_partisanship_with(mean_opinion: f64, cutoff: f64) -> Result<Partisanship, AnalyticsError> {
    if !(0.0..=1.0).contains(&mean_opinion) {
        return Err(AnalyticsError::OpinionOutOfRange(mean_opinion));
    }
    Ok(if mean_opinion <= cutoff {
        Partisanship::Anti
    } else {
        Partisanship::Pro
    })
}

pub fn label_partisanship(mean_opinion: f64) -> Result<Partisanship, AnalyticsError> {
    label_partisanship_with(mean_opinion, DEFAULT_PARTISAN_CUTOFF)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordLabel {
    AntiTrump,
    ProTrump,
    Qanon,
    Collection,
}

impl KeywordLabel {
    fn builtin_text(self) -> &'static str {
        match self {
            KeywordLabel::AntiTrump => include_str!("../data/keywords_anti.txt"),
            KeywordLabel::ProTrump => include_str!("../data/keywords_pro.txt"),
            KeywordLabel::Qanon => include_str!("../data/keywords_qanon.txt"),
            KeywordLabel::Collection => include_str!("../data/keywords_collection.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Term {
    /// `#tag`: whole-token match including the hash.
    Hashtag(String),
    /// Bare word: whole-token match, with or without a leading hash.
    Word(String),
    /// Contains whitespace: substring match.
    Phrase(String),
}

/// Case-folded keyword list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    label: KeywordLabel,
    terms: Vec<Term>,
}

impl KeywordSet {
    /// One term per line; blank lines and lines starting with `# ` or a lone `#` are
    /// comments. Hashtag terms (`#TAG`, no space after the hash) are kept.
    pub fn parse(label: KeywordLabel, text: &str) -> Result<Self, AnalyticsError> {
        let mut terms = Vec::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line == "#" || line.starts_with("# ") || line.starts_with("##") {
                continue;
            }
            let folded = line.to_lowercase();
            let term = if folded.split_whitespace().count() > 1 {
                Term::Phrase(folded.split_whitespace().collect::<Vec<_>>().join(" "))
            } else if folded.starts_with('#') {
                Term::Hashtag(folded)
            } else {
                Term::Word(folded)
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(AnalyticsError::EmptyKeywordSet(format!("{label:?}")));
        }
        Ok(Self { label, terms })
    }

    pub fn load(label: KeywordLabel, path: &Path) -> Result<Self, AnalyticsError> {
        let text = std::fs::read_to_string(path).map_err(|e| AnalyticsError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(label, &text)
    }

    /// The shipped default list for `label`.
    pub fn builtin(label: KeywordLabel) -> Self {
        Self::parse(label, label.builtin_text()).expect("shipped keyword lists are non-empty")
    }

    pub fn label(&self) -> KeywordLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn matches(&self, text: &str) -> bool {
        let folded = text.to_lowercase();
        let tokens = tokenize(&folded);
        let squashed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
        self.terms.iter().any(|term| match term {
            Term::Hashtag(tag) => tokens.iter().any(|t| t == tag),
            Term::Word(w) => tokens
                .iter()
                .any(|t| t.strip_prefix('#').unwrap_or(t) == w),
            Term::Phrase(p) => squashed.contains(p.as_str()),
        })
    }
}

/// Splits on anything that is not alphanumeric or `_`; a `#` starts a new hashtag token.
fn tokenize(folded: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in folded.chars() {
        if ch == '#' {
            if !cur.is_empty() && cur != "#" {
                tokens.push(std::mem::take(&mut cur));
            }
            cur.clear();
            cur.push('#');
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if !cur.is_empty() && cur != "#" {
                tokens.push(std::mem::take(&mut cur));
            }
            cur.clear();
        }
    }
    if !cur.is_empty() && cur != "#" {
        tokens.push(cur);
    }
    tokens
}

pub fn label_qanon(profile_description: &str, partisanship: Partisanship, qanon: &KeywordSet) -> bool {
    partisanship == Partisanship::Pro && qanon.matches(profile_description)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    Anti,
    Pro,
    Unlabeled,
}

impl GroundTruth {
    /// 0 for anti, 1 for pro.
    pub fn as_label(self) -> Option<u8> {
        match self {
            GroundTruth::Anti => Some(0),
            GroundTruth::Pro => Some(1),
            GroundTruth::Unlabeled => None,
        }
    }
}

pub fn keyword_ground_truth(profile_description: &str, anti: &KeywordSet, pro: &KeywordSet) -> GroundTruth {
    match (anti.matches(profile_description), pro.matches(profile_description)) {
        (true, false) => GroundTruth::Anti,
        (false, true) => GroundTruth::Pro,
        _ => GroundTruth::Unlabeled,
    }
}

/// Registrable domain of a URL (`https://www.example.co.uk/x` gives `example.co.uk`).
pub fn registrable_domain(raw: &str) -> Option<String> {
    let parsed = Url::parse(raw)
        .or_else(|_| Url::parse(&format!("http://{raw}")))
        .ok()?;
    let host = parsed.host_str()?.trim_end_matches('.').to_ascii_lowercase();
    if host.is_empty() || host.parse::<std::net::IpAddr>().is_ok() {
        return None;
    }
    psl::domain_str(&host).map(str::to_owned)
}

/// Source trust ratings keyed by registrable domain, each in [1, 5].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MediaRatingsTable {
    ratings: BTreeMap<String, f64>,
}

impl MediaRatingsTable {
    /// Comma-separated `domain,rating` with a header row.
    pub fn parse_csv(text: &str) -> Result<Self, AnalyticsError> {
        let mut ratings = BTreeMap::new();
        for (idx, line) in text.lines().enumerate().skip(1) {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| AnalyticsError::RatingsParse { line: line_no, reason };
            let (domain, rating) = line
                .split_once(',')
                .ok_or_else(|| err("expected `domain,rating`".into()))?;
            let rating: f64 = rating
                .trim()
                .parse()
                .map_err(|e| err(format!("bad rating `{}`: {e}", rating.trim())))?;
            if !(1.0..=5.0).contains(&rating) {
                return Err(err(format!("rating {rating} outside [1,5]")));
            }
            let key = registrable_domain(domain.trim())
                .ok_or_else(|| err(format!("`{}` has no registrable domain", domain.trim())))?;
            ratings.insert(key, rating);
        }
        Ok(Self { ratings })
    }

    pub fn load(path: &Path) -> Result<Self, AnalyticsError> {
        let text = std::fs::read_to_string(path).map_err(|e| AnalyticsError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse_csv(&text)
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, f64)>>(pairs: I) -> Self {
        Self {
            ratings: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn rating_for_domain(&self, domain: &str) -> Option<f64> {
        self.ratings.get(domain).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MediaQuality {
    pub score: Option<f64>,
    pub rated_links: usize,
    pub malformed_urls: usize,
}

/// Mean rating over every rated link the account shared.
pub fn media_quality_score<'a, I>(tweets: I, ratings: &MediaRatingsTable) -> MediaQuality
where
    I: IntoIterator<Item = &'a TweetRecord>,
{
    let mut sum = 0.0;
    let mut out = MediaQuality::default();
    for url in tweets.into_iter().flat_map(|t| t.urls.iter()) {
        match registrable_domain(url) {
            None => out.malformed_urls += 1,
            Some(d) => {
                if let Some(r) = ratings.rating_for_domain(&d) {
                    sum += r;
                    out.rated_links += 1;
                }
            }
        }
    }
    if out.rated_links > 0 {
        out.score = Some(sum / out.rated_links as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountRecord {
    pub account_id: String,
    /// Mean opinion over scored tweets, 0.5 when none were scored.
    pub opinion: f64,
    pub scored_tweets: u64,
    pub tweet_count: u64,
    pub tweet_rate: f64,
    /// `None` for accounts without scored tweets.
    pub partisanship: Option<Partisanship>,
    pub qanon: bool,
    pub bot: bool,
    pub media_quality: Option<f64>,
    pub mean_toxicity: Option<f64>,
}

/// Inputs for [`build_account_records`] besides the tweets themselves.
pub struct AccountContext<'a> {
    pub rates: &'a TweetRates,
    pub bots: &'a BTreeSet<String>,
    pub descriptions: &'a HashMap<String, String>,
    pub ratings: Option<&'a MediaRatingsTable>,
    pub qanon_keywords: &'a KeywordSet,
    pub partisan_cutoff: f64,
}

/// One record per tweet author, sorted by account id.
pub fn build_account_records(tweets: &[TweetRecord], ctx: &AccountContext<'_>) -> Vec<AccountRecord> {
    let mut by_author: BTreeMap<&str, Vec<&TweetRecord>> = BTreeMap::new();
    for t in tweets {
        by_author.entry(&t.author_id).or_default().push(t);
    }
    by_author
        .into_iter()
        .map(|(id, ts)| {
            let scored: Vec<f64> = ts.iter().filter_map(|t| t.opinion).collect();
            let tox: Vec<f64> = ts.iter().filter_map(|t| t.toxicity).collect();
            let opinion = if scored.is_empty() {
                0.5
            } else {
                scored.iter().sum::<f64>() / scored.len() as f64
            };
            let partisanship = (!scored.is_empty()).then(|| {
                label_partisanship_with(opinion.clamp(0.0, 1.0), ctx.partisan_cutoff)
                    .expect("mean of [0,1] values")
            });
            let description = ctx.descriptions.get(id).map(String::as_str).unwrap_or("");
            let qanon = partisanship
                .map(|p| label_qanon(description, p, ctx.qanon_keywords))
                .unwrap_or(false);
            AccountRecord {
                account_id: id.to_owned(),
                opinion,
                scored_tweets: scored.len() as u64,
                tweet_count: ts.len() as u64,
                tweet_rate: ctx.rates.rate(id),
                partisanship,
                qanon,
                bot: ctx.bots.contains(id),
                media_quality: ctx
                    .ratings
                    .and_then(|r| media_quality_score(ts.iter().copied(), r).score),
                mean_toxicity: (!tox.is_empty()).then(|| tox.iter().sum::<f64>() / tox.len() as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    /// `None` sorts first; rendered as `unscored`.
    pub partisanship: Option<Partisanship>,
    pub bot: bool,
    pub qanon: bool,
}

impl GroupKey {
    pub fn of(a: &AccountRecord) -> Self {
        Self {
            partisanship: a.partisanship,
            bot: a.bot,
            qanon: a.qanon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub count: u64,
    pub tweet_count: u64,
    pub mean_rate: f64,
    pub mean_media_quality: Option<f64>,
    pub mean_toxicity: Option<f64>,
}

fn mean_opt<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(rows: &[&AccountRecord]) -> GroupStats {
    GroupStats {
        count: rows.len() as u64,
        tweet_count: rows.iter().map(|a| a.tweet_count).sum(),
        mean_rate: mean_opt(rows.iter().map(|a| a.tweet_rate)).unwrap_or(0.0),
        mean_media_quality: mean_opt(rows.iter().filter_map(|a| a.media_quality)),
        mean_toxicity: mean_opt(rows.iter().filter_map(|a| a.mean_toxicity)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub rows: Vec<(GroupKey, GroupStats)>,
    pub totals: GroupStats,
}

pub fn group_summary(accounts: &[AccountRecord]) -> GroupSummary {
    let mut cells: BTreeMap<GroupKey, Vec<&AccountRecord>> = BTreeMap::new();
    for a in accounts {
        cells.entry(GroupKey::of(a)).or_default().push(a);
    }
    let all: Vec<&AccountRecord> = accounts.iter().collect();
    GroupSummary {
        rows: cells.into_iter().map(|(k, v)| (k, summarize(&v))).collect(),
        totals: summarize(&all),
    }
}

/// Accounts most retweeted by retweeters passing `retweeter_filter`, ties
/// broken by ascending account id.
pub fn retweet_leaderboard<F>(
    retweets: &DirectedWeightedGraph,
    retweeter_filter: F,
    k: usize,
) -> Vec<(String, f64)>
where
    F: Fn(&str) -> bool,
{
    let mut received: Vec<(String, f64)> = retweets
        .node_ids()
        .filter_map(|u| {
            let total: f64 = retweets
                .out_neighbors(u)
                .iter()
                .filter(|(v, _)| retweeter_filter(retweets.label(*v)))
                .map(|(_, w)| w)
                .sum();
            (total > 0.0).then(|| (retweets.label(u).to_owned(), total))
        })
        .collect();
    received.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    received.truncate(k.max(1));
    received
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FollowerOverlap {
    pub a_only: usize,
    pub b_only: usize,
    pub both: usize,
}

/// Partitions the followers of two account sets by which side(s) they follow.
pub fn follower_overlap(
    followers: &DirectedWeightedGraph,
    set_a: &BTreeSet<NodeId>,
    set_b: &BTreeSet<NodeId>,
) -> FollowerOverlap {
    let collect = |set: &BTreeSet<NodeId>| -> BTreeSet<NodeId> {
        set.iter()
            .filter(|id| followers.contains(**id))
            .flat_map(|&id| followers.out_neighbors(id).ids())
            .collect()
    };
    let fa = collect(set_a);
    let fb = collect(set_b);
    let both = fa.intersection(&fb).count();
    FollowerOverlap {
        a_only: fa.len() - both,
        b_only: fb.len() - both,
        both,
    }
}

/// Share of `bot`'s labeled followers that share its partisanship. `None` when
/// the bot or all its followers are unlabeled.
pub fn co_partisan_fraction<F>(followers: &DirectedWeightedGraph, bot: NodeId, label_of: F) -> Option<f64>
where
    F: Fn(&str) -> Option<Partisanship>,
{
    if !followers.contains(bot) {
        return None;
    }
    let own = label_of(followers.label(bot))?;
    let (mut same, mut labeled) = (0usize, 0usize);
    for f in followers.out_neighbors(bot).ids() {
        if let Some(p) = label_of(followers.label(f)) {
            labeled += 1;
            same += (p == own) as usize;
        }
    }
    (labeled > 0).then(|| same as f64 / labeled as f64)
}
