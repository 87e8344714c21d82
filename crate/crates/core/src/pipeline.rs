//! Stage runner. Each stage reads the raw inputs plus earlier stage outputs
//! from flat files, writes its own outputs atomically, and records checksums
//! in `manifest.json` inside the output directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{
    build_account_records, co_partisan_fraction, follower_overlap, group_summary, retweet_leaderboard,
    AccountContext, AccountRecord, AnalyticsError, GroupStats, KeywordLabel, KeywordSet, MediaRatingsTable,
    Partisanship,
};
use crate::botdetect::{detect_bots_daily, probability_histogram, write_posterior_csv, BotDetectError};
use crate::config::{ConfigError, Paths, PipelineConfig};
use crate::ghic::{daily_ghic_series, ghic_per_bot, write_boxplot_csv, write_series_csv, Engine, GhicError, GhicGroup};
use crate::graph::{DirectedWeightedGraph, GraphBuilder};
use crate::ingest::{
    build_follower_network, daily_retweet_networks, load_profiles, load_tweets, tweet_rates, CollectionWindow,
    IngestError, SkippedLine, TweetRecord, UserProfileRecord,
};
use crate::opinion::{identify_stubborn, AccountOpinion, OpinionError};
use crate::stats::{two_proportion_z_test, welch_t_test};
use crate::synth::{generate, write_corpus, SynthError, SynthSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input error: {0}")]
    Input(String),
    #[error("stage `{stage}` has not produced {path}; run it first")]
    MissingStage { stage: &'static str, path: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("cannot write {path}: {reason}")]
    Output { path: String, reason: String },
}

impl PipelineError {
    /// 2 config, 3 input, 4 numerical, 5 output.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Input(_) | PipelineError::MissingStage { .. } => 3,
            PipelineError::Numeric(_) => 4,
            PipelineError::Output { .. } => 5,
        }
    }
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

impl From<AnalyticsError> for PipelineError {
    fn from(e: AnalyticsError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

impl From<BotDetectError> for PipelineError {
    fn from(e: BotDetectError) -> Self {
        PipelineError::Numeric(e.to_string())
    }
}

impl From<OpinionError> for PipelineError {
    fn from(e: OpinionError) -> Self {
        PipelineError::Numeric(e.to_string())
    }
}

impl From<GhicError> for PipelineError {
    fn from(e: GhicError) -> Self {
        PipelineError::Numeric(e.to_string())
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { path, source } => PipelineError::Output {
                path,
                reason: source.to_string(),
            },
            other => PipelineError::Config(ConfigError::Parse(other.to_string())),
        }
    }
}

/// Sizes the global worker pool; 0 keeps the default of one thread per core.
#[cfg(feature = "parallel")]
pub fn init_workers(workers: usize) {
    if workers > 0 {
        // A second call keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn init_workers(_workers: usize) {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub files: BTreeMap<String, FileEntry>,
    pub counts: BTreeMap<String, u64>,
    pub notes: Vec<String>,
    pub config: String,
}

pub type Manifest = BTreeMap<String, StageManifest>;

pub fn read_manifest(dir: &Path) -> Result<Manifest, PipelineError> {
    let path = dir.join(MANIFEST);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::new()),
        Err(e) => Err(PipelineError::Input(format!("{}: {e}", path.display()))),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let err = |e: std::io::Error| PipelineError::Output {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

/// Summary of one stage run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: &'static str,
    pub files: Vec<String>,
    pub counts: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

struct StageWriter {
    dir: PathBuf,
    stage: &'static str,
    manifest: StageManifest,
}

impl StageWriter {
    fn new(dir: &Path, stage: &'static str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            stage,
            manifest: StageManifest::default(),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        write_atomic(&self.dir.join(rel), bytes)?;
        self.manifest.files.insert(
            rel.to_owned(),
            FileEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    /// Removes a subdirectory owned by this stage so reruns leave no stale files.
    fn reset_dir(&self, rel: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(rel);
        match fs::remove_dir_all(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(PipelineError::Output {
                path: path.display().to_string(),
                reason: e.to_string(),
            }),
        }
    }

    fn count(&mut self, key: &str, value: usize) {
        self.manifest.counts.insert(key.to_owned(), value as u64);
    }

    fn note(&mut self, note: impl Into<String>) {
        self.manifest.notes.push(note.into());
    }

    fn finish(mut self, config: String) -> Result<StageReport, PipelineError> {
        self.manifest.config = config;
        let mut all = read_manifest(&self.dir)?;
        all.insert(self.stage.to_owned(), self.manifest.clone());
        let text = serde_json::to_string_pretty(&all).expect("manifest serializes") + "\n";
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(StageReport {
            stage: self.stage,
            files: self.manifest.files.keys().cloned().collect(),
            counts: self.manifest.counts,
            notes: self.manifest.notes,
        })
    }
}

/// Config with machine-specific fields normalized, so manifests compare
/// across output locations.
fn snapshot(cfg: &PipelineConfig) -> String {
    let name = |p: &Path| PathBuf::from(p.file_name().unwrap_or_default());
    let mut c = cfg.clone();
    c.paths = Paths {
        tweets: name(&cfg.paths.tweets),
        profiles: name(&cfg.paths.profiles),
        ratings: cfg.paths.ratings.as_deref().map(name),
        qanon_keywords: cfg.paths.qanon_keywords.as_deref().map(name),
        output_dir: PathBuf::from("."),
    };
    c.workers = 0;
    c.to_toml()
}

fn require_stage(dir: &Path, stage: &'static str, file: &str) -> Result<PathBuf, PipelineError> {
    let path = dir.join(file);
    let manifest = read_manifest(dir)?;
    if !path.exists() || !manifest.get(stage).is_some_and(|m| m.files.contains_key(file)) {
        return Err(PipelineError::MissingStage {
            stage,
            path: path.display().to_string(),
        });
    }
    Ok(path)
}

fn require_input(path: &Path) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Input(format!("missing input file {}", path.display())));
    }
    Ok(())
}

fn read_tweets(cfg: &PipelineConfig) -> Result<(Vec<TweetRecord>, Vec<SkippedLine>), PipelineError> {
    require_input(&cfg.paths.tweets)?;
    let (tweets, skipped) = load_tweets(&cfg.paths.tweets)?.collect_all()?;
    if tweets.is_empty() {
        return Err(PipelineError::Input(format!("no valid tweets in {}", cfg.paths.tweets.display())));
    }
    Ok((tweets, skipped))
}

fn read_profiles(cfg: &PipelineConfig) -> Result<(Vec<UserProfileRecord>, Vec<SkippedLine>), PipelineError> {
    require_input(&cfg.paths.profiles)?;
    Ok(load_profiles(&cfg.paths.profiles)?.collect_all()?)
}

fn authors(tweets: &[TweetRecord]) -> BTreeSet<String> {
    tweets.iter().map(|t| t.author_id.clone()).collect()
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    account_id: String,
    tweet_count: u64,
    rate: f64,
}

#[derive(Debug, Serialize)]
struct SkipRow<'a> {
    file: &'a str,
    line: usize,
    reason: &'a str,
}

/// Follower network, daily retweet networks and posting rates.
pub fn run_build(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let (tweets, skipped_tweets) = read_tweets(cfg)?;
    let (profiles, skipped_profiles) = read_profiles(cfg)?;
    let window = CollectionWindow::covering(&tweets).expect("nonempty corpus");
    let rates = tweet_rates(&tweets, window)?;
    let accounts = authors(&tweets);
    let profile_count = profiles.len();
    let follower = build_follower_network(profiles, &accounts, cfg.opinion.followings_cap);
    let daily = daily_retweet_networks(&tweets);

    let dir = &cfg.paths.output_dir;
    let mut w = StageWriter::new(dir, "build");
    let mut buf = Vec::new();
    follower.graph.write_edge_list(&mut buf).expect("in-memory write");
    w.write("follower_network.tsv", &buf)?;
    w.reset_dir("retweet_networks")?;
    for (day, g) in &daily {
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).expect("in-memory write");
        w.write(&format!("retweet_networks/{day}.tsv"), &buf)?;
    }
    let rate_rows: Vec<RateRow> = rates
        .counts()
        .iter()
        .map(|(a, &c)| RateRow {
            account_id: a.clone(),
            tweet_count: c,
            rate: rates.rate(a),
        })
        .collect();
    w.write("rates.csv", &csv_bytes(&rate_rows))?;
    let tweets_name = cfg.paths.tweets.display().to_string();
    let profiles_name = cfg.paths.profiles.display().to_string();
    let skip_rows: Vec<SkipRow> = skipped_tweets
        .iter()
        .map(|s| SkipRow { file: "tweets", line: s.line, reason: &s.reason })
        .chain(skipped_profiles.iter().map(|s| SkipRow { file: "profiles", line: s.line, reason: &s.reason }))
        .collect();
    let mut skip_buf = csv_bytes(&skip_rows);
    if skip_rows.is_empty() {
        skip_buf = b"file,line,reason\n".to_vec();
    }
    w.write("ingest_skipped.csv", &skip_buf)?;
    for s in skipped_tweets.iter().take(5) {
        w.note(format!("{tweets_name}:{}: skipped ({})", s.line, s.reason));
    }
    for s in skipped_profiles.iter().take(5) {
        w.note(format!("{profiles_name}:{}: skipped ({})", s.line, s.reason));
    }
    if follower.truncated_profiles > 0 {
        w.note(format!(
            "{} following lists exceeded the cap of {} and were truncated",
            follower.truncated_profiles, cfg.opinion.followings_cap
        ));
    }
    w.count("tweets", tweets.len());
    w.count("retweets", tweets.iter().filter(|t| t.is_retweet()).count());
    w.count("accounts", accounts.len());
    w.count("profiles", profile_count);
    w.count("follower_edges", follower.graph.edge_count());
    w.count("days", daily.len());
    w.count("window_days", window.duration_days() as usize);
    w.count("truncated_profiles", follower.truncated_profiles);
    w.count("skipped_lines", skipped_tweets.len() + skipped_profiles.len());
    w.finish(snapshot(cfg))
}

#[derive(Debug, Serialize, Deserialize)]
struct BotRow {
    account_id: String,
    days_flagged: u64,
    max_probability: f64,
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    day: String,
    bin_start: f64,
    bin_end: f64,
    count: usize,
}

/// Daily posteriors, the union bot set and histogram data.
pub fn run_detect_bots(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let dir = &cfg.paths.output_dir;
    require_stage(dir, "build", "rates.csv")?;
    let (tweets, _) = read_tweets(cfg)?;
    let bd = &cfg.bot_detection;
    let detection = detect_bots_daily(&tweets, &bd.params, bd.threshold)?;

    let mut w = StageWriter::new(dir, "detect-bots");
    w.reset_dir("posteriors")?;
    let mut flagged: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
    let mut hist_rows = Vec::new();
    let mut nonconverged = 0;
    for d in &detection.days {
        let mut buf = Vec::new();
        write_posterior_csv(&d.network, &d.posterior, &mut buf).expect("in-memory write");
        w.write(&format!("posteriors/{}.csv", d.day), &buf)?;
        for id in d.network.node_ids() {
            let label = d.network.label(id);
            if d.bots.contains(label) {
                let e = flagged.entry(label).or_insert((0, 0.0));
                e.0 += 1;
                e.1 = e.1.max(d.posterior.get(id));
            }
        }
        let hist = probability_histogram(&d.posterior.probabilities, bd.histogram_bins)?;
        let width = hist.bin_width();
        for (k, &count) in hist.counts.iter().enumerate() {
            hist_rows.push(HistogramRow {
                day: d.day.to_string(),
                bin_start: k as f64 * width,
                bin_end: ((k + 1) as f64 * width).min(1.0),
                count,
            });
        }
        if !d.posterior.converged {
            nonconverged += 1;
            w.note(format!(
                "{}: message passing stopped at residual {:e} without converging",
                d.day, d.posterior.residual
            ));
        }
    }
    let bot_rows: Vec<BotRow> = flagged
        .into_iter()
        .map(|(a, (days, p))| BotRow {
            account_id: a.to_owned(),
            days_flagged: days,
            max_probability: p,
        })
        .collect();
    let bots_bytes = if bot_rows.is_empty() {
        b"account_id,days_flagged,max_probability\n".to_vec()
    } else {
        csv_bytes(&bot_rows)
    };
    w.write("bots.csv", &bots_bytes)?;
    let hist_bytes = if hist_rows.is_empty() {
        b"day,bin_start,bin_end,count\n".to_vec()
    } else {
        csv_bytes(&hist_rows)
    };
    w.write("bot_histogram.csv", &hist_bytes)?;
    w.count("days", detection.days.len());
    w.count("bots", detection.bots.len());
    w.count("nonconverged_days", nonconverged);
    w.finish(snapshot(cfg))
}

fn read_bots(dir: &Path) -> Result<BTreeSet<String>, PipelineError> {
    let path = require_stage(dir, "detect-bots", "bots.csv")?;
    Ok(read_csv::<BotRow>(&path)?.into_iter().map(|r| r.account_id).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct AccountRow {
    account_id: String,
    opinion: f64,
    scored_tweets: u64,
    tweet_count: u64,
    tweet_rate: f64,
    partisanship: Option<Partisanship>,
    qanon: bool,
    bot: bool,
    #[serde(default)]
    media_quality: Option<f64>,
    mean_toxicity: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AccountRowNoMedia<'a> {
    account_id: &'a str,
    opinion: f64,
    scored_tweets: u64,
    tweet_count: u64,
    tweet_rate: f64,
    partisanship: Option<Partisanship>,
    qanon: bool,
    bot: bool,
    mean_toxicity: Option<f64>,
}

impl From<&AccountRecord> for AccountRow {
    fn from(a: &AccountRecord) -> Self {
        Self {
            account_id: a.account_id.clone(),
            opinion: a.opinion,
            scored_tweets: a.scored_tweets,
            tweet_count: a.tweet_count,
            tweet_rate: a.tweet_rate,
            partisanship: a.partisanship,
            qanon: a.qanon,
            bot: a.bot,
            media_quality: a.media_quality,
            mean_toxicity: a.mean_toxicity,
        }
    }
}

impl From<AccountRow> for AccountRecord {
    fn from(r: AccountRow) -> Self {
        Self {
            account_id: r.account_id,
            opinion: r.opinion,
            scored_tweets: r.scored_tweets,
            tweet_count: r.tweet_count,
            tweet_rate: r.tweet_rate,
            partisanship: r.partisanship,
            qanon: r.qanon,
            bot: r.bot,
            media_quality: r.media_quality,
            mean_toxicity: r.mean_toxicity,
        }
    }
}

#[derive(Debug, Serialize)]
struct GroupRow {
    partisanship: String,
    bot: String,
    qanon: String,
    count: u64,
    tweet_count: u64,
    mean_rate: f64,
    mean_media_quality: Option<f64>,
    mean_toxicity: Option<f64>,
}

fn group_row(partisanship: String, bot: String, qanon: String, s: &GroupStats) -> GroupRow {
    GroupRow {
        partisanship,
        bot,
        qanon,
        count: s.count,
        tweet_count: s.tweet_count,
        mean_rate: s.mean_rate,
        mean_media_quality: s.mean_media_quality,
        mean_toxicity: s.mean_toxicity,
    }
}

fn qanon_keywords(cfg: &PipelineConfig) -> Result<KeywordSet, PipelineError> {
    match &cfg.paths.qanon_keywords {
        Some(p) => {
            require_input(p)?;
            Ok(KeywordSet::load(KeywordLabel::Qanon, p)?)
        }
        None => Ok(KeywordSet::builtin(KeywordLabel::Qanon)),
    }
}

/// Per-account table and the group summary.
pub fn run_classify(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let dir = &cfg.paths.output_dir;
    let bots = read_bots(dir)?;
    let (tweets, _) = read_tweets(cfg)?;
    let (profiles, _) = read_profiles(cfg)?;
    let window = CollectionWindow::covering(&tweets).expect("nonempty corpus");
    let rates = tweet_rates(&tweets, window)?;
    let descriptions: HashMap<String, String> =
        profiles.into_iter().map(|p| (p.account_id, p.description)).collect();
    let mut w = StageWriter::new(dir, "classify");
    let ratings = match &cfg.paths.ratings {
        Some(p) if p.exists() => Some(MediaRatingsTable::load(p)?),
        Some(p) => {
            w.note(format!("ratings file {} not found; media quality omitted", p.display()));
            None
        }
        None => {
            w.note("no ratings file configured; media quality omitted");
            None
        }
    };
    let keywords = qanon_keywords(cfg)?;
    let ctx = AccountContext {
        rates: &rates,
        bots: &bots,
        descriptions: &descriptions,
        ratings: ratings.as_ref(),
        qanon_keywords: &keywords,
        partisan_cutoff: cfg.classify.partisan_cutoff,
    };
    let records = build_account_records(&tweets, &ctx);
    let bytes = if ratings.is_some() {
        csv_bytes(&records.iter().map(AccountRow::from).collect::<Vec<_>>())
    } else {
        csv_bytes(
            &records
                .iter()
                .map(|a| AccountRowNoMedia {
                    account_id: &a.account_id,
                    opinion: a.opinion,
                    scored_tweets: a.scored_tweets,
                    tweet_count: a.tweet_count,
                    tweet_rate: a.tweet_rate,
                    partisanship: a.partisanship,
                    qanon: a.qanon,
                    bot: a.bot,
                    mean_toxicity: a.mean_toxicity,
                })
                .collect::<Vec<_>>(),
        )
    };
    w.write("accounts.csv", &bytes)?;
    let summary = group_summary(&records);
    let mut rows: Vec<GroupRow> = summary
        .rows
        .iter()
        .map(|(k, s)| {
            let p = k.partisanship.map_or("unscored".to_string(), |p| p.to_string());
            group_row(p, k.bot.to_string(), k.qanon.to_string(), s)
        })
        .collect();
    rows.push(group_row("all".into(), "all".into(), "all".into(), &summary.totals));
    w.write("group_summary.csv", &csv_bytes(&rows))?;
    w.count("accounts", records.len());
    w.count("bots", records.iter().filter(|a| a.bot).count());
    w.count("qanon", records.iter().filter(|a| a.qanon).count());
    w.count("unscored", records.iter().filter(|a| a.partisanship.is_none()).count());
    w.finish(snapshot(cfg))
}

fn read_accounts(dir: &Path) -> Result<Vec<AccountRecord>, PipelineError> {
    let path = require_stage(dir, "classify", "accounts.csv")?;
    Ok(read_csv::<AccountRow>(&path)?.into_iter().map(AccountRecord::from).collect())
}

#[derive(Debug, Serialize)]
struct StubbornRow<'a> {
    account_id: &'a str,
    opinion: f64,
    bot: bool,
}

/// Daily influence of each configured bot group and its per-bot distribution.
pub fn run_ghic(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let dir = &cfg.paths.output_dir;
    let accounts = read_accounts(dir)?;
    let (tweets, _) = read_tweets(cfg)?;
    let (profiles, _) = read_profiles(cfg)?;
    let window = CollectionWindow::covering(&tweets).expect("nonempty corpus");
    let rates = tweet_rates(&tweets, window)?;
    let follower = build_follower_network(profiles, &authors(&tweets), cfg.opinion.followings_cap);
    let opinions: Vec<AccountOpinion> = accounts
        .iter()
        .map(|a| AccountOpinion {
            account: a.account_id.clone(),
            opinion: a.opinion,
            bot: a.bot,
        })
        .collect();
    let assignment = identify_stubborn(&opinions, cfg.opinion.low_percentile, cfg.opinion.high_percentile)?;
    let groups: Vec<GhicGroup> = cfg
        .ghic
        .groups
        .iter()
        .map(|g| GhicGroup {
            name: g.name.clone(),
            members: accounts
                .iter()
                .filter(|a| a.bot && g.matches(a.partisanship, a.qanon))
                .map(|a| a.account_id.clone())
                .collect(),
        })
        .collect();
    let engine = Engine::Solver(cfg.opinion.solver);
    let series = daily_ghic_series(&tweets, &follower.graph, &rates, &assignment, &groups, engine)?;
    let per_bot = ghic_per_bot(&series, &groups);

    let mut w = StageWriter::new(dir, "ghic");
    let mut buf = Vec::new();
    write_series_csv(&series, &mut buf).expect("in-memory write");
    w.write("ghic_series.csv", &buf)?;
    let mut buf = Vec::new();
    write_boxplot_csv(&per_bot, &mut buf).expect("in-memory write");
    w.write("ghic_per_bot.csv", &buf)?;
    let stubborn_rows: Vec<StubbornRow> = accounts
        .iter()
        .filter(|a| assignment.is_stubborn(&a.account_id))
        .map(|a| StubbornRow {
            account_id: &a.account_id,
            opinion: a.opinion,
            bot: a.bot,
        })
        .collect();
    let bytes = if stubborn_rows.is_empty() {
        b"account_id,opinion,bot\n".to_vec()
    } else {
        csv_bytes(&stubborn_rows)
    };
    w.write("stubborn.csv", &bytes)?;
    for note in &series.notes {
        w.note(note.clone());
    }
    for d in per_bot.iter().filter(|d| d.summary.is_none()) {
        w.note(format!("group `{}` never had an active member", d.group));
    }
    w.count("days", series.days.len());
    w.count("skipped_days", series.notes.len());
    w.count("stubborn", assignment.stubborn().len());
    for g in &groups {
        w.count(&format!("group_{}_members", g.name), g.members.len());
    }
    w.finish(snapshot(cfg))
}

/// Writes a synthetic corpus described by `spec` into `out`.
pub fn run_synth(spec: &SynthSpec, out: &Path) -> Result<StageReport, PipelineError> {
    let corpus = generate(spec)?;
    write_corpus(&corpus, out)?;
    let mut w = StageWriter::new(out, "synth");
    for name in ["tweets.jsonl", "profiles.jsonl", "ratings.csv", "labels_truth.csv"] {
        let path = out.join(name);
        let bytes = fs::read(&path).map_err(|e| PipelineError::Output {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        w.manifest.files.insert(
            name.to_owned(),
            FileEntry {
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
    }
    w.count("tweets", corpus.tweets.len());
    w.count("accounts", corpus.truth.len());
    w.count("planted_bots", corpus.truth.iter().filter(|t| t.is_bot).count());
    w.finish(spec.to_toml())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3}"))
}

fn fmt_p(p: f64) -> String {
    if p < 1e-6 {
        "<1e-6".into()
    } else {
        format!("{p:.3e}")
    }
}

fn all_retweets(tweets: &[TweetRecord]) -> DirectedWeightedGraph {
    let mut b = GraphBuilder::new();
    for t in tweets {
        b.add_node(&t.author_id);
        if let Some(src) = &t.retweeted_author_id {
            b.add_interaction(src, &t.author_id, 1.0).expect("validated on ingest");
        }
    }
    b.build()
}

/// Human-readable summary of whatever stage outputs exist.
pub fn run_report(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    use std::fmt::Write as _;
    let dir = &cfg.paths.output_dir;
    let manifest = read_manifest(dir)?;
    let mut r = String::new();
    let mut w = StageWriter::new(dir, "report");
    writeln!(r, "Bot impact report").unwrap();
    writeln!(r, "=================").unwrap();

    if let Some(b) = manifest.get("build") {
        writeln!(r, "\nCorpus").unwrap();
        for (k, v) in &b.counts {
            writeln!(r, "  {k:<20} {v}").unwrap();
        }
    } else {
        writeln!(r, "\nCorpus section omitted: the build stage has not run.").unwrap();
    }

    let accounts = if manifest.contains_key("classify") { Some(read_accounts(dir)?) } else { None };
    match &accounts {
        None => {
            writeln!(r, "\nAccount sections omitted: the classify stage has not run.").unwrap();
            w.note("classify outputs missing");
        }
        Some(accounts) => {
            let summary = group_summary(accounts);
            writeln!(r, "\nAccount groups").unwrap();
            writeln!(
                r,
                "  {:<10} {:<5} {:<6} {:>8} {:>9} {:>10} {:>8} {:>8}",
                "side", "bot", "qanon", "accounts", "tweets", "rate/day", "media", "toxic"
            )
            .unwrap();
            for (k, s) in &summary.rows {
                let side = k.partisanship.map_or("unscored".to_string(), |p| p.to_string());
                writeln!(
                    r,
                    "  {:<10} {:<5} {:<6} {:>8} {:>9} {:>10.3} {:>8} {:>8}",
                    side,
                    k.bot,
                    k.qanon,
                    s.count,
                    s.tweet_count,
                    s.mean_rate,
                    fmt_opt(s.mean_media_quality),
                    fmt_opt(s.mean_toxicity)
                )
                .unwrap();
            }
            let t = &summary.totals;
            writeln!(
                r,
                "  {:<10} {:<5} {:<6} {:>8} {:>9} {:>10.3} {:>8} {:>8}",
                "all", "", "", t.count, t.tweet_count, t.mean_rate, fmt_opt(t.mean_media_quality), fmt_opt(t.mean_toxicity)
            )
            .unwrap();

            writeln!(r, "\nBot fraction by group").unwrap();
            let groups: [(&str, Box<dyn Fn(&AccountRecord) -> bool>); 4] = [
                ("anti", Box::new(|a| a.partisanship == Some(Partisanship::Anti))),
                ("pro", Box::new(|a| a.partisanship == Some(Partisanship::Pro))),
                ("pro non-qanon", Box::new(|a| a.partisanship == Some(Partisanship::Pro) && !a.qanon)),
                ("qanon", Box::new(|a| a.qanon)),
            ];
            let mut fractions = BTreeMap::new();
            for (name, f) in &groups {
                let members: Vec<&AccountRecord> = accounts.iter().filter(|a| f(a)).collect();
                let bots = members.iter().filter(|a| a.bot).count();
                fractions.insert(*name, (bots as u64, members.len() as u64));
                let frac = if members.is_empty() { 0.0 } else { bots as f64 / members.len() as f64 };
                writeln!(r, "  {name:<14} {bots:>6} / {:<6} = {frac:.4}", members.len()).unwrap();
            }
            let (qb, qn) = fractions["qanon"];
            let (pb, pn) = fractions["pro non-qanon"];
            if let Ok(t) = two_proportion_z_test(qb, qn, pb, pn) {
                writeln!(r, "  qanon vs pro non-qanon: difference {:.4}, p {}", t.difference, fmt_p(t.p_value)).unwrap();
            }

            writeln!(r, "\nTweet rates (tweets/day)").unwrap();
            let rates_of = |f: &dyn Fn(&AccountRecord) -> bool| -> Vec<f64> {
                accounts.iter().filter(|a| f(a)).map(|a| a.tweet_rate).collect()
            };
            let bot_rates = rates_of(&|a| a.bot);
            let human_rates = rates_of(&|a| !a.bot && !a.qanon);
            let qanon_humans = rates_of(&|a| !a.bot && a.qanon);
            let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
            writeln!(r, "  bots {:.3}, qanon humans {:.3}, other humans {:.3}", mean(&bot_rates), mean(&qanon_humans), mean(&human_rates)).unwrap();
            if let Ok(t) = welch_t_test(&bot_rates, &human_rates) {
                writeln!(r, "  bots vs other humans: difference {:.3}, p {}", t.difference, fmt_p(t.p_value)).unwrap();
            }
            if let Ok(t) = welch_t_test(&qanon_humans, &human_rates) {
                writeln!(r, "  qanon humans vs other humans: difference {:.3}, p {}", t.difference, fmt_p(t.p_value)).unwrap();
            }

            if cfg.paths.tweets.exists() && cfg.paths.profiles.exists() {
                let (tweets, _) = read_tweets(cfg)?;
                let (profiles, _) = read_profiles(cfg)?;
                let by_id: HashMap<&str, &AccountRecord> = accounts.iter().map(|a| (a.account_id.as_str(), a)).collect();
                let retweets = all_retweets(&tweets);
                writeln!(r, "\nMost retweeted accounts").unwrap();
                for (name, side) in [("anti bots", Partisanship::Anti), ("pro bots", Partisanship::Pro)] {
                    let board = retweet_leaderboard(
                        &retweets,
                        |id| by_id.get(id).is_some_and(|a| a.bot && a.partisanship == Some(side)),
                        5,
                    );
                    let cells: Vec<String> = board.iter().map(|(a, c)| format!("{a} ({c})")).collect();
                    writeln!(r, "  by {name}: {}", if cells.is_empty() { "-".into() } else { cells.join(", ") }).unwrap();
                }

                let follower = build_follower_network(profiles, &authors(&tweets), cfg.opinion.followings_cap).graph;
                let bot_nodes = |side: Partisanship| -> BTreeSet<_> {
                    accounts
                        .iter()
                        .filter(|a| a.bot && a.partisanship == Some(side))
                        .filter_map(|a| follower.node(&a.account_id))
                        .collect()
                };
                let (anti, pro) = (bot_nodes(Partisanship::Anti), bot_nodes(Partisanship::Pro));
                let ov = follower_overlap(&follower, &anti, &pro);
                writeln!(r, "\nBot followers").unwrap();
                writeln!(r, "  anti bots only {}, pro bots only {}, both {}", ov.a_only, ov.b_only, ov.both).unwrap();
                let label = |id: &str| by_id.get(id).and_then(|a| a.partisanship);
                writeln!(r, "\nCo-partisan follower fraction (mean over bots)").unwrap();
                for (name, f) in &groups {
                    let fr: Vec<f64> = accounts
                        .iter()
                        .filter(|a| a.bot && f(a))
                        .filter_map(|a| follower.node(&a.account_id))
                        .filter_map(|id| co_partisan_fraction(&follower, id, label))
                        .collect();
                    writeln!(r, "  {name:<14} {} bots, mean {}", fr.len(), fmt_opt((!fr.is_empty()).then(|| mean(&fr)))).unwrap();
                }
            }
        }
    }

    let per_bot = dir.join("ghic_per_bot.csv");
    if manifest.contains_key("ghic") && per_bot.exists() {
        writeln!(r, "\nImpact: daily influence per bot").unwrap();
        let text = fs::read_to_string(&per_bot).map_err(|e| PipelineError::Input(e.to_string()))?;
        for line in text.lines() {
            writeln!(r, "  {line}").unwrap();
        }
    } else {
        writeln!(r, "\nImpact section omitted: the ghic stage has not run.").unwrap();
        w.note("ghic outputs missing; impact section omitted");
    }
    w.write("report.txt", r.as_bytes())?;
    w.finish(snapshot(cfg))
}

/// Every analysis stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageReport>, PipelineError> {
    Ok(vec![
        run_build(cfg)?,
        run_detect_bots(cfg)?,
        run_classify(cfg)?,
        run_ghic(cfg)?,
        run_report(cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{CorpusParams, OpinionParams, RateParams, Topology};

    fn small_corpus(dir: &Path) -> PipelineConfig {
        let spec = SynthSpec {
            seed: 3,
            topology: Topology::Corpus(CorpusParams { accounts: 120, days: 4, ..Default::default() }),
            opinions: OpinionParams::default(),
            rates: RateParams::default(),
        };
        run_synth(&spec, &dir.join("data")).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.paths.tweets = dir.join("data/tweets.jsonl");
        cfg.paths.profiles = dir.join("data/profiles.jsonl");
        cfg.paths.ratings = Some(dir.join("data/ratings.csv"));
        cfg.paths.output_dir = dir.join("out");
        cfg
    }

    #[test]
    fn stages_require_predecessors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_corpus(dir.path());
        let err = run_detect_bots(&cfg).unwrap_err();
        assert!(matches!(err, PipelineError::MissingStage { stage: "build", .. }));
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(run_ghic(&cfg), Err(PipelineError::MissingStage { stage: "classify", .. })));
    }

    #[test]
    fn missing_profiles_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_corpus(dir.path());
        cfg.paths.profiles = dir.path().join("nope.jsonl");
        let err = run_build(&cfg).unwrap_err();
        assert!(err.to_string().contains("nope.jsonl"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn full_run_and_rerun_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_corpus(dir.path());
        let reports = run_all(&cfg).unwrap();
        assert_eq!(reports.len(), 5);
        let first = fs::read(cfg.paths.output_dir.join(MANIFEST)).unwrap();
        run_all(&cfg).unwrap();
        assert_eq!(first, fs::read(cfg.paths.output_dir.join(MANIFEST)).unwrap());
        let report = fs::read_to_string(cfg.paths.output_dir.join("report.txt")).unwrap();
        for section in ["Account groups", "Bot fraction", "Most retweeted", "Bot followers", "Impact"] {
            assert!(report.contains(section), "missing {section}");
        }
        assert!(!report.contains("omitted"));
    }

    #[test]
    fn report_without_ghic_notes_omission() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_corpus(dir.path());
        run_build(&cfg).unwrap();
        run_detect_bots(&cfg).unwrap();
        run_classify(&cfg).unwrap();
        let rep = run_report(&cfg).unwrap();
        assert!(rep.notes.iter().any(|n| n.contains("ghic")));
        let text = fs::read_to_string(cfg.paths.output_dir.join("report.txt")).unwrap();
        assert!(text.contains("Impact section omitted"));
    }

    #[test]
    fn missing_ratings_drops_media_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_corpus(dir.path());
        cfg.paths.ratings = Some(dir.path().join("absent.csv"));
        run_build(&cfg).unwrap();
        run_detect_bots(&cfg).unwrap();
        let rep = run_classify(&cfg).unwrap();
        assert!(rep.notes.iter().any(|n| n.contains("media quality omitted")));
        let text = fs::read_to_string(cfg.paths.output_dir.join("accounts.csv")).unwrap();
        assert!(!text.lines().next().unwrap().contains("media_quality"));
        // Later stages still read the table.
        run_ghic(&cfg).unwrap();
    }
}
