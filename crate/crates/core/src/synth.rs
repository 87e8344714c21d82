//! Seeded synthetic networks and corpora with planted ground truth.
//!
//! Every random draw comes from a ChaCha8 stream keyed by `(seed, tag)` and
//! positioned by entity index, so output does not depend on iteration order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{DirectedWeightedGraph, GraphBuilder};
use crate::ingest::{TweetRecord, UserProfileRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic parameter: {0}")]
    Invalid(String),
    #[error("cannot parse synth spec: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Independent random stream for entity `index` under `tag`.
pub fn entity_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub topology: Topology,
    #[serde(default)]
    pub opinions: OpinionParams,
    #[serde(default)]
    pub rates: RateParams,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    TwoBlockPolarized(TwoBlockParams),
    CorePeripheryQanon(CorePeripheryParams),
    PlantedBotRetweet(PlantedParams),
    /// Complete multi-day corpus: follower lists, tweets, ratings.
    Corpus(CorpusParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpinionParams {
    pub anti_mean: f64,
    pub pro_mean: f64,
    /// Beta concentration `α + β`; larger means tighter around the mean.
    pub concentration: f64,
    /// Mean opinion of a converted (echo-chamber) audience.
    pub extreme_mean: f64,
}

impl Default for OpinionParams {
    fn default() -> Self {
        Self {
            anti_mean: 0.1,
            pro_mean: 0.9,
            concentration: 20.0,
            extreme_mean: 0.97,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateParams {
    /// Mean tweets per day.
    pub human_daily: f64,
    pub bot_daily: f64,
}

impl Default for RateParams {
    fn default() -> Self {
        Self {
            human_daily: 1.0,
            bot_daily: 10.0,
        }
    }
}

fn beta_around(rng: &mut ChaCha8Rng, mean: f64, concentration: f64) -> f64 {
    let m = mean.clamp(1e-3, 1.0 - 1e-3);
    Beta::new(m * concentration, (1.0 - m) * concentration)
        .expect("positive beta parameters")
        .sample(rng)
}

/// Gamma-distributed rate with the given mean and shape 2.
fn rate_around(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    Gamma::new(2.0, mean / 2.0).expect("positive gamma parameters").sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAccount {
    pub account_id: String,
    pub is_bot: bool,
    pub block: String,
    pub opinion: f64,
    /// Tweets per day.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthNetwork {
    /// Information-flow follower graph: edge (j, i) when i follows j.
    pub followers: DirectedWeightedGraph,
    pub accounts: Vec<SynthAccount>,
}

impl SynthNetwork {
    pub fn account(&self, id: &str) -> Option<&SynthAccount> {
        self.accounts
            .binary_search_by(|a| a.account_id.as_str().cmp(id))
            .ok()
            .map(|k| &self.accounts[k])
    }

    pub fn bots(&self) -> BTreeSet<String> {
        self.accounts.iter().filter(|a| a.is_bot).map(|a| a.account_id.clone()).collect()
    }
}

fn finish(builder: GraphBuilder, mut accounts: Vec<SynthAccount>) -> SynthNetwork {
    accounts.sort_by(|a, b| a.account_id.cmp(&b.account_id));
    SynthNetwork {
        followers: builder.build(),
        accounts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoBlockParams {
    pub anti_size: usize,
    pub pro_size: usize,
    pub bots_per_block: usize,
    pub followings_per_account: usize,
    /// Probability that a following is drawn from the whole population
    /// instead of the account's own block.
    pub epsilon: f64,
}

impl Default for TwoBlockParams {
    fn default() -> Self {
        Self {
            anti_size: 100,
            pro_size: 100,
            bots_per_block: 5,
            followings_per_account: 10,
            epsilon: 0.05,
        }
    }
}

/// Two partisan communities, dense inside and sparse across.
pub fn gen_two_block(seed: u64, p: &TwoBlockParams, op: &OpinionParams, rates: &RateParams) -> Result<SynthNetwork, SynthError> {
    if p.anti_size + p.pro_size == 0 {
        return Err(SynthError::Invalid("two-block network needs at least one account".into()));
    }
    if !(0.0..=1.0).contains(&p.epsilon) {
        return Err(SynthError::Invalid(format!("epsilon {} outside [0,1]", p.epsilon)));
    }
    let n = p.anti_size + p.pro_size;
    let id = |k: usize| format!("tb{k:05}");
    let block_of = |k: usize| if k < p.anti_size { 0 } else { 1 };
    let mut builder = GraphBuilder::new();
    let mut accounts = Vec::with_capacity(n);
    for k in 0..n {
        builder.add_node(&id(k));
        let b = block_of(k);
        let (start, size) = if b == 0 { (0, p.anti_size) } else { (p.anti_size, p.pro_size) };
        let is_bot = k - start < p.bots_per_block;
        let mut rng = entity_rng(seed, "two_block/account", k as u64);
        let mean = if b == 0 { op.anti_mean } else { op.pro_mean };
        accounts.push(SynthAccount {
            account_id: id(k),
            is_bot,
            block: if b == 0 { "anti" } else { "pro" }.into(),
            opinion: beta_around(&mut rng, mean, op.concentration),
            rate: rate_around(&mut rng, if is_bot { rates.bot_daily } else { rates.human_daily }),
        });
        let mut follow = BTreeSet::new();
        for _ in 0..p.followings_per_account {
            let target = if rng.random::<f64>() < p.epsilon {
                rng.random_range(0..n)
            } else {
                start + rng.random_range(0..size)
            };
            if target != k {
                follow.insert(target);
            }
        }
        for j in follow {
            builder.add_interaction(&id(j), &id(k), 1.0).expect("distinct endpoints");
        }
    }
    Ok(finish(builder, accounts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorePeripheryParams {
    pub core_bots: usize,
    pub periphery: usize,
    /// Core bots each periphery human follows.
    pub bot_followings: usize,
    /// Extra human accounts that give the audience outside influence in the
    /// echo-chamber comparison.
    pub anchors: usize,
    pub anchor_followings: usize,
    /// Unrelated moderate humans that keep the non-stubborn set nonempty.
    pub background: usize,
    pub background_followings: usize,
}

impl Default for CorePeripheryParams {
    fn default() -> Self {
        Self {
            core_bots: 10,
            periphery: 100,
            bot_followings: 3,
            anchors: 20,
            anchor_followings: 2,
            background: 100,
            background_followings: 5,
        }
    }
}

fn core_id(k: usize) -> String {
    format!("core{k:04}")
}

fn periphery_id(k: usize) -> String {
    format!("peri{k:05}")
}

/// Bots following each other in a dense core, and a periphery of humans that
/// follow only core bots. Every member holds a high pro opinion.
pub fn gen_core_periphery(seed: u64, p: &CorePeripheryParams, op: &OpinionParams, rates: &RateParams) -> Result<SynthNetwork, SynthError> {
    let (builder, accounts) = core_periphery_parts(seed, p, op, rates, op.extreme_mean)?;
    Ok(finish(builder, accounts))
}

fn core_periphery_parts(
    seed: u64,
    p: &CorePeripheryParams,
    op: &OpinionParams,
    rates: &RateParams,
    periphery_mean: f64,
) -> Result<(GraphBuilder, Vec<SynthAccount>), SynthError> {
    if p.core_bots == 0 || p.periphery == 0 {
        return Err(SynthError::Invalid("core and periphery must both be nonempty".into()));
    }
    if p.bot_followings == 0 || p.bot_followings > p.core_bots {
        return Err(SynthError::Invalid(format!(
            "bot_followings must lie in 1..={}, got {}",
            p.core_bots, p.bot_followings
        )));
    }
    let mut builder = GraphBuilder::new();
    let mut accounts = Vec::new();
    for k in 0..p.core_bots {
        builder.add_node(&core_id(k));
        let mut rng = entity_rng(seed, "core/bot", k as u64);
        accounts.push(SynthAccount {
            account_id: core_id(k),
            is_bot: true,
            block: "core".into(),
            opinion: beta_around(&mut rng, op.pro_mean, op.concentration),
            rate: rate_around(&mut rng, rates.bot_daily),
        });
        for j in 0..p.core_bots {
            if j != k {
                builder.add_interaction(&core_id(j), &core_id(k), 1.0).expect("distinct");
            }
        }
    }
    for k in 0..p.periphery {
        builder.add_node(&periphery_id(k));
        let mut rng = entity_rng(seed, "core/periphery", k as u64);
        accounts.push(SynthAccount {
            account_id: periphery_id(k),
            is_bot: false,
            block: "periphery".into(),
            opinion: beta_around(&mut rng, periphery_mean, op.concentration),
            rate: rate_around(&mut rng, rates.human_daily),
        });
        // Structure has its own stream so it does not depend on opinion draws.
        let mut follow_rng = entity_rng(seed, "core/periphery_follow", k as u64);
        for j in rand::seq::index::sample(&mut follow_rng, p.core_bots, p.bot_followings) {
            builder.add_interaction(&core_id(j), &periphery_id(k), 1.0).expect("distinct");
        }
    }
    Ok((builder, accounts))
}

/// The same core bots and follow structure shown to a converted audience and
/// to a mixed one.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoChamberPair {
    /// Periphery and anchors hold extreme pro opinions.
    pub echo: SynthNetwork,
    /// Periphery holds moderate opinions; anchors are split between sides.
    pub mixed: SynthNetwork,
    pub bots: BTreeSet<String>,
}

pub fn gen_echo_chamber_pair(seed: u64, p: &CorePeripheryParams, op: &OpinionParams, rates: &RateParams) -> Result<EchoChamberPair, SynthError> {
    if p.anchors == 0 || p.anchor_followings == 0 || p.anchor_followings > p.anchors {
        return Err(SynthError::Invalid("echo-chamber pair needs anchors and 1..=anchors anchor followings".into()));
    }
    let build = |echo: bool| -> Result<SynthNetwork, SynthError> {
        let periphery_mean = if echo { op.extreme_mean } else { 0.5 };
        let (mut builder, mut accounts) = core_periphery_parts(seed, p, op, rates, periphery_mean)?;
        let anchor_id = |k: usize| format!("anch{k:04}");
        let bg_id = |k: usize| format!("bgnd{k:05}");
        for k in 0..p.anchors {
            builder.add_node(&anchor_id(k));
            let mut rng = entity_rng(seed, "echo/anchor", k as u64);
            let mean = match (echo, k % 2) {
                (true, _) => op.extreme_mean,
                (false, 0) => 1.0 - op.extreme_mean,
                (false, _) => op.extreme_mean,
            };
            accounts.push(SynthAccount {
                account_id: anchor_id(k),
                is_bot: false,
                block: "anchor".into(),
                opinion: beta_around(&mut rng, mean, op.concentration),
                rate: rate_around(&mut rng, rates.human_daily),
            });
        }
        for k in 0..p.periphery {
            let mut rng = entity_rng(seed, "echo/periphery_anchor", k as u64);
            for j in rand::seq::index::sample(&mut rng, p.anchors, p.anchor_followings) {
                builder.add_interaction(&anchor_id(j), &periphery_id(k), 1.0).expect("distinct");
            }
        }
        for k in 0..p.background {
            builder.add_node(&bg_id(k));
            let mut rng = entity_rng(seed, "echo/background", k as u64);
            accounts.push(SynthAccount {
                account_id: bg_id(k),
                is_bot: false,
                block: "background".into(),
                opinion: beta_around(&mut rng, 0.5, 4.0),
                rate: rate_around(&mut rng, rates.human_daily),
            });
            for _ in 0..p.background_followings {
                let j = rng.random_range(0..p.background);
                if j != k {
                    builder.add_interaction(&bg_id(j), &bg_id(k), 1.0).expect("distinct");
                }
            }
        }
        Ok(finish(builder, accounts))
    };
    let echo = build(true)?;
    let mixed = build(false)?;
    let bots = echo.bots();
    Ok(EchoChamberPair { echo, mixed, bots })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedParams {
    pub bots: usize,
    pub humans: usize,
    /// Mean retweets per bot per day.
    pub bot_retweets: f64,
    pub human_retweets: f64,
    /// Probability a retweet by a bot targets a bot.
    pub bot_to_bot: f64,
    /// Probability a retweet by a human targets a bot.
    pub human_to_bot: f64,
    pub day: NaiveDate,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            bots: 30,
            humans: 300,
            bot_retweets: 30.0,
            human_retweets: 3.0,
            bot_to_bot: 0.02,
            human_to_bot: 0.05,
            day: NaiveDate::from_ymd_opt(2020, 1, 15).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRetweets {
    pub tweets: Vec<TweetRecord>,
    /// `(account_id, is_bot)` sorted by account id.
    pub labels: Vec<(String, bool)>,
}

fn timestamp(day: NaiveDate, rng: &mut ChaCha8Rng) -> chrono::DateTime<Utc> {
    let start = Utc.from_utc_datetime(&day.and_hms_opt(0, 0, 0).expect("midnight"));
    start + Duration::seconds(rng.random_range(0..86_400))
}

fn sort_tweets(tweets: &mut [TweetRecord]) {
    tweets.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.tweet_id.cmp(&b.tweet_id)));
}

/// One day of retweets in which bots retweet humans heavily, humans retweet
/// humans moderately, and anyone retweeting a bot is rare.
pub fn gen_planted_bot_retweets(seed: u64, p: &PlantedParams) -> Result<PlantedRetweets, SynthError> {
    if p.humans == 0 {
        return Err(SynthError::Invalid("planted model needs at least one human".into()));
    }
    for (name, v) in [("bot_to_bot", p.bot_to_bot), ("human_to_bot", p.human_to_bot)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SynthError::Invalid(format!("{name} {v} outside [0,1]")));
        }
    }
    let n = p.bots + p.humans;
    // Labels are assigned to shuffled-looking ids so position carries no signal.
    let order = {
        let mut rng = entity_rng(seed, "planted/order", 0);
        rand::seq::index::sample(&mut rng, n, n).into_vec()
    };
    let id = |k: usize| format!("pl{:05}", order[k]);
    let is_bot = |k: usize| k < p.bots;
    let mut tweets = Vec::new();
    for k in 0..n {
        let mut rng = entity_rng(seed, "planted/account", k as u64);
        let mean = if is_bot(k) { p.bot_retweets } else { p.human_retweets };
        let count = if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
        } else {
            0
        };
        let to_bot = if is_bot(k) { p.bot_to_bot } else { p.human_to_bot };
        // Every account also posts one original so it appears in the corpus.
        tweets.push(TweetRecord {
            tweet_id: format!("{}-o", id(k)),
            author_id: id(k),
            timestamp: timestamp(p.day, &mut rng),
            text: String::new(),
            retweeted_author_id: None,
            urls: vec![],
            opinion: None,
            toxicity: None,
        });
        for r in 0..count {
            let target = if p.bots > 0 && rng.random::<f64>() < to_bot {
                rng.random_range(0..p.bots)
            } else {
                p.bots + rng.random_range(0..p.humans)
            };
            if target == k {
                continue;
            }
            tweets.push(TweetRecord {
                tweet_id: format!("{}-r{r:04}", id(k)),
                author_id: id(k),
                timestamp: timestamp(p.day, &mut rng),
                text: String::new(),
                retweeted_author_id: Some(id(target)),
                urls: vec![],
                opinion: None,
                toxicity: None,
            });
        }
    }
    sort_tweets(&mut tweets);
    let mut labels: Vec<(String, bool)> = (0..n).map(|k| (id(k), is_bot(k))).collect();
    labels.sort();
    Ok(PlantedRetweets { tweets, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub accounts: usize,
    pub bot_fraction: f64,
    pub days: u32,
    pub start_date: NaiveDate,
    /// Fraction of pro accounts whose profile carries a Qanon phrase.
    pub qanon_fraction: f64,
    pub followings_per_account: usize,
    pub epsilon: f64,
    pub bot_retweet_probability: f64,
    pub human_retweet_probability: f64,
    pub human_to_bot: f64,
    pub url_probability: f64,
    pub unscored_fraction: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            accounts: 1000,
            bot_fraction: 0.05,
            days: 30,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            qanon_fraction: 0.15,
            followings_per_account: 20,
            epsilon: 0.05,
            bot_retweet_probability: 0.8,
            human_retweet_probability: 0.3,
            human_to_bot: 0.05,
            url_probability: 0.3,
            unscored_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub account_id: String,
    pub is_bot: bool,
    pub block: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub tweets: Vec<TweetRecord>,
    pub profiles: Vec<UserProfileRecord>,
    pub ratings: Vec<(String, f64)>,
    pub truth: Vec<TruthRow>,
}

/// Domain, rating; the last domain is left unrated.
const DOMAINS: [(&str, f64); 7] = [
    ("wirestandard.com", 5.0),
    ("dailyledger.org", 4.5),
    ("metroherald.net", 4.0),
    ("civicpost.com", 3.0),
    ("truthbeacon.net", 2.0),
    ("patriotflash.com", 1.0),
    ("randomblog.io", 0.0),
];

pub fn gen_corpus(seed: u64, p: &CorpusParams, op: &OpinionParams, rates: &RateParams) -> Result<SynthCorpus, SynthError> {
    if p.accounts < 2 {
        return Err(SynthError::Invalid("corpus needs at least two accounts".into()));
    }
    for (name, v) in [
        ("bot_fraction", p.bot_fraction),
        ("qanon_fraction", p.qanon_fraction),
        ("epsilon", p.epsilon),
        ("bot_retweet_probability", p.bot_retweet_probability),
        ("human_retweet_probability", p.human_retweet_probability),
        ("human_to_bot", p.human_to_bot),
        ("url_probability", p.url_probability),
        ("unscored_fraction", p.unscored_fraction),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SynthError::Invalid(format!("{name} {v} outside [0,1]")));
        }
    }
    if p.days == 0 {
        return Err(SynthError::Invalid("corpus needs at least one day".into()));
    }
    let n = p.accounts;
    let id = |k: usize| format!("u{k:06}");

    struct Acct {
        pro: bool,
        bot: bool,
        qanon: bool,
        opinion: f64,
        rate: f64,
    }
    let accts: Vec<Acct> = (0..n)
        .map(|k| {
            let mut rng = entity_rng(seed, "corpus/account", k as u64);
            let pro = rng.random::<f64>() < 0.5;
            let bot = rng.random::<f64>() < p.bot_fraction;
            let qanon = pro && rng.random::<f64>() < p.qanon_fraction;
            let opinion = beta_around(&mut rng, if pro { op.pro_mean } else { op.anti_mean }, op.concentration);
            let rate = rate_around(&mut rng, if bot { rates.bot_daily } else { rates.human_daily });
            Acct { pro, bot, qanon, opinion, rate }
        })
        .collect();
    let same_side: [Vec<usize>; 2] = [
        (0..n).filter(|&k| !accts[k].pro).collect(),
        (0..n).filter(|&k| accts[k].pro).collect(),
    ];
    let humans: [Vec<usize>; 2] = [0, 1].map(|s| same_side[s].iter().copied().filter(|&k| !accts[k].bot).collect());
    let bots: Vec<usize> = (0..n).filter(|&k| accts[k].bot).collect();

    let profiles: Vec<UserProfileRecord> = (0..n)
        .map(|k| {
            let mut rng = entity_rng(seed, "corpus/profile", k as u64);
            let side = &same_side[accts[k].pro as usize];
            let mut follow = BTreeSet::new();
            for _ in 0..p.followings_per_account {
                let j = if rng.random::<f64>() < p.epsilon || side.len() < 2 {
                    rng.random_range(0..n)
                } else {
                    side[rng.random_range(0..side.len())]
                };
                if j != k {
                    follow.insert(j);
                }
            }
            let description = match (accts[k].pro, accts[k].qanon) {
                (true, true) => "Patriot. Trust the plan. #WWG1WGA",
                (true, false) => "Proud American. #MAGA",
                (false, _) => "Democracy matters. #Resist",
            };
            UserProfileRecord {
                account_id: id(k),
                description: description.into(),
                following_ids: follow.into_iter().map(id).collect(),
            }
        })
        .collect();

    let mut tweets = Vec::new();
    for day_idx in 0..p.days {
        let day = p.start_date + Duration::days(day_idx as i64);
        for (k, a) in accts.iter().enumerate() {
            let mut rng = entity_rng(seed, "corpus/day", (k as u64) << 20 | day_idx as u64);
            let count = if a.rate > 0.0 {
                Poisson::new(a.rate).expect("positive rate").sample(&mut rng) as usize
            } else {
                0
            };
            let noise = Normal::new(0.0, 0.05).expect("valid normal");
            for t in 0..count {
                let rt_prob = if a.bot { p.bot_retweet_probability } else { p.human_retweet_probability };
                let retweeted = if rng.random::<f64>() < rt_prob {
                    let pool: &[usize] = if !a.bot && !bots.is_empty() && rng.random::<f64>() < p.human_to_bot {
                        &bots
                    } else {
                        &humans[a.pro as usize]
                    };
                    (!pool.is_empty())
                        .then(|| pool[rng.random_range(0..pool.len())])
                        .filter(|&j| j != k)
                        .map(id)
                } else {
                    None
                };
                let urls = if rng.random::<f64>() < p.url_probability {
                    // Anti accounts lean toward the top of the list, pro toward the bottom.
                    let x: f64 = rng.random::<f64>().powf(2.0);
                    let pos = if a.pro { 1.0 - x } else { x };
                    let d = ((pos * DOMAINS.len() as f64) as usize).min(DOMAINS.len() - 1);
                    vec![format!("https://www.{}/story/{}", DOMAINS[d].0, rng.random_range(0..100_000))]
                } else {
                    vec![]
                };
                let opinion = (rng.random::<f64>() >= p.unscored_fraction)
                    .then(|| (a.opinion + noise.sample(&mut rng)).clamp(0.0, 1.0));
                let toxicity = Some(beta_around(&mut rng, if a.bot { 0.3 } else { 0.2 }, 10.0));
                let text = if a.qanon { "WWG1WGA the storm is coming" } else { "impeachment news" };
                tweets.push(TweetRecord {
                    tweet_id: format!("{day_idx:03}{k:06}{t:04}"),
                    author_id: id(k),
                    timestamp: timestamp(day, &mut rng),
                    text: text.into(),
                    retweeted_author_id: retweeted,
                    urls,
                    opinion,
                    toxicity,
                });
            }
        }
    }
    sort_tweets(&mut tweets);
    let ratings = DOMAINS
        .iter()
        .filter(|(_, r)| *r > 0.0)
        .map(|(d, r)| (d.to_string(), *r))
        .collect();
    let truth = (0..n)
        .map(|k| TruthRow {
            account_id: id(k),
            is_bot: accts[k].bot,
            block: match (accts[k].pro, accts[k].qanon) {
                (true, true) => "qanon",
                (true, false) => "pro",
                _ => "anti",
            }
            .into(),
        })
        .collect();
    Ok(SynthCorpus {
        tweets,
        profiles,
        ratings,
        truth,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    let io_err = |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

fn jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_truth_csv<W: Write>(rows: &[TruthRow], mut out: W) -> io::Result<()> {
    writeln!(out, "account_id,is_bot,block")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.account_id, r.is_bot, r.block)?;
    }
    Ok(())
}

/// Writes `tweets.jsonl`, `profiles.jsonl`, `ratings.csv` and the
/// `labels_truth.csv` sidecar into `dir`, returning the paths written.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut ratings = String::from("domain,rating\n");
    for (d, r) in &corpus.ratings {
        ratings.push_str(&format!("{d},{r}\n"));
    }
    let mut truth = Vec::new();
    write_truth_csv(&corpus.truth, &mut truth).expect("in-memory write");
    let files = [
        ("tweets.jsonl", jsonl(&corpus.tweets)),
        ("profiles.jsonl", jsonl(&corpus.profiles)),
        ("ratings.csv", ratings.into_bytes()),
        ("labels_truth.csv", truth),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Network generators as a corpus: follower lists from the network and a
/// single day with one original tweet per account.
fn network_corpus(net: &SynthNetwork, seed: u64) -> SynthCorpus {
    let day = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let g = &net.followers;
    let profiles = net
        .accounts
        .iter()
        .map(|a| {
            let id = g.node(&a.account_id).expect("account is a node");
            let mut following: Vec<String> = g.in_neighbors(id).ids().map(|j| g.label(j).to_owned()).collect();
            following.sort();
            UserProfileRecord {
                account_id: a.account_id.clone(),
                description: String::new(),
                following_ids: following,
            }
        })
        .collect();
    let mut tweets: Vec<TweetRecord> = net
        .accounts
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let mut rng = entity_rng(seed, "network_corpus/tweet", k as u64);
            TweetRecord {
                tweet_id: format!("{}-0", a.account_id),
                author_id: a.account_id.clone(),
                timestamp: timestamp(day, &mut rng),
                text: String::new(),
                retweeted_author_id: None,
                urls: vec![],
                opinion: Some(a.opinion),
                toxicity: None,
            }
        })
        .collect();
    sort_tweets(&mut tweets);
    let truth = net
        .accounts
        .iter()
        .map(|a| TruthRow {
            account_id: a.account_id.clone(),
            is_bot: a.is_bot,
            block: a.block.clone(),
        })
        .collect();
    SynthCorpus {
        tweets,
        profiles,
        ratings: vec![],
        truth,
    }
}

/// Generates whatever the spec's topology describes, as ingestible files.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    match &spec.topology {
        Topology::TwoBlockPolarized(p) => Ok(network_corpus(&gen_two_block(spec.seed, p, &spec.opinions, &spec.rates)?, spec.seed)),
        Topology::CorePeripheryQanon(p) => Ok(network_corpus(
            &gen_core_periphery(spec.seed, p, &spec.opinions, &spec.rates)?,
            spec.seed,
        )),
        Topology::PlantedBotRetweet(p) => {
            let planted = gen_planted_bot_retweets(spec.seed, p)?;
            let truth = planted
                .labels
                .iter()
                .map(|(a, b)| TruthRow {
                    account_id: a.clone(),
                    is_bot: *b,
                    block: if *b { "bot" } else { "human" }.into(),
                })
                .collect();
            let profiles = planted
                .labels
                .iter()
                .map(|(a, _)| UserProfileRecord {
                    account_id: a.clone(),
                    description: String::new(),
                    following_ids: vec![],
                })
                .collect();
            Ok(SynthCorpus {
                tweets: planted.tweets,
                profiles,
                ratings: vec![],
                truth,
            })
        }
        Topology::Corpus(p) => gen_corpus(spec.seed, p, &spec.opinions, &spec.rates),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{co_partisan_fraction, Partisanship};
    use crate::ingest::{load_profiles, load_tweets};

    fn block_label(net: &SynthNetwork) -> impl Fn(&str) -> Option<Partisanship> + '_ {
        move |id| {
            net.account(id).map(|a| if a.block == "pro" { Partisanship::Pro } else { Partisanship::Anti })
        }
    }

    #[test]
    fn streams_are_independent_of_order() {
        let a: u64 = entity_rng(1, "x", 5).random();
        let _: u64 = entity_rng(1, "x", 4).random();
        let b: u64 = entity_rng(1, "x", 5).random();
        assert_eq!(a, b);
        let c: u64 = entity_rng(1, "y", 5).random();
        assert_ne!(a, c);
    }

    #[test]
    fn two_block_without_mixing_is_fully_co_partisan() {
        let p = TwoBlockParams { epsilon: 0.0, ..Default::default() };
        let net = gen_two_block(3, &p, &OpinionParams::default(), &RateParams::default()).unwrap();
        let g = &net.followers;
        for (u, v, _) in g.edges() {
            assert_eq!(net.account(g.label(u)).unwrap().block, net.account(g.label(v)).unwrap().block);
        }
        for bot in net.bots() {
            if let Some(f) = co_partisan_fraction(g, g.node(&bot).unwrap(), block_label(&net)) {
                assert_eq!(f, 1.0);
            }
        }
    }

    #[test]
    fn full_mixing_gives_half_co_partisan() {
        // Monte Carlo over 100 seeds: followers of a bot are drawn uniformly.
        let p = TwoBlockParams { epsilon: 1.0, ..Default::default() };
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..100 {
            let net = gen_two_block(seed, &p, &OpinionParams::default(), &RateParams::default()).unwrap();
            let g = &net.followers;
            for bot in net.bots() {
                if let Some(f) = co_partisan_fraction(g, g.node(&bot).unwrap(), block_label(&net)) {
                    total += f;
                    count += 1.0;
                }
            }
        }
        let mean = total / count;
        assert!((mean - 0.5).abs() < 0.05, "mean co-partisan fraction {mean}");
    }

    #[test]
    fn single_block_degenerate() {
        let p = TwoBlockParams { anti_size: 10, pro_size: 0, bots_per_block: 2, ..Default::default() };
        let net = gen_two_block(1, &p, &OpinionParams::default(), &RateParams::default()).unwrap();
        assert_eq!(net.accounts.len(), 10);
        assert!(net.accounts.iter().all(|a| a.block == "anti"));
    }

    #[test]
    fn core_periphery_structure() {
        let p = CorePeripheryParams::default();
        let net = gen_core_periphery(9, &p, &OpinionParams::default(), &RateParams::default()).unwrap();
        let g = &net.followers;
        let core: BTreeSet<String> = net.bots();
        assert_eq!(core.len(), p.core_bots);
        let mut human_edges = 0;
        for a in net.accounts.iter().filter(|a| !a.is_bot) {
            let id = g.node(&a.account_id).unwrap();
            let following: Vec<&str> = g.in_neighbors(id).ids().map(|j| g.label(j)).collect();
            assert_eq!(following.len(), p.bot_followings);
            assert!(following.iter().all(|f| core.contains(*f)));
            human_edges += g.out_degree(id);
        }
        assert_eq!(human_edges, 0);
        assert!(net.accounts.iter().all(|a| a.opinion > 0.5));
        assert!(gen_core_periphery(1, &CorePeripheryParams { periphery: 0, ..p }, &OpinionParams::default(), &RateParams::default()).is_err());
    }

    #[test]
    fn echo_pair_shares_structure() {
        let pair = gen_echo_chamber_pair(2, &CorePeripheryParams::default(), &OpinionParams::default(), &RateParams::default()).unwrap();
        assert_eq!(pair.echo.followers.edges().collect::<Vec<_>>(), pair.mixed.followers.edges().collect::<Vec<_>>());
        let bots: Vec<_> = pair.echo.accounts.iter().filter(|a| a.is_bot).collect();
        let bots_mixed: Vec<_> = pair.mixed.accounts.iter().filter(|a| a.is_bot).collect();
        assert_eq!(bots, bots_mixed);
        let mean = |net: &SynthNetwork| {
            let xs: Vec<f64> = net.accounts.iter().filter(|a| a.block == "periphery").map(|a| a.opinion).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean(&pair.echo) > 0.9 && (mean(&pair.mixed) - 0.5).abs() < 0.1);
    }

    #[test]
    fn planted_without_bots_is_all_human() {
        let p = PlantedParams { bots: 0, humans: 50, ..Default::default() };
        let planted = gen_planted_bot_retweets(4, &p).unwrap();
        assert!(planted.labels.iter().all(|(_, b)| !b));
        assert!(planted.tweets.iter().all(|t| t.retweeted_author_id.as_deref() != Some(t.author_id.as_str())));
    }

    #[test]
    fn same_seed_same_output() {
        let p = PlantedParams::default();
        assert_eq!(gen_planted_bot_retweets(8, &p).unwrap(), gen_planted_bot_retweets(8, &p).unwrap());
        assert_ne!(gen_planted_bot_retweets(8, &p).unwrap(), gen_planted_bot_retweets(9, &p).unwrap());
    }

    #[test]
    fn spec_toml_roundtrip() {
        let spec = SynthSpec {
            seed: 5,
            topology: Topology::Corpus(CorpusParams { accounts: 40, days: 3, ..Default::default() }),
            opinions: OpinionParams::default(),
            rates: RateParams::default(),
        };
        let text = spec.to_toml();
        assert_eq!(SynthSpec::from_toml(&text).unwrap(), spec);
        let minimal = "seed = 1\n[topology]\nkind = \"planted_bot_retweet\"\nbots = 3\n";
        let parsed = SynthSpec::from_toml(minimal).unwrap();
        assert!(matches!(parsed.topology, Topology::PlantedBotRetweet(PlantedParams { bots: 3, humans: 300, .. })));
        assert!(SynthSpec::from_toml("seed = 1\n[topology]\nkind = \"nope\"\n").is_err());
    }

    #[test]
    fn corpus_files_roundtrip_and_are_deterministic() {
        let spec = SynthSpec {
            seed: 12,
            topology: Topology::Corpus(CorpusParams { accounts: 60, days: 4, ..Default::default() }),
            opinions: OpinionParams::default(),
            rates: RateParams::default(),
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let corpus = generate(&spec).unwrap();
        write_corpus(&corpus, dir_a.path()).unwrap();
        write_corpus(&generate(&spec).unwrap(), dir_b.path()).unwrap();
        for name in ["tweets.jsonl", "profiles.jsonl", "ratings.csv", "labels_truth.csv"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
        let (tweets, skipped) = load_tweets(&dir_a.path().join("tweets.jsonl")).unwrap().collect_all().unwrap();
        assert!(skipped.is_empty());
        assert_eq!(tweets, corpus.tweets);
        let (profiles, skipped) = load_profiles(&dir_a.path().join("profiles.jsonl")).unwrap().collect_all().unwrap();
        assert!(skipped.is_empty());
        assert_eq!(profiles.len(), 60);
        let truth = fs::read_to_string(dir_a.path().join("labels_truth.csv")).unwrap();
        assert!(truth.starts_with("account_id,is_bot,block\n"));
        let ratings = crate::analytics::MediaRatingsTable::load(&dir_a.path().join("ratings.csv")).unwrap();
        assert!(ratings.rating_for_domain("wirestandard.com").is_some());
    }

    #[test]
    fn network_topologies_roundtrip() {
        for topology in [
            Topology::TwoBlockPolarized(TwoBlockParams::default()),
            Topology::CorePeripheryQanon(CorePeripheryParams::default()),
            Topology::PlantedBotRetweet(PlantedParams::default()),
        ] {
            let spec = SynthSpec { seed: 1, topology, opinions: OpinionParams::default(), rates: RateParams::default() };
            let dir = tempfile::tempdir().unwrap();
            let corpus = generate(&spec).unwrap();
            write_corpus(&corpus, dir.path()).unwrap();
            let (tweets, skipped) = load_tweets(&dir.path().join("tweets.jsonl")).unwrap().collect_all().unwrap();
            assert!(skipped.is_empty());
            assert_eq!(tweets.len(), corpus.tweets.len());
        }
    }
}
