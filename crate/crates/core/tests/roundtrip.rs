use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;

use botimpact::ghic::{daily_ghic_series, Engine, GhicGroup};
use botimpact::ingest::{build_follower_network, load_profiles, load_tweets, tweet_rates, CollectionWindow};
use botimpact::opinion::{identify_stubborn, AccountOpinion};
use botimpact::synth::{gen_corpus, write_corpus, CorpusParams, OpinionParams, RateParams, SynthCorpus};
use flate2::write::GzEncoder;
use flate2::Compression;

fn corpus() -> SynthCorpus {
    let p = CorpusParams { accounts: 150, days: 3, ..Default::default() };
    gen_corpus(9, &p, &OpinionParams::default(), &RateParams::default()).unwrap()
}

#[test]
fn written_corpus_reads_back_plain_and_gzip() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&c, dir.path()).unwrap();

    let (tweets, skipped) = load_tweets(&dir.path().join("tweets.jsonl")).unwrap().collect_all().unwrap();
    assert!(skipped.is_empty());
    assert_eq!(tweets, c.tweets);

    let raw = std::fs::read(dir.path().join("profiles.jsonl")).unwrap();
    let gz = dir.path().join("profiles.jsonl.gz");
    let mut enc = GzEncoder::new(File::create(&gz).unwrap(), Compression::default());
    enc.write_all(&raw).unwrap();
    enc.finish().unwrap();
    let (profiles, skipped) = load_profiles(&gz).unwrap().collect_all().unwrap();
    assert!(skipped.is_empty());
    assert_eq!(profiles, c.profiles);
}

#[test]
fn bad_lines_are_skipped_with_numbers() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&c, dir.path()).unwrap();
    let path = dir.path().join("tweets.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&path, text).unwrap();
    let (tweets, skipped) = load_tweets(&path).unwrap().collect_all().unwrap();
    assert_eq!(tweets.len(), c.tweets.len());
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].line, c.tweets.len() + 1);
}

#[test]
fn ghic_series_ignores_tweet_order() {
    let c = corpus();
    let window = CollectionWindow::covering(&c.tweets).unwrap();
    let rates = tweet_rates(&c.tweets, window).unwrap();
    let authors = c.tweets.iter().map(|t| t.author_id.clone()).collect();
    let follower = build_follower_network(c.profiles.clone(), &authors, 2000);
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for t in &c.tweets {
        let e = sums.entry(&t.author_id).or_default();
        if let Some(o) = t.opinion {
            *e = (e.0 + o, e.1 + 1.0);
        }
    }
    let bots: BTreeSet<&str> = c.truth.iter().filter(|t| t.is_bot).map(|t| t.account_id.as_str()).collect();
    let opinions: Vec<AccountOpinion> = sums
        .iter()
        .map(|(a, (s, n))| AccountOpinion {
            account: a.to_string(),
            opinion: if *n > 0.0 { s / n } else { 0.5 },
            bot: bots.contains(a),
        })
        .collect();
    let assignment = identify_stubborn(&opinions, 0.10, 0.90).unwrap();
    let groups = vec![GhicGroup {
        name: "bots".into(),
        members: c.truth.iter().filter(|t| t.is_bot).map(|t| t.account_id.clone()).collect(),
    }];
    let a = daily_ghic_series(&c.tweets, &follower.graph, &rates, &assignment, &groups, Engine::default()).unwrap();
    let mut reversed = c.tweets.clone();
    reversed.reverse();
    let b = daily_ghic_series(&reversed, &follower.graph, &rates, &assignment, &groups, Engine::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.days.len(), 3);
}
