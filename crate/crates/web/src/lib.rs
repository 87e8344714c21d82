//! Browser bindings. Each export takes plain arguments or a JSON string and
//! returns JSON; errors come back as `{"error": "..."}`.

use std::collections::BTreeSet;

use botimpact::botdetect::{auc, infer_bot_probabilities, probability_histogram, FactorGraphParams};
use botimpact::ghic::{ghic, Engine};
use botimpact::graph::{GraphBuilder, NodeId};
use botimpact::ingest::build_daily_retweet_network;
use botimpact::opinion::{equilibrium, identify_stubborn, AccountOpinion, ActivityRates, NodeRoles, SolverSettings};
use botimpact::synth::{
    gen_echo_chamber_pair, gen_planted_bot_retweets, CorePeripheryParams, OpinionParams, PlantedParams, RateParams,
    SynthNetwork,
};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Debug, Deserialize)]
pub struct DemoNode {
    pub id: String,
    pub rate: f64,
    /// Fixed opinion for stubborn nodes.
    pub stubborn: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct DemoNetwork {
    pub nodes: Vec<DemoNode>,
    /// `[source, target]`: target follows source.
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct NodeOpinion {
    pub id: String,
    pub opinion: f64,
    pub stubborn: bool,
}

/// Equilibrium opinions of a small network drawn in the page.
pub fn solve_network(input: &str) -> Result<Vec<NodeOpinion>, String> {
    let net: DemoNetwork = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let mut b = GraphBuilder::new();
    for n in &net.nodes {
        b.add_node(&n.id);
    }
    for (s, t) in &net.edges {
        b.add_interaction(s, t, 1.0).map_err(|e| e.to_string())?;
    }
    let g = b.build();
    let by_id = |label: &str| net.nodes.iter().find(|n| n.id == label);
    let rates = ActivityRates::from_fn(&g, |l| by_id(l).map_or(1.0, |n| n.rate)).map_err(|e| e.to_string())?;
    let psi = g.node_ids().map(|id| by_id(g.label(id)).and_then(|n| n.stubborn)).collect();
    let roles = NodeRoles::from_psi(psi);
    let (sol, roles, _) = equilibrium(&g, &rates, &roles, &SolverSettings::default()).map_err(|e| e.to_string())?;
    Ok(g.node_ids()
        .map(|id| NodeOpinion {
            id: g.label(id).to_owned(),
            opinion: roles.psi(id).or_else(|| sol.get(id)).unwrap_or(f64::NAN),
            stubborn: roles.is_stubborn(id),
        })
        .collect())
}

#[wasm_bindgen]
pub fn equilibrium_json(input: &str) -> String {
    respond(solve_network(input))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct DetectionSummary {
    pub auc: f64,
    pub histogram: Vec<usize>,
    pub flagged: usize,
    pub flagged_bots: usize,
    pub bots: usize,
    pub humans: usize,
}

/// Planted retweet network scored with the given bot-to-human potential.
pub fn detect_planted(seed: u64, bots: usize, humans: usize, psi_hb: f64, threshold: f64) -> Result<DetectionSummary, String> {
    let p = PlantedParams { bots, humans, ..PlantedParams::default() };
    let planted = gen_planted_bot_retweets(seed, &p).map_err(|e| e.to_string())?;
    let params = FactorGraphParams { psi_hb, ..FactorGraphParams::default() };
    let g = build_daily_retweet_network(&planted.tweets, p.day);
    let post = infer_bot_probabilities(&g, &params).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = planted
        .labels
        .iter()
        .map(|(a, _)| g.node(a).map_or(params.prior_bot, |id| post.get(id)))
        .collect();
    let labels: Vec<bool> = planted.labels.iter().map(|(_, b)| *b).collect();
    let flagged = scores.iter().filter(|&&s| s > threshold).count();
    let flagged_bots = scores.iter().zip(&labels).filter(|(&s, &b)| b && s > threshold).count();
    Ok(DetectionSummary {
        auc: auc(&scores, &labels).map_err(|e| e.to_string())?,
        histogram: probability_histogram(&scores, 20).map_err(|e| e.to_string())?.counts,
        flagged,
        flagged_bots,
        bots,
        humans,
    })
}

#[wasm_bindgen]
pub fn bot_detection_json(seed: u32, bots: u32, humans: u32, psi_hb: f64, threshold: f64) -> String {
    respond(detect_planted(seed as u64, bots as usize, humans as usize, psi_hb, threshold))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct EchoComparison {
    pub echo_per_bot: f64,
    pub mixed_per_bot: f64,
    pub bots: usize,
}

fn per_bot(net: &SynthNetwork, bots: &BTreeSet<String>) -> Result<f64, String> {
    let opinions: Vec<AccountOpinion> = net
        .accounts
        .iter()
        .map(|a| AccountOpinion { account: a.account_id.clone(), opinion: a.opinion, bot: a.is_bot })
        .collect();
    let assignment = identify_stubborn(&opinions, 0.10, 0.90).map_err(|e| e.to_string())?;
    let g = &net.followers;
    let roles = assignment.roles_for(g).map_err(|e| e.to_string())?;
    let rates = ActivityRates::from_fn(g, |l| net.account(l).map_or(1.0, |a| a.rate)).map_err(|e| e.to_string())?;
    let s: BTreeSet<NodeId> = bots.iter().filter_map(|b| g.node(b)).collect();
    let res = ghic(g, &rates, &roles, &s, Engine::default()).map_err(|e| e.to_string())?;
    Ok(res.value / s.len() as f64)
}

/// Same bots and follow structure, converted versus mixed audience.
pub fn compare_echo(seed: u64, core_bots: usize, periphery: usize) -> Result<EchoComparison, String> {
    let p = CorePeripheryParams { core_bots, periphery, ..CorePeripheryParams::default() };
    let pair = gen_echo_chamber_pair(seed, &p, &OpinionParams::default(), &RateParams::default()).map_err(|e| e.to_string())?;
    Ok(EchoComparison {
        echo_per_bot: per_bot(&pair.echo, &pair.bots)?,
        mixed_per_bot: per_bot(&pair.mixed, &pair.bots)?,
        bots: pair.bots.len(),
    })
}

#[wasm_bindgen]
pub fn echo_chamber_json(seed: u32, core_bots: u32, periphery: u32) -> String {
    respond(compare_echo(seed as u64, core_bots as usize, periphery as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_solves_to_averages() {
        let input = r#"{
            "nodes": [
                {"id": "s", "rate": 1, "stubborn": 1.0},
                {"id": "a", "rate": 1, "stubborn": 0.0},
                {"id": "h", "rate": 1, "stubborn": null}
            ],
            "edges": [["s", "h"], ["a", "h"]]
        }"#;
        let out = solve_network(input).unwrap();
        let h = out.iter().find(|n| n.id == "h").unwrap();
        assert!((h.opinion - 0.5).abs() < 1e-12);
        assert!(!h.stubborn);
    }

    #[test]
    fn bad_input_reported_as_json_error() {
        let out = equilibrium_json("{");
        assert!(out.starts_with("{\"error\""));
        let out = equilibrium_json(r#"{"nodes": [{"id": "x", "rate": 1, "stubborn": null}], "edges": [["x", "x"]]}"#);
        assert!(out.contains("error"));
    }

    #[test]
    fn planted_bots_ranked_first() {
        let d = detect_planted(1, 20, 200, 1.5, 0.8).unwrap();
        assert!(d.auc > 0.9);
        assert_eq!(d.histogram.iter().sum::<usize>(), 220);
        assert!(d.flagged_bots <= d.flagged);
    }

    #[test]
    fn echo_audience_moves_less() {
        let c = compare_echo(3, 10, 100).unwrap();
        assert!(c.echo_per_bot < c.mixed_per_bot);
        assert_eq!(c.bots, 10);
    }
}
