//! Deterministic synthetic corpora for demos, tests and benchmarks.
//!
//! Captions and statements are drawn from shared phrase pools so that caption
//! querying finds related captions, and a share of captions joins an action
//! and a precondition with a conjunction the bundled labeling functions know.

use crate::image_query::{build_query, FixtureRecord};
use crate::normalize::{
    normalize_pair, DetectorChain, FixedIdentifiers, Gazetteer, PnliPair, RawCaption, SourceRegistry,
};
use crate::Label;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ACTIONS: &[&str] = &[
    "a man is riding a bike down the street",
    "the kids are swimming in the pool",
    "a woman is holding an umbrella",
    "the dog is walking on the beach",
    "people are eating lunch outside",
    "a boy is climbing a tall tree",
    "the chef is cutting fresh vegetables",
    "a girl is reading a book in the park",
    "two friends are playing tennis",
    "a farmer is driving a tractor across the field",
    "the family is having a picnic on the grass",
    "a skier is racing down the slope",
    "the children are flying a kite",
    "a couple is dancing in the square",
    "a worker is painting the fence",
];

const PRECONDITIONS: &[&str] = &[
    "the road is dry",
    "the water is heated",
    "it is raining heavily",
    "the sun is shining",
    "the gate is open",
    "the snow has melted",
    "the wind is blowing hard",
    "the store is closed",
    "the lights are on",
    "the ground is covered in ice",
    "the tide has come in",
    "the battery is charged",
];

const PLAIN: &[&str] = &[
    "a red car is parked near the old building",
    "a cat sleeps on the windowsill",
    "several boats are floating in the harbor",
    "a plate of food sits on the wooden table",
    "a crowd is waiting at the train station",
];

/// Conjunctions whose labeling functions put the action first.
const CONJUNCTIONS: &[&str] = &["unless", "because", "even though", "as long as", "in case"];

const CAPTION_SOURCES: &[&str] = &["coco", "flickr30k", "conceptual"];
pub const STATEMENT_SOURCES: &[&str] = &["anion", "atomic", "paco"];

const SITES: &[&str] = &[
    "quotefancy.com",
    "shutterstock.com",
    "istockphoto.com",
    "pinterest.com",
    "flickr.com",
    "alamy.com",
    "dreamstime.com",
    "gettyimages.com",
];

const NAMES: &[&str] = &["Alice", "Bob", "PersonX"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub captions: Vec<RawCaption>,
    pub pairs: Vec<PnliPair>,
    pub fixtures: Vec<FixtureRecord>,
}

/// Builds a corpus of `n_captions` captions and `n_statements` statements
/// (`n_statements / 2` precondition/action pairs, rounded up).
pub fn corpus(n_captions: usize, n_statements: usize, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let captions = (0..n_captions).map(|i| caption(&mut rng, i)).collect();
    let pairs: Vec<PnliPair> = (0..n_statements.div_ceil(2)).map(|i| pair(&mut rng, i)).collect();
    let fixtures = fixture_records(&pairs, 10, &mut rng);
    SynthCorpus {
        captions,
        pairs,
        fixtures,
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

fn caption(rng: &mut ChaCha8Rng, i: usize) -> RawCaption {
    let source = pick(rng, CAPTION_SOURCES);
    let roll: f64 = rng.random();
    let text = if roll < 0.45 {
        format!(
            "{} {} {}.",
            capitalize(pick(rng, ACTIONS)),
            pick(rng, CONJUNCTIONS),
            pick(rng, PRECONDITIONS)
        )
    } else if roll < 0.6 {
        format!(
            "{}. {}.",
            capitalize(pick(rng, PLAIN)),
            capitalize(pick(rng, PRECONDITIONS))
        )
    } else if roll < 0.8 {
        format!("{} while {}.", capitalize(pick(rng, ACTIONS)), pick(rng, PRECONDITIONS))
    } else {
        format!("{}.", capitalize(pick(rng, PLAIN)))
    };
    RawCaption {
        id: format!("{source}-{i:05}"),
        text,
        image_ref: format!("https://images.example.org/{source}/{i:05}.jpg"),
        source: source.to_string(),
    }
}

fn pair(rng: &mut ChaCha8Rng, i: usize) -> PnliPair {
    let mut action = pick(rng, ACTIONS).to_string();
    if rng.random_bool(0.2) {
        // Exercise identifier normalization on some rows.
        let name = pick(rng, NAMES);
        if let Some(rest) = action.split_once(" is ").map(|(_, r)| r) {
            action = format!("{name} is {rest}");
        }
    }
    PnliPair {
        id: format!("pair-{i:04}"),
        precondition: pick(rng, PRECONDITIONS).to_string(),
        action,
        label: if rng.random_bool(0.5) {
            Label::Allow
        } else {
            Label::Prevent
        },
        source: pick(rng, STATEMENT_SOURCES).to_string(),
    }
}

fn fixture_records(pairs: &[PnliPair], n: usize, rng: &mut ChaCha8Rng) -> Vec<FixtureRecord> {
    let registry = SourceRegistry::new(STATEMENT_SOURCES.iter().copied());
    let detector = default_detector();
    let mut queries: Vec<String> = pairs
        .iter()
        .filter_map(|p| normalize_pair(p, &detector, &registry).ok())
        .flat_map(|sides| sides.map(|s| build_query(&s.text)))
        .collect();
    queries.sort();
    queries.dedup();
    queries
        .into_iter()
        .enumerate()
        .map(|(q, query)| {
            let urls = (0..n)
                .map(|r| format!("https://{}/photo/{q:04}-{r:02}.jpg", pick(rng, SITES)))
                .collect();
            FixtureRecord { query, urls }
        })
        .collect()
}

/// Fixed identifiers plus the bundled first-name gazetteer.
pub fn default_detector() -> DetectorChain {
    DetectorChain(vec![Box::new(FixedIdentifiers), Box::new(Gazetteer::bundled())])
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
