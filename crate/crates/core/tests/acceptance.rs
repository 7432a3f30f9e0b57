//! Acceptance suite: one line per criterion, non-zero exit if any fails.

// Oracles spell their arithmetic out rather than reuse library helpers.
#![allow(clippy::manual_div_ceil, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use pvlir_core::assembly::{
    image_mask_count, majority_baseline, make_counterfactuals, score_predictions, text_mask_count, Prediction,
    Provenance, ProvenanceDetail, VariantKind,
};
use pvlir_core::embed_index::{EncoderSpace, Metric, Ranking, VectorIndex};
use pvlir_core::image_query::FixtureProvider;
use pvlir_core::lf_engine::{
    cumulative_report, parse_thresholds, threshold_filter, ClosedClassHeuristic, LabelClass, LfTable,
};
use pvlir_core::normalize::{length_filter, normalize_caption, RawCaption, SentenceSplitter};
use pvlir_core::pipeline::{self, PipelineConfig};
use pvlir_core::rank_fusion::{copeland_select, perplexity, rbo_ext};
use pvlir_core::verification::{
    fleiss_kappa, select_clean_test, Choice, VerificationService, VerificationState, Vote, VoteRequest,
};
use pvlir_core::{io, synth, ExtractedInstance, Label, PvliInstance, Split, StatementKind, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn main() {
    let criteria: &[(&str, fn() -> Outcome)] = &[
        ("lf extraction of the `unless` example", lf_unless_example),
        ("shipped lf table and threshold 0.6 retention", lf_table_and_threshold),
        (
            "cumulative report equals brute-force recount",
            cumulative_matches_recount,
        ),
        (
            "copeland agrees with exhaustive pairwise-majority brute force",
            copeland_exhaustive,
        ),
        ("rbo_ext fixed points and direct formula", rbo_fixed_points),
        (
            "perplexity with last-entry substitution on 3-space fixtures",
            perplexity_fixtures,
        ),
        (
            "exact knn equals brute-force scan (1000 vectors, k in 1/10/50)",
            knn_matches_scan,
        ),
        ("length filter on [3,4,5,6,7] keeps [4,6]", length_band),
        ("fleiss kappa: unanimous, monte carlo, two-unit oracle", kappa_checks),
        (
            "clean-test 2-of-3 rule and 151/261 majority baseline",
            clean_test_and_majority,
        ),
        ("vote log crash replay over every prefix", crash_replay),
        (
            "end-to-end fixture run: deterministic, 3 strategies, 30/10 split",
            end_to_end,
        ),
        (
            "counterfactual mask counts for n in 1..100 and grids to 8x8",
            mask_counts,
        ),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS  [{secs:6.2}s] {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  [{secs:6.2}s] {name}: {why}");
            }
        }
    }
    println!(
        "NOT REPRODUCIBLE  [  0.00s] model accuracies (e.g. FLAVA 80.43 fine-tuned on noisy test), rationale-conditioned \
         results (94.2 / 80.56), corpus-scale counts (34K instances from 17M captions) and the human kappa of 0.78 \
         need external models, corpora and annotators; the scorer, pipeline and kappa code are covered by the checks above"
    );
    println!("{} criteria checked, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn lf_unless_example() -> Outcome {
    let raw = RawCaption {
        id: "c".into(),
        text: "Swimming pools have cold water in the winter unless they are heated".into(),
        image_ref: "https://img/pool.jpg".into(),
        source: "coco".into(),
    };
    let captions = normalize_caption(&raw, &SentenceSplitter::default()).map_err(|e| format!("{e:?}"))?;
    ensure!(captions.len() == 1, "expected one sentence, got {}", captions.len());
    let out = LfTable::bundled().extract(&captions[0], &ClosedClassHeuristic::default());
    let primary = out.iter().find(|i| i.primary).ok_or("no match")?;
    ensure!(primary.lf_name == "unless", "lf {}", primary.lf_name);
    ensure!(
        primary.action_text == "swimming pools have cold water in the winter",
        "action `{}`",
        primary.action_text
    );
    ensure!(
        primary.precondition_text == "they are heated",
        "precondition `{}`",
        primary.precondition_text
    );
    ensure!(primary.label == Label::Prevent, "label {}", primary.label);
    Ok(())
}

/// (class, name, precision, fewer than 20 samples, pos check, template)
const REFERENCE_TABLE: &[(&str, &str, Option<&str>, bool, bool, &str)] = &[
    ("enables", "so that", Some("0.689"), false, false, "{P} so that {A}"),
    (
        "enables",
        "in order to",
        Some("0.650"),
        false,
        false,
        "{P} in order to {A}",
    ),
    (
        "enables",
        "because",
        Some("0.625"),
        false,
        false,
        r"{A} because (?!of\b){P}",
    ),
    ("enables", "due to", Some("0.550"), false, true, "{A} due to {P}"),
    (
        "enables",
        "in case",
        Some("0.475"),
        false,
        false,
        r"{A} in case (?!of\b){P}",
    ),
    ("enables", "as if", Some("0.400"), false, false, "{A} as if {P}"),
    (
        "enables",
        "as long as",
        Some("0.375"),
        false,
        false,
        "{A} as long as {P}",
    ),
    (
        "enables",
        "if",
        Some("0.150"),
        false,
        false,
        r"{A}(?<!\bas) if (?!not\b){P}",
    ),
    (
        "enables",
        "in the event",
        Some("0.100"),
        false,
        false,
        "{A} in the event {P}",
    ),
    (
        "enables",
        "on condition",
        Some("0.045"),
        false,
        false,
        r"{A} on condition (?!of anonymity\b){P}",
    ),
    ("enables", "supposing", Some("0.000"), true, false, "{A} supposing {P}"),
    (
        "enables",
        "on the assumption",
        Some("0.000"),
        true,
        false,
        "{A} on the assumption {P}",
    ),
    (
        "enables",
        "in the case that",
        Some("0.000"),
        true,
        false,
        "{A} in the case that {P}",
    ),
    (
        "enables",
        "contingent upon",
        Some("0.000"),
        true,
        false,
        "{A} contingent upon {P}",
    ),
    (
        "enables",
        "with the proviso",
        None,
        false,
        false,
        "{A} with the proviso {P}",
    ),
    (
        "enables",
        "to understand event",
        None,
        false,
        false,
        r#"to understand the event "{E}", it is important to know that {P}\."#,
    ),
    (
        "enables",
        "statement is true",
        None,
        false,
        false,
        r#"the statement "{E}" is true because {P}\."#,
    ),
    ("enables", "only if", None, false, false, "{A} only if {P}"),
    (
        "enables",
        "on these terms",
        None,
        false,
        false,
        "{A} on these terms {P}",
    ),
    (
        "enables",
        "makes possible",
        None,
        false,
        false,
        r"{P} makes {A} possible\.",
    ),
    ("disables", "unless", Some("0.750"), false, false, "{A} unless {P}"),
    (
        "disables",
        "even though",
        Some("0.550"),
        false,
        false,
        "{A} even though {P}",
    ),
    ("disables", "despite", Some("0.475"), false, false, "{A} despite {P}"),
    (
        "disables",
        "if not",
        Some("0.300"),
        false,
        false,
        r"{A}(?<!\bas) if not (?!(more|most|many|all)\b){P}",
    ),
    ("disables", "without", Some("0.257"), false, false, "{A} without {P}"),
    ("disables", "but", Some("0.175"), false, false, "{A} but {NP}"),
    ("disables", "except", Some("0.075"), false, false, "{A} except {P}"),
    ("disables", "lest", Some("0.045"), true, false, "{A} lest {P}"),
    (
        "disables",
        "excepting that",
        None,
        false,
        false,
        "{A} excepting that {P}",
    ),
    ("disables", "except for", None, false, false, "{A} except for {P}"),
];

fn extracted(lf: &str, precision: Option<f64>, label: Label, i: usize) -> ExtractedInstance {
    ExtractedInstance {
        caption_id: format!("c{i}"),
        image_ref: format!("img{i}"),
        caption_source: "coco".into(),
        action_text: "a b".into(),
        precondition_text: "c d".into(),
        label,
        lf_name: lf.into(),
        lf_precision: precision,
        primary: true,
    }
}

fn lf_table_and_threshold() -> Outcome {
    let table = LfTable::bundled();
    let rows: Vec<_> = table.functions().collect();
    ensure!(rows.len() == REFERENCE_TABLE.len(), "{} rows", rows.len());
    for (lf, (class, name, precision, starred, bold, template)) in rows.iter().zip(REFERENCE_TABLE) {
        let expected_class = if *class == "enables" {
            LabelClass::Enables
        } else {
            LabelClass::Disables
        };
        ensure!(lf.name == *name, "row name {} != {name}", lf.name);
        ensure!(lf.label_class == expected_class, "{name}: class");
        ensure!(lf.template == *template, "{name}: template `{}`", lf.template);
        ensure!(lf.pos_check == *bold, "{name}: pos check");
        ensure!(
            lf.precision == precision.map(|p| p.parse::<f64>().unwrap()),
            "{name}: precision {:?}",
            lf.precision
        );
        ensure!(
            lf.min_sample_met == (precision.is_some() && !*starred),
            "{name}: sample flag"
        );
    }
    let instances: Vec<_> = rows
        .iter()
        .enumerate()
        .map(|(i, lf)| extracted(&lf.name, lf.precision, lf.label_class.label(), i))
        .collect();
    let kept: BTreeMap<String, f64> = threshold_filter(&instances, 0.6, &HashSet::new())
        .into_iter()
        .map(|i| (i.lf_name, i.lf_precision.unwrap()))
        .collect();
    let expected: BTreeMap<String, f64> = [
        ("unless", 0.750),
        ("so that", 0.689),
        ("in order to", 0.650),
        ("because", 0.625),
    ]
    .into_iter()
    .map(|(n, p)| (n.to_string(), p))
    .collect();
    ensure!(kept == expected, "retained {kept:?}");
    Ok(())
}

fn cumulative_matches_recount() -> Outcome {
    let table = LfTable::bundled();
    // Precision in thousandths, straight from the reference transcription.
    let lfs: Vec<(&str, Option<u32>)> = REFERENCE_TABLE
        .iter()
        .map(|(_, name, p, ..)| (*name, p.map(|p| (p.parse::<f64>().unwrap() * 1000.0).round() as u32)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<ExtractedInstance> = (0..5000)
        .map(|i| {
            let (name, _) = lfs[rng.random_range(0..lfs.len())];
            let lf = table.get(name).unwrap();
            let label = if rng.random_bool(0.5) {
                Label::Allow
            } else {
                Label::Prevent
            };
            extracted(name, lf.precision, label, i)
        })
        .collect();
    let thresholds = parse_thresholds("0.0:1.0:0.05").map_err(|e| e.to_string())?;
    ensure!(thresholds.len() == 21, "{} thresholds", thresholds.len());
    let report = cumulative_report(&corpus, &thresholds);
    for (step, point) in report.iter().enumerate() {
        let milli = 50 * step as u32;
        let kept: Vec<&ExtractedInstance> = corpus
            .iter()
            .filter(|i| {
                lfs.iter()
                    .any(|(n, p)| *n == i.lf_name && p.is_some_and(|p| p >= milli))
            })
            .collect();
        let allow = kept.iter().filter(|i| i.label == Label::Allow).count();
        let frac_allow = if kept.is_empty() {
            0.0
        } else {
            allow as f64 / kept.len() as f64
        };
        ensure!(
            point.retained == kept.len(),
            "t={}: {} vs {}",
            point.threshold,
            point.retained,
            kept.len()
        );
        ensure!(
            point.fraction_retained == kept.len() as f64 / corpus.len() as f64,
            "t={}: fraction",
            point.threshold
        );
        ensure!(point.fraction_allow == frac_allow, "t={}: allow share", point.threshold);
    }
    Ok(())
}

const CANDIDATES: [&str; 4] = ["a", "b", "c", "d"];

/// Every non-empty ordering of a non-empty subset of the candidates.
fn all_orderings() -> Vec<Vec<&'static str>> {
    fn extend(prefix: &mut Vec<&'static str>, out: &mut Vec<Vec<&'static str>>) {
        for c in CANDIDATES {
            if !prefix.contains(&c) {
                prefix.push(c);
                out.push(prefix.clone());
                extend(prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), &mut out);
    out
}

fn to_ranking(model: usize, ids: &[&str], salt: usize) -> Ranking {
    Ranking {
        query_id: "q".into(),
        model_id: format!("m{model}"),
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                (
                    id.to_string(),
                    0.1 * (i + 1) as f64 + 0.01 * ((salt + model) % 3) as f64,
                )
            })
            .collect(),
    }
}

fn brute_force_winner(rankings: &[Ranking]) -> (String, BTreeMap<String, i64>) {
    let union: Vec<&str> = CANDIDATES
        .into_iter()
        .filter(|c| rankings.iter().any(|r| r.entries.iter().any(|(id, _)| id == c)))
        .collect();
    let position = |r: &Ranking, c: &str| r.entries.iter().position(|(id, _)| id == c).unwrap_or(usize::MAX);
    let m = rankings.len();
    let mut scores = BTreeMap::new();
    for &x in &union {
        let mut score = 0i64;
        for &y in union.iter().filter(|&&y| y != x) {
            let x_above = rankings.iter().filter(|r| position(r, x) < position(r, y)).count();
            let y_above = rankings.iter().filter(|r| position(r, y) < position(r, x)).count();
            if 2 * x_above > m {
                score += 1;
            } else if 2 * y_above > m {
                score -= 1;
            }
        }
        scores.insert(x.to_string(), score);
    }
    let ppl = |c: &str| {
        let present: Vec<f64> = rankings
            .iter()
            .filter(|r| !r.entries.is_empty())
            .map(|r| {
                r.entries
                    .iter()
                    .find(|(id, _)| id == c)
                    .map_or(r.entries.last().unwrap().1, |(_, d)| *d)
            })
            .collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    let best = *scores.values().max().unwrap();
    let winner = union
        .iter()
        .filter(|c| scores[**c] == best)
        .min_by(|a, b| ppl(a).total_cmp(&ppl(b)).then(a.cmp(b)))
        .unwrap()
        .to_string();
    (winner, scores)
}

fn copeland_exhaustive() -> Outcome {
    let orderings = all_orderings();
    ensure!(orderings.len() == 64, "{} orderings", orderings.len());
    let mut checked = 0usize;
    let mut check = |sets: &[&Vec<&str>], salt: usize| -> Outcome {
        let rankings: Vec<Ranking> = sets
            .iter()
            .enumerate()
            .map(|(m, ids)| to_ranking(m, ids, salt))
            .collect();
        let got = copeland_select("q", &rankings, 0.9).map_err(|e| e.to_string())?;
        let (winner, scores) = brute_force_winner(&rankings);
        ensure!(got.copeland_scores == scores, "scores differ for {sets:?}");
        ensure!(got.chosen == winner, "winner {} vs {winner} for {sets:?}", got.chosen);
        checked += 1;
        Ok(())
    };
    for (i, a) in orderings.iter().enumerate() {
        check(&[a], i)?;
        for (j, b) in orderings.iter().enumerate() {
            check(&[a, b], i + j)?;
            for (l, c) in orderings.iter().enumerate() {
                check(&[a, b, c], i + j + l)?;
            }
        }
    }
    ensure!(checked == 64 + 64 * 64 + 64 * 64 * 64, "{checked} sets");
    Ok(())
}

/// Extrapolated rank-biased overlap evaluated term by term.
fn rbo_direct(s: &[&str], t: &[&str], p: f64) -> f64 {
    let k = s.len().min(t.len());
    if k == 0 {
        return if s.is_empty() && t.is_empty() { 1.0 } else { 0.0 };
    }
    let overlap = |d: usize| s[..d].iter().filter(|x| t[..d].contains(x)).count() as f64;
    let tail: f64 = (1..=k).map(|d| overlap(d) / d as f64 * p.powi(d as i32)).sum();
    overlap(k) / k as f64 * p.powi(k as i32) + (1.0 - p) / p * tail
}

fn rbo_fixed_points() -> Outcome {
    let lists: [&[&str]; 4] = [&["a"], &["a", "b"], &["a", "b", "c", "d"], &["x", "y", "z", "a", "b"]];
    for p in [0.1, 0.5, 0.9, 0.99] {
        for l in lists {
            let v = rbo_ext(l, l, p).map_err(|e| e.to_string())?;
            ensure!(close(v, 1.0, 1e-12), "identical {l:?} p={p}: {v}");
            ensure!(close(rbo_direct(l, l, p), 1.0, 1e-12), "direct identical");
        }
        let v = rbo_ext(&["a", "b", "c"], &["d", "e", "f"], p).map_err(|e| e.to_string())?;
        ensure!(close(v, 0.0, 1e-12), "disjoint p={p}: {v}");
    }
    let swapped = rbo_ext(&["a", "b"], &["b", "a"], 0.9).map_err(|e| e.to_string())?;
    ensure!(close(swapped, 0.9, 1e-12), "[a,b]/[b,a]: {swapped}");
    ensure!(
        close(rbo_direct(&["a", "b"], &["b", "a"], 0.9), 0.9, 1e-12),
        "direct [a,b]/[b,a]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pool = ["a", "b", "c", "d", "e", "f", "g"];
    for _ in 0..500 {
        let mut s = pool.to_vec();
        let mut t = pool.to_vec();
        rand::seq::SliceRandom::shuffle(&mut s[..], &mut rng);
        rand::seq::SliceRandom::shuffle(&mut t[..], &mut rng);
        let (ls, lt) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let p = rng.random_range(0.05..0.95);
        let got = rbo_ext(&s[..ls], &t[..lt], p).map_err(|e| e.to_string())?;
        let want = rbo_direct(&s[..ls], &t[..lt], p);
        ensure!(
            close(got, want, 1e-12),
            "{:?} {:?} p={p}: {got} vs {want}",
            &s[..ls],
            &t[..lt]
        );
    }
    Ok(())
}

fn ranking(model: &str, entries: &[(&str, f64)]) -> Ranking {
    Ranking {
        query_id: "q".into(),
        model_id: model.into(),
        entries: entries.iter().map(|(id, d)| (id.to_string(), *d)).collect(),
    }
}

fn perplexity_fixtures() -> Outcome {
    let spaces = vec![
        ranking("m1", &[("a", 0.1), ("b", 0.4), ("c", 0.7)]),
        ranking("m2", &[("b", 0.2), ("c", 0.5)]),
        ranking("m3", &[("a", 0.3), ("d", 0.9)]),
    ];
    // a: 0.1 + 0.5 (last of m2) + 0.3; b: 0.4 + 0.2 + 0.9; c and d: 0.7 + 0.5 + 0.9.
    let expected = [("a", 0.9 / 3.0), ("b", 1.5 / 3.0), ("c", 2.1 / 3.0), ("d", 2.1 / 3.0)];
    for (id, want) in expected {
        let got = perplexity(id, &spaces).map_err(|e| e.to_string())?;
        ensure!(close(got, want, 1e-12), "{id}: {got} vs {want}");
    }
    let spaces = vec![
        ranking("m1", &[("x", 0.25)]),
        ranking("m2", &[("y", 0.75), ("z", 1.25)]),
        ranking("m3", &[("x", 0.0), ("y", 0.5)]),
    ];
    let got = perplexity("x", &spaces).map_err(|e| e.to_string())?;
    ensure!(close(got, 0.5, 1e-12), "x: {got}");
    ensure!(perplexity("nowhere", &spaces).is_err(), "unranked candidate accepted");
    Ok(())
}

fn knn_matches_scan() -> Outcome {
    let dim = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let vector = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>();
    let records: Vec<(String, Vec<f32>)> = (0..1000).map(|i| (format!("v{i:04}"), vector(&mut rng))).collect();
    let queries: Vec<Vec<f32>> = (0..25).map(|_| vector(&mut rng)).collect();
    for metric in [Metric::CosineDistance, Metric::NegativeDot] {
        let space = EncoderSpace {
            model_id: "m".into(),
            dim,
            metric,
        };
        let index = VectorIndex::build(space, records.clone()).map_err(|e| e.to_string())?;
        for (qi, q) in queries.iter().enumerate() {
            let unit = |v: &[f32]| {
                let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let qv = if metric == Metric::CosineDistance {
                unit(q)
            } else {
                q.iter().map(|&x| x as f64).collect()
            };
            let mut scan: Vec<(f64, &str)> = records
                .iter()
                .map(|(id, v)| {
                    let v = if metric == Metric::CosineDistance {
                        unit(v)
                    } else {
                        v.iter().map(|&x| x as f64).collect()
                    };
                    let dot: f64 = v.iter().zip(&qv).map(|(a, b)| a * b).sum();
                    let d = if metric == Metric::CosineDistance {
                        (1.0 - dot).clamp(0.0, 2.0)
                    } else {
                        -dot
                    };
                    (d, id.as_str())
                })
                .collect();
            scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
            for k in [1, 10, 50] {
                let got = index.query(&format!("q{qi}"), q, k).map_err(|e| e.to_string())?;
                let want: Vec<&str> = scan.iter().take(k).map(|(_, id)| *id).collect();
                ensure!(got.ids() == want, "{metric:?} q{qi} k={k}: order differs");
            }
        }
    }
    Ok(())
}

fn length_band() -> Outcome {
    let (kept, report) = length_filter(vec![3usize, 4, 5, 6, 7]).map_err(|e| e.to_string())?;
    ensure!(kept == vec![4, 5, 6], "kept {kept:?}");
    ensure!(
        (report.lower, report.upper) == (4, 6),
        "band {}..{}",
        report.lower,
        report.upper
    );
    ensure!(
        close(report.mean, 5.0, 1e-12) && close(report.stddev, 2f64.sqrt(), 1e-12),
        "moments"
    );
    Ok(())
}

/// Kappa from ordered-pair agreement counts and category shares.
fn kappa_oracle(units: &[Vec<Choice>]) -> f64 {
    let n = units[0].len();
    let mut agree = 0.0;
    for u in units {
        let pairs = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j);
        let same = pairs.filter(|&(i, j)| u[i] == u[j]).count();
        agree += same as f64 / (n * (n - 1)) as f64;
    }
    agree /= units.len() as f64;
    let all: Vec<Choice> = units.iter().flatten().copied().collect();
    let chance: f64 = Choice::ALL
        .iter()
        .map(|c| (all.iter().filter(|x| *x == c).count() as f64 / all.len() as f64).powi(2))
        .sum();
    (agree - chance) / (1.0 - chance)
}

fn kappa_checks() -> Outcome {
    use Choice::*;
    let unanimous = [
        vec![vec![True; 3], vec![False; 3]],
        vec![vec![True; 3], vec![False; 3], vec![NotSure; 3]],
        vec![vec![True; 3]; 5],
    ];
    for units in &unanimous {
        let k = fleiss_kappa(units).map_err(|e| e.to_string())?;
        ensure!(close(k, 1.0, 1e-12), "unanimous: {k}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random: Vec<Vec<Choice>> = (0..10_000)
        .map(|_| (0..3).map(|_| Choice::ALL[rng.random_range(0..3)]).collect())
        .collect();
    let k = fleiss_kappa(&random).map_err(|e| e.to_string())?;
    ensure!(k.abs() < 0.05, "random votes: {k}");
    let two = vec![vec![True, True, False], vec![False, False, True]];
    let k = fleiss_kappa(&two).map_err(|e| e.to_string())?;
    let oracle = kappa_oracle(&two);
    ensure!(
        close(k, oracle, 1e-9) && close(oracle, -1.0 / 3.0, 1e-9),
        "two-unit: {k} vs {oracle}"
    );
    Ok(())
}

fn instance(id: &str, label: Label) -> PvliInstance {
    PvliInstance {
        id: id.into(),
        hypothesis: format!("hypothesis {id}"),
        premise_image_ref: format!("https://img/{id}.jpg"),
        label,
        rationale: None,
        provenance: Provenance {
            strategy: Strategy::Iq,
            source: "paco".into(),
            detail: ProvenanceDetail::Search {
                statement_id: format!("{id}:p"),
                query_kind: StatementKind::Precondition,
                rank: 1,
                site: "img".into(),
            },
        },
        split: Split::Unassigned,
        conflict: false,
    }
}

fn vote(unit: &str, who: &str, choice: Choice, invalid: bool) -> Vote {
    Vote {
        unit_id: unit.into(),
        annotator_id: who.into(),
        choice,
        invalid_flag: invalid,
        timestamp: 0,
    }
}

fn clean_test_and_majority() -> Outcome {
    use Choice::*;
    let mut dataset = vec![
        instance("u1", Label::Allow),
        instance("u2", Label::Allow),
        instance("u3", Label::Prevent),
        instance("u4", Label::Prevent),
        instance("u5", Label::Allow),
        instance("u6", Label::Prevent),
        instance("u7", Label::Allow),
    ];
    let votes = vec![
        // 3 of 3 correct.
        vote("u1", "a", True, false),
        vote("u1", "b", True, false),
        vote("u1", "c", True, false),
        // 2 of 3 correct.
        vote("u2", "a", True, false),
        vote("u2", "b", NotSure, false),
        vote("u2", "c", True, false),
        // 2 of 3, prevent maps to false.
        vote("u3", "a", False, false),
        vote("u3", "b", False, false),
        vote("u3", "c", True, false),
        // matching choice but flagged invalid does not count.
        vote("u4", "a", False, false),
        vote("u4", "b", False, true),
        vote("u4", "c", NotSure, false),
        // 1 of 3.
        vote("u5", "a", True, false),
        vote("u5", "b", False, false),
        vote("u5", "c", NotSure, false),
        // incomplete.
        vote("u6", "a", False, false),
        vote("u6", "b", False, false),
    ];
    let summary = select_clean_test(&mut dataset, &votes);
    let selected: Vec<&str> = dataset
        .iter()
        .filter(|i| i.split == Split::CleanTest)
        .map(|i| i.id.as_str())
        .collect();
    ensure!(selected == ["u1", "u2", "u3"], "selected {selected:?}");
    ensure!(summary.size == 3 && summary.allow == 2, "summary {summary:?}");
    ensure!(summary.incomplete == ["u6"], "incomplete {:?}", summary.incomplete);

    let gold: Vec<PvliInstance> = (0..261)
        .map(|i| instance(&format!("g{i:03}"), if i < 151 { Label::Allow } else { Label::Prevent }))
        .collect();
    let baseline = majority_baseline(&gold).ok_or("empty gold")?;
    ensure!(close(baseline, 151.0 / 261.0, 1e-12), "baseline {baseline}");
    let preds: Vec<Prediction> = gold
        .iter()
        .map(|g| Prediction {
            id: g.id.clone(),
            label: Label::Allow,
        })
        .collect();
    let report = score_predictions(&gold, &preds).map_err(|e| e.to_string())?;
    ensure!(close(report.majority_baseline, 151.0 / 261.0, 1e-12), "scored baseline");
    ensure!(close(report.accuracy, 151.0 / 261.0, 1e-12), "all-allow accuracy");
    Ok(())
}

fn crash_replay() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let instances: Vec<PvliInstance> = (0..8).map(|i| instance(&format!("u{i}"), Label::Allow)).collect();
    let full = dir.path().join("full.log");
    {
        let svc = VerificationService::open(instances.clone(), &full, None).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..40 {
            let annotator = format!("ann{}", rng.random_range(0..5));
            let unit = format!("u{}", rng.random_range(0..8));
            let invalid = round % 7 == 0;
            let choice = if invalid {
                None
            } else {
                Some(Choice::ALL[rng.random_range(0..3)])
            };
            let _ = svc.record_vote(VoteRequest {
                unit_id: unit,
                annotator_id: annotator,
                choice,
                invalid_flag: invalid,
            });
        }
    }
    let bytes = std::fs::read(&full).map_err(|e| e.to_string())?;
    ensure!(bytes.len() > 200, "log too short to be interesting");
    for cut in 0..=bytes.len() {
        let prefix = &bytes[..cut];
        let complete = prefix.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let oracle_votes: Vec<Vote> = std::str::from_utf8(&prefix[..complete])
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let path = dir.path().join("replay.log");
        std::fs::write(&path, prefix).map_err(|e| e.to_string())?;
        let svc = VerificationService::open(instances.clone(), &path, None).map_err(|e| format!("cut {cut}: {e}"))?;
        ensure!(
            svc.snapshot() == VerificationState::fold(&instances, oracle_votes),
            "cut {cut}: replayed state differs from fold"
        );
        drop(svc);
        let len = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
        ensure!(
            len == complete as u64,
            "cut {cut}: torn tail not truncated ({len} bytes)"
        );
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let corpus = synth::corpus(200, 50, 7);
    ensure!(
        corpus.captions.len() == 200 && corpus.pairs.len() * 2 == 50,
        "corpus sizes"
    );
    let provider = FixtureProvider::new(corpus.fixtures.clone());
    let config = PipelineConfig {
        n_tuning: 30,
        n_noisy_test: 10,
        seed: 7,
        ..PipelineConfig::default()
    };
    let first = pipeline::run(&corpus.captions, &corpus.pairs, &provider, &config).map_err(|e| e.to_string())?;
    let second = pipeline::run(&corpus.captions, &corpus.pairs, &provider, &config).map_err(|e| e.to_string())?;
    let a = io::to_jsonl_string(&first.dataset).map_err(|e| e.to_string())?;
    let b = io::to_jsonl_string(&second.dataset).map_err(|e| e.to_string())?;
    ensure!(a == b, "dataset bytes differ between runs");
    let strategies: HashSet<Strategy> = first.dataset.iter().map(|i| i.strategy()).collect();
    ensure!(strategies.len() == 3, "strategies present: {strategies:?}");
    let ids: Vec<&str> = first.dataset.iter().map(|i| i.id.as_str()).collect();
    ensure!(ids.iter().collect::<HashSet<_>>().len() == ids.len(), "duplicate ids");
    let of = |s: Split| {
        first
            .dataset
            .iter()
            .filter(|i| i.split == s)
            .map(|i| i.id.as_str())
            .collect::<HashSet<_>>()
    };
    let (tuning, noisy) = (of(Split::Tuning), of(Split::NoisyTest));
    ensure!(
        tuning.len() == 30 && noisy.len() == 10,
        "split {} / {}",
        tuning.len(),
        noisy.len()
    );
    ensure!(tuning.is_disjoint(&noisy), "splits overlap");
    Ok(())
}

fn mask_counts() -> Outcome {
    for n in 1..=100usize {
        // round(0.67 n) with halves rounded up, in integer arithmetic.
        let want = (67 * n * 2 + 100) / 200;
        ensure!(text_mask_count(n) == want, "n={n}: {} vs {want}", text_mask_count(n));
        let mut inst = instance("x", Label::Allow);
        inst.hypothesis = (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let (variants, _) = make_counterfactuals(&inst, &[VariantKind::TextTokenMask], n as u64, (1, 1));
        let masked = variants[0]
            .masked_text
            .as_deref()
            .unwrap()
            .split(' ')
            .filter(|t| *t == "[MASK]")
            .count();
        ensure!(masked == want, "n={n}: {masked} tokens masked");
    }
    for r in 1..=8usize {
        for c in 1..=8usize {
            let want = (r * c + 1) / 2;
            ensure!(image_mask_count(r * c) == want, "{r}x{c}");
            let (variants, _) = make_counterfactuals(
                &instance("x", Label::Allow),
                &[VariantKind::ImageRegionMask],
                11,
                (r, c),
            );
            let grid = variants[0].mask_grid.as_ref().unwrap();
            let masked = grid.iter().flatten().filter(|m| **m).count();
            ensure!(
                grid.len() == r && grid.iter().all(|row| row.len() == c),
                "{r}x{c}: grid shape"
            );
            ensure!(masked == want, "{r}x{c}: {masked} cells masked");
        }
    }
    Ok(())
}
