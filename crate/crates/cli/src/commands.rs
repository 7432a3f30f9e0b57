use crate::*;
use anyhow::{anyhow, bail, Context, Result};
use pvlir_core::assembly::{self, Prediction, StatementBank, VariantKind};
use pvlir_core::embed_index::{parse_vector_file, write_vector_file, HashingEmbedder, VectorIndex};
use pvlir_core::image_query::{
    self, FixtureProvider, ImageProvider, ImageResult, JsonPointerAdapter, LiveProvider, SearchConfig,
};
use pvlir_core::io::{read_jsonl, read_to_string, write_jsonl, write_string};
use pvlir_core::lf_engine::{
    self, Annotation, CalibrationSample, ClosedClassHeuristic, ConjunctionCheck, LfTable, SidecarPos,
};
use pvlir_core::normalize::{
    self, DetectorChain, PnliPair, RawCaption, SentenceSplitter, SidecarSpans, SourceRegistry,
};
use pvlir_core::pipeline::{self, PipelineConfig};
use pvlir_core::rank_fusion::fuse_all;
use pvlir_core::verification::{self, http, VerificationService, Vote};
use pvlir_core::{synth, Caption, ExtractedInstance, FusionResult, PvliInstance, Ranking, Split, Statement};
use serde::Deserialize;
use serde_json::json;
use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_rejects(path: Option<&Path>, rejects: &[normalize::Reject]) -> Result<()> {
    if let Some(path) = path {
        write_jsonl(path, rejects)?;
    }
    if !rejects.is_empty() {
        log::warn!("{} records skipped", rejects.len());
    }
    Ok(())
}

fn load_table(path: Option<&Path>) -> Result<LfTable> {
    Ok(match path {
        Some(p) => LfTable::parse(&read_to_string(p)?)?,
        None => LfTable::bundled(),
    })
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Normalize(cmd) => normalize(cmd),
        Command::LengthFilter(args) => length_filter(args),
        Command::Extract(args) => extract(args),
        Command::Calibrate(cmd) => calibrate(cmd),
        Command::Report(cmd) => report(cmd),
        Command::Embed(args) => embed(args),
        Command::Index(cmd) => index(cmd),
        Command::Fuse(args) => fuse(args),
        Command::Iq(cmd) => iq(cmd),
        Command::Assemble(args) => assemble(args),
        Command::Split(args) => split(args),
        Command::Cf(cmd) => counterfactuals(cmd),
        Command::Score(args) => score(args),
        Command::Verify(cmd) => verify(cmd),
        Command::Pipeline(args) => {
            let captions: Vec<RawCaption> = read_jsonl(&args.captions)?;
            let pairs: Vec<PnliPair> = read_jsonl(&args.pairs)?;
            let provider = FixtureProvider::new(read_jsonl(&args.fixture)?);
            run_pipeline(&captions, &pairs, &provider, &args.run)
        }
        Command::Demo(args) => {
            let corpus = synth::corpus(args.n_captions, args.n_statements, args.run.seed);
            std::fs::create_dir_all(&args.run.out_dir)?;
            write_jsonl(args.run.out_dir.join("raw_captions.jsonl"), &corpus.captions)?;
            write_jsonl(args.run.out_dir.join("pairs.jsonl"), &corpus.pairs)?;
            write_jsonl(args.run.out_dir.join("image_fixture.jsonl"), &corpus.fixtures)?;
            let provider = FixtureProvider::new(corpus.fixtures);
            run_pipeline(&corpus.captions, &corpus.pairs, &provider, &args.run)
        }
    }
}

fn run_pipeline(
    captions: &[RawCaption],
    pairs: &[PnliPair],
    provider: &dyn ImageProvider,
    args: &RunArgs,
) -> Result<()> {
    let config = PipelineConfig {
        n_tuning: args.tuning,
        n_noisy_test: args.noisy_test,
        seed: args.seed,
        ..PipelineConfig::default()
    };
    let out = pipeline::run(captions, pairs, provider, &config)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_jsonl(args.out_dir.join("dataset.jsonl"), &out.dataset)?;
    write_jsonl(args.out_dir.join("rejects.jsonl"), &out.rejects)?;
    write_string(
        args.out_dir.join("report.json"),
        &serde_json::to_string_pretty(&out.report)?,
    )?;
    print_json(&out.report)
}

fn normalize(cmd: NormalizeCmd) -> Result<()> {
    match cmd {
        NormalizeCmd::Statements {
            input,
            out,
            sources,
            spans,
            rejects,
        } => {
            let pairs: Vec<PnliPair> = read_jsonl(&input)?;
            let registry = SourceRegistry::new(sources.iter().map(String::as_str));
            let mut detector = synth::default_detector();
            if let Some(path) = spans {
                detector = DetectorChain(vec![
                    Box::new(SidecarSpans::from_records(read_jsonl(&path)?)),
                    Box::new(detector),
                ]);
            }
            let mut statements = Vec::new();
            let mut skipped = Vec::new();
            for pair in &pairs {
                match normalize::normalize_pair(pair, &detector, &registry) {
                    Ok(sides) => statements.extend(sides),
                    Err(r) => skipped.push(r),
                }
            }
            write_jsonl(&out, &statements)?;
            write_rejects(rejects.as_deref(), &skipped)?;
            print_json(&json!({"pairs": pairs.len(), "statements": statements.len(), "rejected": skipped.len()}))
        }
        NormalizeCmd::Captions { input, out, rejects } => {
            let raw: Vec<RawCaption> = read_jsonl(&input)?;
            let splitter = SentenceSplitter::default();
            let mut captions = Vec::new();
            let mut skipped = Vec::new();
            for r in &raw {
                match normalize::normalize_caption(r, &splitter) {
                    Ok(found) => captions.extend(found),
                    Err(reason) => skipped.push(normalize::Reject {
                        id: r.id.clone(),
                        reason,
                    }),
                }
            }
            write_jsonl(&out, &captions)?;
            write_rejects(rejects.as_deref(), &skipped)?;
            print_json(&json!({"captions": raw.len(), "fragments": captions.len(), "rejected": skipped.len()}))
        }
    }
}

fn length_filter(args: LengthFilterArgs) -> Result<()> {
    let report = match args.kind {
        RecordKind::Statement => {
            let (kept, report) = normalize::length_filter(read_jsonl::<Statement>(&args.input)?)?;
            write_jsonl(&args.out, &kept)?;
            report
        }
        RecordKind::Caption => {
            let (kept, report) = normalize::length_filter(read_jsonl::<Caption>(&args.input)?)?;
            write_jsonl(&args.out, &kept)?;
            report
        }
    };
    if let Some(path) = &args.report {
        write_string(path, &serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)
}

fn extract(args: ExtractArgs) -> Result<()> {
    let table = load_table(args.table.as_deref())?;
    let captions: Vec<Caption> = read_jsonl(&args.captions)?;
    let pos: Box<dyn ConjunctionCheck> = match &args.pos {
        Some(path) => Box::new(SidecarPos::new(read_jsonl(path)?)),
        None => Box::new(ClosedClassHeuristic::default()),
    };
    let instances = table.extract_all(&captions, pos.as_ref());
    write_jsonl(&args.out, &instances)?;
    let primary = instances.iter().filter(|i| i.primary).count();
    print_json(&json!({"captions": captions.len(), "matches": instances.len(), "primary": primary}))
}

fn calibrate(cmd: CalibrateCmd) -> Result<()> {
    match cmd {
        CalibrateCmd::Sample {
            instances,
            lf,
            n,
            seed,
            out,
        } => {
            let corpus: Vec<ExtractedInstance> = read_jsonl(&instances)?;
            let sample = lf_engine::calibrate(&lf, &corpus, n, seed);
            write_string(&out, &serde_json::to_string_pretty(&sample)?)?;
            print_json(&json!({"lf": lf, "matched": sample.matched_count, "sampled": sample.instances.len()}))
        }
        CalibrateCmd::Ingest {
            sample,
            annotations,
            table,
            out,
        } => {
            let sample: CalibrationSample = serde_json::from_str(&read_to_string(&sample)?)?;
            let annotations: Vec<Annotation> = read_jsonl(&annotations)?;
            let calibration = lf_engine::ingest_calibration(&sample, &annotations)?;
            let mut table = load_table(table.as_deref())?;
            table.apply_calibration(&calibration)?;
            write_string(&out, &table.to_text())?;
            print_json(&calibration)
        }
    }
}

fn report(cmd: ReportCmd) -> Result<()> {
    match cmd {
        ReportCmd::Cumulative { instances, thresholds } => {
            let instances: Vec<ExtractedInstance> = read_jsonl(&instances)?;
            let grid = lf_engine::parse_thresholds(&thresholds)?;
            print_json(&lf_engine::cumulative_report(&instances, &grid))
        }
        ReportCmd::Lf {
            instances,
            primary_only,
        } => {
            let instances: Vec<ExtractedInstance> = read_jsonl(&instances)?;
            print_json(&lf_engine::lf_counts(&instances, primary_only))
        }
        ReportCmd::Dist { dataset, sizes } => {
            let dataset: Vec<PvliInstance> = read_jsonl(&dataset)?;
            let sizes = match sizes {
                Some(p) => assembly::parse_sizes(&read_to_string(p)?)?,
                None => Default::default(),
            };
            print_json(&assembly::distribution_report(&dataset, &sizes)?)
        }
    }
}

#[derive(Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

fn embed(args: EmbedArgs) -> Result<()> {
    let records: Vec<TextRecord> = read_jsonl(&args.input)?;
    let embedder = HashingEmbedder::new(args.dim, args.ngram, args.seed);
    let vectors: Vec<(String, Vec<f32>)> = records
        .iter()
        .map(|r| (r.id.clone(), embedder.embed(&r.text)))
        .collect();
    write_string(&args.out, &write_vector_file(&embedder.space(&args.model_id), &vectors))?;
    print_json(&json!({"model_id": args.model_id, "dim": args.dim, "vectors": vectors.len()}))
}

fn index(cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build { vectors } => {
            let index = VectorIndex::from_vector_file(&read_to_string(&vectors)?)?;
            let space = index.space();
            print_json(
                &json!({"model_id": space.model_id, "dim": space.dim, "metric": space.metric, "count": index.len()}),
            )
        }
        IndexCmd::Query { index, queries, k, out } => {
            let index = VectorIndex::from_vector_file(&read_to_string(&index)?)?;
            let (space, queries) = parse_vector_file(&read_to_string(&queries)?)?;
            if space.model_id != index.space().model_id {
                log::warn!(
                    "query space `{}` differs from index space `{}`",
                    space.model_id,
                    index.space().model_id
                );
            }
            let rankings = queries
                .iter()
                .map(|(id, v)| index.query(id, v, k))
                .collect::<Result<Vec<Ranking>, _>>()?;
            write_jsonl(&out, &rankings)?;
            print_json(&json!({"model_id": index.space().model_id, "queries": rankings.len(), "k": k}))
        }
    }
}

fn fuse(args: FuseArgs) -> Result<()> {
    let mut rankings: Vec<Ranking> = Vec::new();
    for path in &args.rankings {
        rankings.extend(read_jsonl::<Ranking>(path)?);
    }
    let fused = fuse_all(rankings, args.k, args.p)?;
    write_jsonl(&args.out, &fused)?;
    print_json(&json!({"queries": fused.len(), "p": args.p, "k": args.k}))
}

fn iq(cmd: IqCmd) -> Result<()> {
    match cmd {
        IqCmd::Run {
            statements,
            provider,
            fixture,
            endpoint,
            qps,
            n,
            exclude_sources,
            block_sites,
            max_in_flight,
            kind,
            out,
            rejects,
        } => {
            let mut statements: Vec<Statement> = read_jsonl(&statements)?;
            if let Some(kind) = kind {
                let kind: pvlir_core::StatementKind =
                    serde_json::from_value(json!(kind)).map_err(|_| anyhow!("unknown statement kind `{kind}`"))?;
                statements.retain(|s| s.kind == kind);
            }
            let provider: Box<dyn ImageProvider> = match provider {
                ProviderKind::Fixture => {
                    let path = fixture.context("--fixture is required for the fixture provider")?;
                    Box::new(FixtureProvider::new(read_jsonl(&path)?))
                }
                ProviderKind::Live => {
                    let endpoint = endpoint.context("--endpoint is required for the live provider")?;
                    Box::new(LiveProvider::new(
                        &endpoint,
                        Box::new(JsonPointerAdapter::default()),
                        qps,
                    )?)
                }
            };
            let config = SearchConfig {
                n,
                excluded_sources: exclude_sources.into_iter().collect(),
                blocked_sites: block_sites.into_iter().collect(),
                max_in_flight,
                ..SearchConfig::default()
            };
            let (results, skipped) = image_query::run(provider.as_ref(), &statements, &config);
            write_jsonl(&out, &results)?;
            write_rejects(rejects.as_deref(), &skipped)?;
            print_json(&json!({"statements": statements.len(), "results": results.len(), "rejected": skipped.len()}))
        }
        IqCmd::Stats { results, top } => {
            let results: Vec<ImageResult> = read_jsonl(&results)?;
            print_json(&image_query::site_stats(&results, top))
        }
    }
}

fn assemble(args: AssembleArgs) -> Result<()> {
    let statements: Vec<Statement> = read_jsonl(&args.statements)?;
    let bank = StatementBank::new(&statements);
    let ec = match &args.extracted {
        Some(path) => {
            let extracted: Vec<ExtractedInstance> = read_jsonl(path)?;
            let whitelist: HashSet<String> = args.whitelist.iter().cloned().collect();
            lf_engine::threshold_filter(&extracted, args.threshold, &whitelist)
                .iter()
                .filter(|e| e.primary)
                .map(assembly::from_extracted)
                .collect()
        }
        None => Vec::new(),
    };
    let cq = match &args.fusion {
        Some(path) => {
            let fused: Vec<FusionResult> = read_jsonl(path)?;
            let captions_path = args.captions.as_ref().context("--captions is required with --fusion")?;
            let captions: HashMap<String, Caption> = read_jsonl::<Caption>(captions_path)?
                .into_iter()
                .map(|c| (c.id.clone(), c))
                .collect();
            fused
                .iter()
                .filter_map(|f| assembly::from_fusion(f, &bank, &captions))
                .collect()
        }
        None => Vec::new(),
    };
    let iq = match &args.iq_results {
        Some(path) => read_jsonl::<ImageResult>(path)?
            .iter()
            .filter_map(|r| assembly::from_image_result(r, &bank))
            .collect(),
        None => Vec::new(),
    };
    let (dataset, report) = assembly::merge_dedupe(ec, cq, iq);
    write_jsonl(&args.out, &dataset)?;
    print_json(&report)
}

fn split(args: SplitArgs) -> Result<()> {
    let mut dataset: Vec<PvliInstance> = read_jsonl(&args.dataset)?;
    let report = assembly::split_sample(&mut dataset, args.tuning, args.noisy_test, args.seed)?;
    write_jsonl(&args.out, &dataset)?;
    print_json(&report)
}

fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let (r, c) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("grid must look like 4x4, got `{text}`"))?;
    let (r, c) = (r.trim().parse()?, c.trim().parse()?);
    if r == 0 || c == 0 {
        bail!("grid dimensions must be positive");
    }
    Ok((r, c))
}

fn counterfactuals(cmd: CfCmd) -> Result<()> {
    let CfCmd::Make {
        dataset,
        kinds,
        seed,
        grid,
        out,
    } = cmd;
    let dataset: Vec<PvliInstance> = read_jsonl(&dataset)?;
    let kinds: Vec<VariantKind> = if kinds.is_empty() {
        VariantKind::ALL.to_vec()
    } else {
        kinds
            .iter()
            .map(|k| k.parse().map_err(|e: String| anyhow!(e)))
            .collect::<Result<_>>()?
    };
    let grid = parse_grid(&grid)?;
    let mut variants = Vec::new();
    let mut skipped = Vec::new();
    for inst in &dataset {
        let (v, r) = assembly::make_counterfactuals(inst, &kinds, seed, grid);
        variants.extend(v);
        skipped.extend(r);
    }
    write_jsonl(&out, &variants)?;
    write_rejects(None, &skipped)?;
    print_json(&json!({"instances": dataset.len(), "variants": variants.len(), "rejected": skipped.len()}))
}

fn score(args: ScoreArgs) -> Result<()> {
    let mut gold: Vec<PvliInstance> = read_jsonl(&args.gold)?;
    if let Some(split) = &args.split {
        let split: Split = serde_json::from_value(json!(split)).map_err(|_| anyhow!("unknown split `{split}`"))?;
        gold.retain(|g| g.split == split);
    }
    let predictions: Vec<Prediction> = read_jsonl(&args.predictions)?;
    let report = assembly::score_predictions(&gold, &predictions)?;
    print_json(&json!({
        "report": report,
        "uniform_random_baseline": assembly::uniform_random_baseline(&gold, args.seed),
    }))
}

fn read_votes(path: &Path) -> Result<Vec<Vote>> {
    // Opening the log also drops a torn final line.
    let (_, votes) = verification::VoteLog::open(path)?;
    Ok(votes)
}

fn verify(cmd: VerifyCmd) -> Result<()> {
    match cmd {
        VerifyCmd::Serve {
            dataset,
            log,
            addr,
            annotators,
            ui_dir,
            sample,
            seed,
        } => {
            let mut instances: Vec<PvliInstance> = read_jsonl(&dataset)?;
            if let Some(n) = sample {
                instances = verification::sample_units(&instances, n, seed);
            }
            let allowlist = match annotators {
                Some(path) => Some(
                    read_to_string(&path)?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(str::to_string)
                        .collect(),
                ),
                None => None,
            };
            let svc = Arc::new(VerificationService::open(instances, &log, allowlist)?);
            eprintln!("serving {} units on http://{addr}", svc.instances().len());
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(http::serve(svc, &addr, ui_dir))?;
            Ok(())
        }
        VerifyCmd::Select { dataset, log, out } => {
            let mut dataset: Vec<PvliInstance> = read_jsonl(&dataset)?;
            let votes = read_votes(&log)?;
            let summary = verification::select_clean_test(&mut dataset, &votes);
            write_jsonl(&out, &dataset)?;
            print_json(&summary)
        }
        VerifyCmd::Kappa { log } => {
            let votes = read_votes(&log)?;
            let kappa = verification::kappa_from_votes(&votes)?;
            print_json(&json!({"votes": votes.len(), "kappa": kappa}))
        }
    }
}
