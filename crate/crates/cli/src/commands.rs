//! Subcommand implementations. Inputs are never modified; every output
//! goes to the run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vidpeak_coder::{agreement_vs_humans, code_batch, write_audit, CodingRequest, HttpBackend, MachineCoding};
use vidpeak_core::ctml::{
    agreement as rating_agreement, association_summary, read_records, write_records, AgreementReport,
    AssociationSummary, Coder, CtmlRecord, ASSOCIATION_ALPHA, N_FEATURES,
};
use vidpeak_core::embedstore::open_manifest;
use vidpeak_core::eval::{
    feature_matrix, make_split, run_experiment, run_split, ExperimentConfig, FeatureSource, MetricReport, SeedResult,
    SplitPlan,
};
use vidpeak_core::events::{
    canonical_metas, dedupe_videos, group_by_video, parse_event_bytes, read_video_meta, write_event_log,
    write_video_meta, IngestReport, SchemaConfig,
};
use vidpeak_core::model::{decode_tagged, encode_tagged, ActivationLayer};
use vidpeak_core::signals::{
    process_corpus, read_archive, subsample_moments, write_archive, LabelKey, Moment, Signal, VideoSignals,
};
use vidpeak_core::synth::{generate, write_corpus, CorpusPaths};
use vidpeak_core::tcav::{run_tcav, TcavResult};

use crate::artifacts::*;
use crate::config::{variant, RunConfig};
use crate::CliError;

pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        let hash = config.hash();
        let dir = config.run_dir();
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("cannot create output dir {}: {e}", dir.display())))?;
        Ok(Self { config, hash, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn artifact(&self, name: &str, producer: &str) -> Result<PathBuf, CliError> {
        require_artifact(&self.dir, name, producer)
    }
}

#[derive(Serialize, Deserialize)]
struct IngestSummary {
    config_hash: String,
    report: IngestReport,
    /// Duplicate ids mapped to their canonical id.
    merged: BTreeMap<String, String>,
    n_videos: usize,
    n_events: usize,
}

pub fn ingest(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let (events_path, meta_path) = (c.events_path(), c.metadata_path());
    require_input(&events_path, "event log")?;
    require_input(&meta_path, "video metadata")?;
    let metas = read_video_meta(&read_input_lines(&meta_path)?[..])?;
    for m in &metas {
        m.validate()?;
    }
    let bytes = fs::read(&events_path).map_err(|e| CliError::Data(format!("{}: {e}", events_path.display())))?;
    let (events, report) = parse_event_bytes(&bytes, &SchemaConfig::with_metadata(&metas), c.signals.shards);
    let canon = dedupe_videos(&metas);
    let metas = canonical_metas(&metas, &canon);
    let grouped = group_by_video(events, &canon);
    let n_events = grouped.values().map(Vec::len).sum();
    log::info!(
        "ingested {} of {} lines ({} dropped) over {} videos",
        report.accepted,
        report.lines,
        report.dropped(),
        metas.len()
    );
    write_lines(&ctx.path("events.jsonl"), &ctx.hash, |w| {
        for evs in grouped.values() {
            write_event_log(evs, &mut *w)?;
        }
        Ok(())
    })?;
    write_lines(&ctx.path("videos.jsonl"), &ctx.hash, |w| write_video_meta(&metas, w))?;
    write_json(
        &ctx.path("ingest.json"),
        &IngestSummary {
            config_hash: ctx.hash.clone(),
            report,
            merged: canon.into_iter().filter(|(a, b)| a != b).collect(),
            n_videos: metas.len(),
            n_events,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct SignalsSummary {
    config_hash: String,
    n_videos: usize,
    n_moments: usize,
    skipped: Vec<String>,
    /// Positive rate of every label over subsampled moments.
    label_rates: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct AssociationsArtifact {
    config_hash: String,
    alpha: f64,
    n_records: usize,
    summary: AssociationSummary,
}

fn adjudicated(records: Vec<CtmlRecord>) -> Vec<CtmlRecord> {
    let has_adj = records.iter().any(|r| r.coder == Coder::Adjudicated);
    records
        .into_iter()
        .filter(|r| !has_adj || r.coder == Coder::Adjudicated)
        .collect()
}

fn load_records(path: &Path) -> Result<Vec<CtmlRecord>, CliError> {
    Ok(read_records(&read_input_lines(path)?[..])?)
}

pub fn signals(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let events = read_lines(&ctx.artifact("events.jsonl", "ingest")?, &ctx.hash)?;
    let metas = read_video_meta(&read_lines(&ctx.artifact("videos.jsonl", "ingest")?, &ctx.hash)?[..])?;
    let (events, _) = parse_event_bytes(&events, &SchemaConfig::default(), c.signals.shards);
    let grouped = group_by_video(events, &BTreeMap::new());
    let (videos, skipped) = process_corpus(&metas, &grouped, &c.signals.ks, &c.signals.signal_config());
    for s in &skipped {
        log::warn!("skipped: {s}");
    }
    write_lines(&ctx.path("signals.jsonl"), &ctx.hash, |w| write_archive(&videos, w))?;
    let moments = all_moments(&videos, c.signals.subsample_interval);
    let mut label_rates = BTreeMap::new();
    for &signal in &Signal::ALL {
        for &k in &c.signals.ks {
            let key = LabelKey { signal, k };
            let pos = moments.iter().filter(|m| m.label(key) == Some(1)).count();
            label_rates.insert(key.to_string(), pos as f64 / moments.len().max(1) as f64);
        }
    }
    write_json(
        &ctx.path("signals.json"),
        &SignalsSummary {
            config_hash: ctx.hash.clone(),
            n_videos: videos.len(),
            n_moments: moments.len(),
            skipped: skipped.iter().map(ToString::to_string).collect(),
            label_rates,
        },
    )?;
    let concepts = c.concepts_path();
    if concepts.exists() {
        let records = adjudicated(load_records(&concepts)?);
        let summary = association_summary(&records, &videos, &Signal::ALL)?;
        write_json(
            &ctx.path("associations.json"),
            &AssociationsArtifact {
                config_hash: ctx.hash.clone(),
                alpha: ASSOCIATION_ALPHA,
                n_records: records.len(),
                summary,
            },
        )?;
    } else {
        log::info!("no concept records at {}; associations skipped", concepts.display());
    }
    Ok(())
}

fn all_moments(videos: &[VideoSignals], interval: u32) -> Vec<Moment> {
    videos.iter().flat_map(|v| subsample_moments(v, interval)).collect()
}

fn load_moments(ctx: &Context) -> Result<(Vec<VideoSignals>, Vec<Moment>), CliError> {
    let bytes = read_lines(&ctx.artifact("signals.jsonl", "signals")?, &ctx.hash)?;
    let videos = read_archive(&bytes[..])?;
    let moments = all_moments(&videos, ctx.config.signals.subsample_interval);
    Ok((videos, moments))
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    config_hash: String,
    signal: Signal,
    k: u32,
    layout: String,
    variant: String,
    split: SplitPlan,
    result: SeedResult,
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let manifest = c.manifest_path();
    require_input(&manifest, "embedding manifest")?;
    let (_, moments) = load_moments(ctx)?;
    let store = open_manifest(&manifest)?;
    let seed = c.experiment_seeds()[c.train.seed_index];
    let plan = make_split(&moments, &c.evaluate.split, seed)?;
    plan.check_disjoint()?;
    let (x, layout) = feature_matrix(FeatureSource::Embeddings(&store), &c.train.selection, &moments)?;
    let key = LabelKey {
        signal: c.train.signal,
        k: c.train.k,
    };
    let labels: Vec<u8> = moments
        .iter()
        .map(|m| m.label(key).ok_or_else(|| CliError::Data(format!("moment ({}, {}) lacks label {key}", m.video_id, m.t))))
        .collect::<Result<_, _>>()?;
    let v = variant(&c.train.variant)?;
    let mut tc = c.model.clone();
    tc.weight_share = v.weight_share;
    tc.use_reference = v.use_reference;
    tc.seed = seed;
    let run = run_split(&x, &layout, &moments, &labels, &plan, c.train.k, &tc, c.evaluate.pooling)?;
    log::info!("test AUC {:.4}, lift {:.3}", run.seed_result.auc, run.seed_result.lift);
    let ckpt = encode_tagged(&run.params, Some(&tc), Some(&ctx.hash));
    let path = ctx.path("model.vpk");
    fs::write(&path, ckpt).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    write_lines(&ctx.path("train_log.jsonl"), &ctx.hash, |w| run.log.write_jsonl(w))?;
    write_json(
        &ctx.path("train.json"),
        &TrainSummary {
            config_hash: ctx.hash.clone(),
            signal: key.signal,
            k: key.k,
            layout,
            variant: v.name,
            split: plan,
            result: run.seed_result,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct MetricsArtifact {
    config_hash: String,
    reports: Vec<MetricReport>,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    config_hash: &'a str,
    signal: String,
    k: u32,
    selection: &'a str,
    variant: &'a str,
    auc_mean: f64,
    auc_std: f64,
    lift_mean: f64,
    lift_std: f64,
    n_test: usize,
    n_seeds: usize,
}

fn metric_rows<'a>(hash: &'a str, reports: &'a [MetricReport]) -> Vec<MetricRow<'a>> {
    reports
        .iter()
        .map(|r| MetricRow {
            config_hash: hash,
            signal: r.signal.to_string(),
            k: r.k,
            selection: &r.selection,
            variant: &r.variant,
            auc_mean: r.auc_mean,
            auc_std: r.auc_std,
            lift_mean: r.lift_mean,
            lift_std: r.lift_std,
            n_test: r.n_test,
            n_seeds: r.seeds.len(),
        })
        .collect()
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let manifest = c.manifest_path();
    require_input(&manifest, "embedding manifest")?;
    let (_, moments) = load_moments(ctx)?;
    let store = open_manifest(&manifest)?;
    let config = ExperimentConfig {
        signals: c.evaluate.signals.clone(),
        ks: c.evaluate.ks.clone(),
        selections: c.evaluate.selections.clone(),
        variants: c.evaluate.variants.iter().map(|v| variant(v)).collect::<Result<_, _>>()?,
        split: c.evaluate.split.clone(),
        seeds: c.experiment_seeds(),
        train: c.model.clone(),
        pooling: c.evaluate.pooling,
        dump_scores: c.evaluate.dump_scores,
    };
    let out = run_experiment(FeatureSource::Embeddings(&store), &moments, &config)?;
    for r in &out.reports {
        log::info!(
            "{}@{} {} {}: AUC {:.4} ± {:.4}, lift {:.3} ± {:.3}",
            r.signal,
            r.k,
            r.selection,
            r.variant,
            r.auc_mean,
            r.auc_std,
            r.lift_mean,
            r.lift_std
        );
    }
    write_csv(&ctx.path("metrics.csv"), &metric_rows(&ctx.hash, &out.reports))?;
    if c.evaluate.dump_scores {
        write_lines(&ctx.path("scores.jsonl"), &ctx.hash, |w| {
            for s in &out.scores {
                serde_json::to_writer(&mut *w, s)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
    }
    write_json(
        &ctx.path("metrics.json"),
        &MetricsArtifact {
            config_hash: ctx.hash.clone(),
            reports: out.reports,
        },
    )
}

use std::io::Write as _;

#[derive(Serialize, Deserialize)]
struct TcavArtifact {
    config_hash: String,
    signal: Signal,
    k: u32,
    layout: String,
    variant: String,
    n_candidates: usize,
    results: Vec<TcavResult>,
}

#[derive(Serialize)]
struct TcavRow<'a> {
    config_hash: &'a str,
    concept: &'a str,
    layer: &'a str,
    mean: f64,
    std: f64,
    t_stat: f64,
    p_value: f64,
    significant_bonferroni: bool,
    degenerate: bool,
    cav_quality: f64,
    random_quality: f64,
    n_positive: usize,
}

fn tcav_rows<'a>(hash: &'a str, results: &'a [TcavResult]) -> Vec<TcavRow<'a>> {
    results
        .iter()
        .map(|r| TcavRow {
            config_hash: hash,
            concept: &r.concept,
            layer: &r.layer,
            mean: r.mean,
            std: r.std,
            t_stat: r.t_stat,
            p_value: r.p_value,
            significant_bonferroni: r.significant_bonferroni,
            degenerate: r.degenerate,
            cav_quality: r.cav_quality,
            random_quality: r.random_quality,
            n_positive: r.n_positive,
        })
        .collect()
}

pub fn tcav(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let manifest = c.manifest_path();
    require_input(&manifest, "embedding manifest")?;
    let concepts = c.concepts_path();
    require_input(&concepts, "concept records")?;
    let ckpt_path = ctx.artifact("model.vpk", "train")?;
    let bytes = fs::read(&ckpt_path).map_err(|e| CliError::Data(format!("{}: {e}", ckpt_path.display())))?;
    let ckpt = decode_tagged(&bytes)?;
    if ckpt.provenance.as_deref() != Some(ctx.hash.as_str()) {
        return Err(CliError::Data(format!(
            "{} was trained under config {:?}, expected {}",
            ckpt_path.display(),
            ckpt.provenance,
            ctx.hash
        )));
    }
    let summary: TrainSummary = read_json(&ctx.artifact("train.json", "train")?, &ctx.hash)?;
    let (_, moments) = load_moments(ctx)?;
    let store = open_manifest(&manifest)?;
    let candidates: Vec<(String, i64)> = moments
        .iter()
        .filter(|m| summary.split.is_test(&m.course_id))
        .map(|m| (m.video_id.clone(), m.t))
        .collect();
    let layers: Vec<ActivationLayer> = if c.tcav.layers.is_empty() {
        ckpt.params
            .parsed_layout()?
            .names()
            .map(|n| ActivationLayer::InputPart(n.to_string()))
            .collect()
    } else {
        c.tcav
            .layers
            .iter()
            .map(|l| l.parse::<ActivationLayer>().map_err(|e| CliError::Config(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let records = adjudicated(load_records(&concepts)?);
    let results = run_tcav(&ckpt.params, &store, &records, &c.tcav.features, &layers, &candidates, &c.tcav_config())?;
    for r in &results {
        log::info!(
            "{} @ {}: {:.3} ± {:.3}, p = {:.2e}{}",
            r.concept,
            r.layer,
            r.mean,
            r.std,
            r.p_value,
            if r.significant_bonferroni { " *" } else { "" }
        );
    }
    write_csv(&ctx.path("tcav.csv"), &tcav_rows(&ctx.hash, &results))?;
    write_json(
        &ctx.path("tcav.json"),
        &TcavArtifact {
            config_hash: ctx.hash.clone(),
            signal: summary.signal,
            k: summary.k,
            layout: summary.layout,
            variant: summary.variant,
            n_candidates: candidates.len(),
            results,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct CodeSummary {
    config_hash: String,
    n_requests: usize,
    n_coded: usize,
    n_full_rubric: usize,
    failures: Vec<String>,
}

#[derive(Serialize)]
struct CodedRow<'a> {
    video_id: &'a str,
    t: i64,
    values: BTreeMap<&'static str, u8>,
}

pub fn code(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let path = c
        .paths
        .coding_requests
        .clone()
        .ok_or_else(|| CliError::Config("paths.coding_requests is not set".into()))?;
    require_input(&path, "coding requests")?;
    let text = read_input_lines(&path)?;
    let requests: Vec<CodingRequest> = text
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace))
        .map(|(i, l)| {
            serde_json::from_slice(l).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<_, _>>()?;
    let backend = HttpBackend::from_env(&c.coder.endpoint)?;
    let results = code_batch(
        &backend,
        &requests,
        &c.coder.prompt,
        c.coder.endpoint.retry_budget,
        c.coder.endpoint.max_concurrent,
    );
    let mut coded: Vec<&MachineCoding> = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in &results {
        match r {
            Ok(m) => {
                coded.push(m);
                // Subset codings have no full-rubric record.
                if m.values.len() == N_FEATURES {
                    records.push(m.record()?);
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    for f in &failures {
        log::warn!("{f}");
    }
    write_lines(&ctx.path("machine_codings.jsonl"), &ctx.hash, |w| {
        for m in &coded {
            let row = CodedRow {
                video_id: &m.video_id,
                t: m.t,
                values: m.values.iter().map(|(f, v)| (f.key(), *v)).collect(),
            };
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    write_lines(&ctx.path("machine_ratings.jsonl"), &ctx.hash, |w| write_records(&records, w))?;
    write_lines(&ctx.path("coder_audit.jsonl"), &ctx.hash, |w| write_audit(&coded, w))?;
    write_json(
        &ctx.path("code.json"),
        &CodeSummary {
            config_hash: ctx.hash.clone(),
            n_requests: requests.len(),
            n_coded: coded.len(),
            n_full_rubric: records.len(),
            failures: failures.clone(),
        },
    )?;
    if coded.is_empty() && !requests.is_empty() {
        return Err(CliError::Data(format!("no moment could be coded; first failure: {}", failures[0])));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AgreementArtifact {
    config_hash: String,
    human_vs_human: Vec<AgreementReport>,
    machine_vs_adjudicated: Option<Vec<AgreementReport>>,
}

pub fn agreement(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let human = c.human_ratings_path();
    require_input(&human, "human ratings")?;
    let ratings = load_records(&human)?;
    let by = |coder| ratings.iter().filter(|r| r.coder == coder).cloned().collect::<Vec<_>>();
    let human_vs_human = rating_agreement(&by(Coder::HumanA), &by(Coder::HumanB))?;
    let machine_path = c
        .paths
        .machine_ratings
        .clone()
        .or_else(|| Some(ctx.path("machine_ratings.jsonl")).filter(|p| p.exists()));
    let machine_vs_adjudicated = match machine_path {
        Some(p) => {
            require_input(&p, "machine ratings")?;
            let concepts = c.concepts_path();
            require_input(&concepts, "concept records")?;
            let machine = load_records(&p)?;
            Some(agreement_vs_humans(&machine, &load_records(&concepts)?)?)
        }
        None => None,
    };
    write_json(
        &ctx.path("agreement.json"),
        &AgreementArtifact {
            config_hash: ctx.hash.clone(),
            human_vs_human,
            machine_vs_adjudicated,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct SynthSummary {
    config_hash: String,
    paths: CorpusPaths,
    n_videos: usize,
    n_events: usize,
    n_corruptions: usize,
    n_records: usize,
    n_embedded: usize,
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let corpus = generate(&c.synth_config())?;
    let paths = write_corpus(&corpus, &c.synth.dir)?;
    log::info!("wrote synthetic corpus to {}", c.synth.dir.display());
    write_json(
        &ctx.path("synth.json"),
        &SynthSummary {
            config_hash: ctx.hash.clone(),
            paths,
            n_videos: corpus.metas.len(),
            n_events: corpus.events.len(),
            n_corruptions: corpus.truth.corruptions.len(),
            n_records: corpus.records.len(),
            n_embedded: corpus.embeddings.index.len(),
        },
    )
}

#[derive(Serialize, Deserialize)]
struct Report {
    config_hash: String,
    metrics: Vec<MetricReport>,
    tcav: Vec<TcavResult>,
    associations: AssociationSummary,
    agreement: Option<AgreementArtifact>,
}

#[derive(Serialize)]
struct LevelRow {
    feature: String,
    signal: String,
    level: u8,
    n: usize,
    mean_rank: Option<f64>,
}

#[derive(Serialize)]
struct TestRow {
    feature: String,
    signal: String,
    effect: f64,
    t_stat: f64,
    df: f64,
    p_value: f64,
    significant: bool,
}

#[derive(Serialize)]
struct KappaRow {
    pair: &'static str,
    feature: String,
    kappa: f64,
    weighted: bool,
    n_items: usize,
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let metrics: MetricsArtifact = read_json(&ctx.artifact("metrics.json", "evaluate")?, &ctx.hash)?;
    let tcav: TcavArtifact = read_json(&ctx.artifact("tcav.json", "tcav")?, &ctx.hash)?;
    let assoc: AssociationsArtifact = read_json(&ctx.artifact("associations.json", "signals")?, &ctx.hash)?;
    let agreement_path = ctx.path("agreement.json");
    let agreement: Option<AgreementArtifact> = if agreement_path.exists() {
        Some(read_json(&agreement_path, &ctx.hash)?)
    } else {
        None
    };

    write_csv(&ctx.path("report_metrics.csv"), &metric_rows(&ctx.hash, &metrics.reports))?;
    write_csv(&ctx.path("report_tcav.csv"), &tcav_rows(&ctx.hash, &tcav.results))?;
    let levels: Vec<LevelRow> = assoc
        .summary
        .levels
        .iter()
        .map(|l| LevelRow {
            feature: l.feature.to_string(),
            signal: l.signal.to_string(),
            level: l.level,
            n: l.n,
            mean_rank: l.mean_rank,
        })
        .collect();
    write_csv(&ctx.path("report_association_levels.csv"), &levels)?;
    let tests: Vec<TestRow> = assoc
        .summary
        .tests
        .iter()
        .map(|t| TestRow {
            feature: t.feature.to_string(),
            signal: t.signal.to_string(),
            effect: t.effect,
            t_stat: t.t_stat,
            df: t.df,
            p_value: t.p_value,
            significant: t.significant,
        })
        .collect();
    write_csv(&ctx.path("report_association_tests.csv"), &tests)?;
    if let Some(a) = &agreement {
        let mut rows = Vec::new();
        let sets = [("human_a_vs_human_b", Some(&a.human_vs_human)), ("machine_vs_adjudicated", a.machine_vs_adjudicated.as_ref())];
        for (pair, reports) in sets {
            for r in reports.into_iter().flatten() {
                rows.push(KappaRow {
                    pair,
                    feature: r.feature.to_string(),
                    kappa: r.kappa,
                    weighted: r.weighted,
                    n_items: r.n_items,
                });
            }
        }
        write_csv(&ctx.path("report_agreement.csv"), &rows)?;
    }
    let covered: BTreeSet<String> = tcav.results.iter().map(|r| r.layer.clone()).collect();
    log::info!(
        "report: {} metric cells, {} concept results over {} layers",
        metrics.reports.len(),
        tcav.results.len(),
        covered.len()
    );
    write_json(
        &ctx.path("report.json"),
        &Report {
            config_hash: ctx.hash.clone(),
            metrics: metrics.reports,
            tcav: tcav.results,
            associations: assoc.summary,
            agreement,
        },
    )
}
