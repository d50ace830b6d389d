use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedinstruct_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use fedinstruct_core::config::FederationConfig;
use fedinstruct_core::corpus_io::{
    client_id_of, load_corpus, load_dataset, load_example_pool, load_references, load_responses, save_dataset,
    ClientCorpus, GeneratedDataset,
};
use fedinstruct_core::evaluation::{evaluate, export_pair_embeddings, EvalReport};
use fedinstruct_core::federation::{run_federation, FederationOutcome};
use fedinstruct_core::generation::PromptTemplate;
use fedinstruct_core::pipeline::{generate_client_dataset, reward_filter_dataset, ClientStats};
use fedinstruct_core::retrieval::ExamplePoolIndex;
use fedinstruct_core::tensor::ShapeSpec;
use fedinstruct_core::{Error, InstructionPair, ParameterSet, Result};

use crate::args::{
    Cli, Command, EvaluateArgs, ExportArgs, FederateArgs, FilterArgs, GenerateArgs, PipelineArgs,
    ToyArgs,
};
use crate::manifest::{ConfigSnapshot, EvaluationSummary, FederationSummary, RunManifest, MANIFEST_FILE};
use crate::settings::{digests, BackendChoice, Settings};
use crate::toy::{write_toy, ToySpec};

/// Adapter layout used when a mock run is given no initial parameters.
pub const MOCK_INIT: &str = "lora_a=4x16,lora_b=16x4";
pub const FINAL_CHECKPOINT: &str = "final.ftp1";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Federate(a) => cmd_federate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(a),
        Command::MakeToy(a) => cmd_make_toy(a),
    }
}

fn mkdir(p: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        context: format!("creating {}", p.display()),
        source: e,
    })?;
    Ok(p.to_path_buf())
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn manifest(command: &str, s: &Settings, fed: &FederationConfig, backends: &BackendChoice) -> RunManifest {
    RunManifest::new(
        command,
        ConfigSnapshot {
            federation: fed.clone(),
            generation: s.generation.clone(),
            backends: backends.clone(),
        },
    )
}

/// `num_clients` follows the number of inputs unless it was set explicitly,
/// in which case the two must agree.
fn federation_config(s: &Settings, inputs: usize) -> Result<FederationConfig> {
    let mut fed = s.fed.clone();
    if !s.num_clients_explicit {
        fed.num_clients = inputs;
    } else if fed.num_clients != inputs {
        return Err(Error::Config(format!(
            "num_clients is {} but {inputs} client inputs were given",
            fed.num_clients
        )));
    }
    Ok(fed)
}

fn path_refs(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}

fn load_corpora(paths: &[PathBuf]) -> Result<Vec<ClientCorpus>> {
    let corpora: Vec<ClientCorpus> = paths.iter().map(|p| load_corpus(p)).collect::<Result<_>>()?;
    let mut seen = std::collections::HashSet::new();
    for c in &corpora {
        if !seen.insert(c.client_id.as_str()) {
            return Err(Error::DuplicateId(c.client_id.clone()));
        }
    }
    Ok(corpora)
}

fn dataset_path(dir: &Path, client_id: &str) -> PathBuf {
    dir.join(format!("{client_id}.jsonl"))
}

struct Generated {
    datasets: Vec<GeneratedDataset>,
    stats: BTreeMap<String, ClientStats>,
}

fn generate_stage(
    s: &Settings,
    fed: &FederationConfig,
    corpora: &[ClientCorpus],
    pool_path: &Path,
    out: &Path,
    backends: &mut BackendChoice,
) -> Result<Generated> {
    // clients_per_round only matters once federation starts
    let mut check = fed.clone();
    check.clients_per_round = check.clients_per_round.min(check.num_clients);
    check.validate()?;

    let pool = load_example_pool(pool_path)?;
    let (provider, embed_name) = s.embedding_provider()?;
    let (backend, gen_name) = s.generation_backend()?;
    backends.embedding = Some(embed_name);
    backends.generation = Some(gen_name);
    let index = ExamplePoolIndex::new(&pool, provider.as_ref())?;
    let template = PromptTemplate::default();

    let mut datasets = Vec::with_capacity(corpora.len());
    let mut stats = BTreeMap::new();
    for corpus in corpora {
        let g = generate_client_dataset(corpus, &index, fed, &s.generation, &template, backend.as_ref())?;
        save_dataset(&g.dataset, &dataset_path(out, &corpus.client_id))?;
        log::info!(
            "client {}: {} generated, {} kept after format filter",
            corpus.client_id,
            g.stats.generated,
            g.stats.kept
        );
        stats.insert(corpus.client_id.clone(), g.stats);
        datasets.push(g.dataset);
    }
    Ok(Generated { datasets, stats })
}

/// Stats for a dataset that arrived without a generation manifest: every
/// stored pair counts as generated and dropped pairs as reward drops.
fn stats_from_dataset(d: &GeneratedDataset) -> ClientStats {
    let kept = d.kept_count();
    ClientStats {
        generated: d.pairs.len(),
        reward_dropped: d.pairs.len() - kept,
        kept,
        ..Default::default()
    }
}

fn filter_stage(
    s: &Settings,
    datasets: &[GeneratedDataset],
    corpora: &HashMap<String, &ClientCorpus>,
    mut stats: BTreeMap<String, ClientStats>,
    out: &Path,
    backends: &mut BackendChoice,
) -> Result<Generated> {
    let mut filtered = Vec::with_capacity(datasets.len());
    for d in datasets {
        let corpus = corpora.get(&d.client_id);
        let docs = corpus
            .into_iter()
            .flat_map(|c| c.documents.iter().map(|doc| (doc.id.as_str(), doc.text.as_str())));
        let (backend, name) = s.reward_backend(docs)?;
        if name == "mock" && corpus.is_none() {
            return Err(Error::Config(format!(
                "the mock reward scorer needs the source corpus of client {:?} (--corpus)",
                d.client_id
            )));
        }
        backends.reward = Some(name);
        let (f, dropped) = reward_filter_dataset(d, backend.as_ref())?;
        let entry = stats
            .entry(d.client_id.clone())
            .or_insert_with(|| stats_from_dataset(d));
        entry.reward_dropped += dropped;
        entry.kept = f.kept_count();
        save_dataset(&f, &dataset_path(out, &f.client_id))?;
        filtered.push(f);
    }
    stats.retain(|id, _| datasets.iter().any(|d| &d.client_id == id));
    Ok(Generated {
        datasets: filtered,
        stats,
    })
}

fn resolve_init(s: &Settings, init: Option<&Path>, zeros: Option<&str>) -> Result<(ParameterSet, Option<PathBuf>)> {
    if let Some(p) = init.or(s.inputs.init_checkpoint.as_deref()) {
        return Ok((read_checkpoint(p)?.0, Some(p.to_path_buf())));
    }
    let spec = match zeros.or(s.inputs.init_zeros.as_deref()) {
        Some(z) => z,
        None if s.mock => MOCK_INIT,
        None => {
            return Err(Error::Config(
                "no initial parameters; pass --init or --init-zeros".into(),
            ))
        }
    };
    Ok((spec.parse::<ShapeSpec>()?.zeros()?, None))
}

fn federate_stage(
    s: &Settings,
    fed: &FederationConfig,
    datasets: &[GeneratedDataset],
    init: &ParameterSet,
    sim_spec: Option<&str>,
    out: &Path,
    backends: &mut BackendChoice,
) -> Result<(FederationOutcome, PathBuf)> {
    fed.validate()?;
    let ids: Vec<String> = datasets.iter().map(|d| d.client_id.clone()).collect();
    let (trainer, name) = s.trainer_backend(sim_spec, &ids, init.num_elements())?;
    backends.trainer = Some(name);
    let outcome = run_federation(fed, datasets, init, trainer.as_ref(), Some(out))?;
    let final_path = out.join(FINAL_CHECKPOINT);
    write_checkpoint(
        &final_path,
        &outcome.params,
        &CheckpointMeta {
            round: Some(outcome.records.len() as u64),
            seed: Some(fed.seed),
        },
    )?;
    Ok((outcome, final_path))
}

fn evaluate_stage(
    s: &Settings,
    responses: &Path,
    references: &Path,
    baseline: Option<f64>,
    out: &Path,
    backends: &mut BackendChoice,
) -> Result<EvalReport> {
    let responses = load_responses(responses)?;
    let references = load_references(references)?;
    let (provider, name) = s.embedding_provider()?;
    backends.embedding = Some(name);
    let report = evaluate(&responses, &references, provider.as_ref(), baseline)?;
    report.write_json(&out.join(REPORT_JSON))?;
    report.write_csv(&out.join(REPORT_CSV))?;
    Ok(report)
}

fn corpus_inputs(s: &Settings, flags: &[PathBuf]) -> Vec<PathBuf> {
    if flags.is_empty() {
        s.inputs.corpora.clone()
    } else {
        flags.to_vec()
    }
}

pub fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let start = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let corpus_paths = corpus_inputs(&s, &args.corpora);
    if corpus_paths.is_empty() {
        return Err(Error::Config("no corpora given; pass --corpus".into()));
    }
    let pool_path = args
        .pool
        .or_else(|| s.inputs.pool.clone())
        .ok_or_else(|| Error::Config("no example pool given; pass --pool".into()))?;
    let out = s.out_dir()?;
    let fed = federation_config(&s, corpus_paths.len())?;
    let corpora = load_corpora(&corpus_paths)?;

    let mut backends = BackendChoice::default();
    let g = generate_stage(&s, &fed, &corpora, &pool_path, &out, &mut backends)?;
    let mut m = manifest("generate", &s, &fed, &backends);
    let mut inputs = path_refs(&corpus_paths);
    inputs.push(&pool_path);
    m.inputs = digests(&inputs)?;
    m.set_clients(g.stats);
    m.timings_ms.insert("generate".into(), elapsed_ms(start));
    m.write(&out)
}

/// Looks for a manifest next to the datasets so that generation counts
/// carry through to the filtered output.
fn prior_stats(datasets: &[PathBuf]) -> BTreeMap<String, ClientStats> {
    let mut out = BTreeMap::new();
    let mut dirs: Vec<&Path> = datasets.iter().filter_map(|p| p.parent()).collect();
    dirs.dedup();
    for dir in dirs {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            continue;
        }
        match RunManifest::read(&path) {
            Ok(m) => out.extend(m.clients),
            Err(e) => log::warn!("ignoring {}: {e}", path.display()),
        }
    }
    out
}

pub fn cmd_filter(args: FilterArgs) -> Result<()> {
    let start = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let out = s.out_dir()?;
    let datasets: Vec<GeneratedDataset> = args.datasets.iter().map(|p| load_dataset(p)).collect::<Result<_>>()?;
    let corpus_paths = corpus_inputs(&s, &args.corpora);
    let corpora = load_corpora(&corpus_paths)?;
    let by_id: HashMap<String, &ClientCorpus> = corpora.iter().map(|c| (c.client_id.clone(), c)).collect();

    let mut prior = prior_stats(&args.datasets);
    // stale counts from a different dataset would unbalance the manifest
    for d in &datasets {
        if prior.get(&d.client_id).is_some_and(|st| st.kept != d.kept_count()) {
            prior.remove(&d.client_id);
        }
    }
    let mut backends = BackendChoice::default();
    let f = filter_stage(&s, &datasets, &by_id, prior, &out, &mut backends)?;
    let fed = federation_config(&s, datasets.len()).unwrap_or_else(|_| s.fed.clone());
    let mut m = manifest("filter", &s, &fed, &backends);
    let mut inputs = path_refs(&args.datasets);
    inputs.extend(path_refs(&corpus_paths));
    m.inputs = digests(&inputs)?;
    m.set_clients(f.stats);
    m.timings_ms.insert("filter".into(), elapsed_ms(start));
    m.write(&out)
}

pub fn cmd_federate(args: FederateArgs) -> Result<()> {
    let start = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let out = s.out_dir()?;
    let datasets: Vec<GeneratedDataset> = args.datasets.iter().map(|p| load_dataset(p)).collect::<Result<_>>()?;
    let fed = federation_config(&s, datasets.len())?;
    let (init, init_path) = resolve_init(&s, args.init.as_deref(), args.init_zeros.as_deref())?;

    let mut backends = BackendChoice::default();
    let (outcome, final_path) = federate_stage(
        &s,
        &fed,
        &datasets,
        &init,
        args.sim_trainer.as_deref(),
        &out,
        &mut backends,
    )?;
    let mut m = manifest("federate", &s, &fed, &backends);
    let mut inputs = path_refs(&args.datasets);
    inputs.extend(init_path.as_deref());
    m.inputs = digests(&inputs)?;
    m.set_clients(datasets.iter().map(|d| (d.client_id.clone(), stats_from_dataset(d))).collect());
    m.federation = Some(FederationSummary::new(&outcome, &final_path));
    m.timings_ms.insert("federate".into(), elapsed_ms(start));
    m.write(&out)
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let responses = args
        .responses
        .or_else(|| s.inputs.responses.clone())
        .ok_or_else(|| Error::Config("no responses given; pass --responses".into()))?;
    let references = args
        .references
        .or_else(|| s.inputs.references.clone())
        .ok_or_else(|| Error::Config("no references given; pass --references".into()))?;
    let out = s.out_dir()?;
    let mut backends = BackendChoice::default();
    let baseline = args.bert_baseline.or(s.inputs.bert_baseline);
    let report = evaluate_stage(&s, &responses, &references, baseline, &out, &mut backends)?;
    println!(
        "{} rows: ROUGE-L {:.4}, BERTScore F1 {:.4}",
        report.count, report.mean_rouge_l, report.mean_bert_f1
    );
    let mut m = manifest("evaluate", &s, &s.fed, &backends);
    m.inputs = digests(&[&responses, &references])?;
    m.evaluation = Some(EvaluationSummary::from(&report));
    m.timings_ms.insert("evaluate".into(), elapsed_ms(start));
    m.write(&out)
}

pub fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let s = Settings::resolve(&args.common)?;
    if s.inputs.corpora.is_empty() {
        return Err(Error::Config("the pipeline needs [inputs] corpora in the config".into()));
    }
    let pool_path = s
        .inputs
        .pool
        .clone()
        .ok_or_else(|| Error::Config("the pipeline needs [inputs] pool in the config".into()))?;
    let out = s.out_dir()?;
    let fed = federation_config(&s, s.inputs.corpora.len())?;
    fed.validate()?;
    let corpora = load_corpora(&s.inputs.corpora)?;
    let (init, init_path) = resolve_init(&s, None, None)?;

    let mut backends = BackendChoice::default();
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let g = generate_stage(&s, &fed, &corpora, &pool_path, &mkdir(&out.join("generated"))?, &mut backends)?;
    timings.insert("generate".to_string(), elapsed_ms(t));

    let t = Instant::now();
    let by_id: HashMap<String, &ClientCorpus> = corpora.iter().map(|c| (c.client_id.clone(), c)).collect();
    let f = filter_stage(&s, &g.datasets, &by_id, g.stats, &mkdir(&out.join("filtered"))?, &mut backends)?;
    timings.insert("filter".to_string(), elapsed_ms(t));

    let t = Instant::now();
    let (outcome, final_path) = federate_stage(
        &s,
        &fed,
        &f.datasets,
        &init,
        args.sim_trainer.as_deref(),
        &mkdir(&out.join("federation"))?,
        &mut backends,
    )?;
    timings.insert("federate".to_string(), elapsed_ms(t));

    let evaluation = match (&s.inputs.responses, &s.inputs.references) {
        (Some(resp), Some(refs)) => {
            let t = Instant::now();
            let baseline = s.inputs.bert_baseline;
            let report = evaluate_stage(&s, resp, refs, baseline, &mkdir(&out.join("evaluation"))?, &mut backends)?;
            timings.insert("evaluate".to_string(), elapsed_ms(t));
            Some(EvaluationSummary::from(&report))
        }
        _ => {
            log::info!("no responses/references configured; skipping evaluation");
            None
        }
    };

    let mut m = manifest("pipeline", &s, &fed, &backends);
    let mut inputs = path_refs(&s.inputs.corpora);
    inputs.push(&pool_path);
    inputs.extend(init_path.as_deref());
    inputs.extend(s.inputs.responses.as_deref());
    inputs.extend(s.inputs.references.as_deref());
    m.inputs = digests(&inputs)?;
    m.set_clients(f.stats);
    m.federation = Some(FederationSummary::new(&outcome, &final_path));
    m.evaluation = evaluation;
    m.timings_ms = timings;
    if !m.balanced() {
        return Err(Error::Config("internal accounting error: manifest does not balance".into()));
    }
    m.write(&out)?;
    println!(
        "kept {} of {} generated pairs; {} rounds, checksum {:.6}",
        m.totals.kept,
        m.totals.generated,
        outcome.records.len(),
        outcome.params.checksum()
    );
    Ok(())
}

pub fn cmd_export_embeddings(args: ExportArgs) -> Result<()> {
    if args.generated.is_empty() && args.human.is_empty() {
        return Err(Error::Config("nothing to export; pass --generated or --human".into()));
    }
    let s = Settings::resolve(&args.common)?;
    let out = s.out_dir()?;
    let load = |paths: &[PathBuf], kept_only: bool| -> Result<Vec<InstructionPair>> {
        let mut pairs = Vec::new();
        for p in paths {
            let d = load_dataset(p)?;
            pairs.extend(d.pairs.into_iter().filter(|pair| pair.kept || !kept_only));
        }
        Ok(pairs)
    };
    let generated = load(&args.generated, true)?;
    let human = load(&args.human, false)?;
    let (provider, _) = s.embedding_provider()?;
    let n = export_pair_embeddings(&generated, &human, provider.as_ref(), &out.join(EMBEDDINGS_FILE))?;
    println!("wrote {n} embeddings");
    Ok(())
}

pub fn cmd_make_toy(args: ToyArgs) -> Result<()> {
    let spec = ToySpec {
        clients: args.clients,
        docs: args.docs,
        pool_size: args.pool_size,
        eval_size: args.eval_size,
        seed: args.seed,
    };
    let layout = write_toy(&args.out, &spec)?;
    println!("wrote {}", layout.config.display());
    Ok(())
}

/// Client id → dataset file, for callers that know only an output directory.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            context: format!("listing {}", dir.display()),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl") && client_id_of(p).is_ok())
        .collect();
    files.sort();
    Ok(files)
}

