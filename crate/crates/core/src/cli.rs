//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{ed_records, micro_prf, Report};
use crate::fusion::{write_curve, FusionModel, ModelConfig, TrainConfig};
use crate::grammar::TargetMode;
use crate::kb::{cl_recall, compute_prior, load_corpus, load_entities, write_corpus, write_entities, CandidateMap, EntityStore};
use crate::linker::{
    disambiguate, ed_examples, el_examples, link_document, read_results, write_results, LinkConfig, LinkResult,
    Reader,
};
use crate::retriever::{
    passage_examples, recall_at_k, RetrieverConfig, RetrieverModel, RetrieverTrainConfig, VectorIndex,
};
use crate::synthetic::vocabulary_corpus;
use crate::text::{split, Passage, Tokenizer, EOS_ID};

#[derive(Parser, Debug)]
#[command(name = "fusionlink", version, about = "Entity disambiguation and linking with a fusion-in-decoder reader")]
pub struct Cli {
    /// key=value config file with optional [subcommand] sections; flags win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for retrieval scoring and window reading
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate entities, candidate lists and a corpus, and build a vocabulary
    Ingest(IngestArgs),
    /// Embed every entity with a trained retriever
    BuildIndex(BuildIndexArgs),
    /// Train the bi-encoder retriever with NCE
    TrainRetriever(TrainRetrieverArgs),
    /// Train a disambiguation (ed) or linking (el) reader
    TrainReader(TrainReaderArgs),
    /// Link every annotated mention of a corpus to an entity
    Disambiguate(DisambiguateArgs),
    /// Find and link entity mentions in raw documents
    Link(LinkArgs),
    /// Score predictions against gold annotations
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences on a small model
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Entities JSONL (id, title, description)
    #[arg(long)]
    pub entities: PathBuf,
    /// Candidate lists JSONL (mention, candidates)
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Annotated corpus JSONL (doc_id, text, annotations)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum word count for the vocabulary
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Candidate-list cutoff used for the recall figure
    #[arg(long, default_value_t = 200)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    /// Retriever checkpoint directory
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub entities: PathBuf,
    /// Embedding dump; ids go to the same path with `.ids` appended
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Fraction of steps spent warming up
    #[arg(long, default_value_t = 0.01)]
    pub warmup: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainRetrieverArgs {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file; built from the entities and corpus when absent
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ff_width: usize,
    /// Negatives per passage
    #[arg(long, default_value_t = 32)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0.1)]
    pub hard_fraction: f64,
    /// Steps between re-embeddings of the entity set for hard negatives
    #[arg(long, default_value_t = 100)]
    pub refresh_every: usize,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Ed,
    El,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Title,
    Index,
}

impl From<Mode> for TargetMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Title => TargetMode::Title,
            Mode::Index => TargetMode::Index,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainReaderArgs {
    #[arg(long, value_enum, default_value_t = Task::Ed)]
    pub task: Task,
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate lists (ed)
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Retriever checkpoint (el)
    #[arg(long)]
    pub retriever: Option<PathBuf>,
    /// Entity embedding dump (el); built from the retriever when absent
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// How the ed reader names its answer
    #[arg(long, value_enum, default_value_t = Mode::Title)]
    pub target_mode: Mode,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub encoder_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ff_width: usize,
    /// Maximum candidates fused per input
    #[arg(long, default_value_t = 16)]
    pub n_cand: usize,
    #[arg(long, default_value_t = 64)]
    pub max_target_len: usize,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    /// Retrieved candidates per window (el)
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Report training exact match every this many steps (0 = never)
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct DisambiguateArgs {
    /// Reader checkpoint directory
    #[arg(long)]
    pub reader: PathBuf,
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// Corpus whose annotated spans are to be linked
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LinkArgs {
    #[arg(long)]
    pub retriever: PathBuf,
    /// Entity embedding dump; built from the retriever when absent
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub reader: PathBuf,
    #[arg(long)]
    pub entities: PathBuf,
    /// Documents JSONL; annotations, if present, are ignored
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted annotations JSONL
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold corpus JSONL
    #[arg(long)]
    pub gold: PathBuf,
    /// Knowledge base for InKB filtering; all gold entities count when absent
    #[arg(long)]
    pub entities: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::El)]
    pub task: Task,
    /// Corpus the ed priors are counted on; defaults to the gold corpus
    #[arg(long)]
    pub prior_corpus: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub dataset: String,
    /// Also write the JSON report here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    /// Candidates fused by the reader
    #[arg(long, default_value_t = 2)]
    pub candidates: usize,
    #[arg(long, default_value_t = 40)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Coordinates checked per parameter tensor
    #[arg(long, default_value_t = 100)]
    pub per_param: usize,
    /// Failure threshold on the maximum relative error
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

const SUBCOMMANDS: [&str; 8] = [
    "ingest",
    "build-index",
    "train-retriever",
    "train-reader",
    "disambiguate",
    "link",
    "evaluate",
    "gradcheck",
];

/// A config value and whether it came from the subcommand's own section.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigValue {
    pub value: String,
    pub sectioned: bool,
}

/// Parses `key = value` lines. Keys before any `[section]` header apply to
/// every subcommand that knows them; keys under `[name]` apply to
/// subcommand `name` and win over the global ones. `#` starts a comment.
pub fn parse_config(text: &str, subcommand: &str) -> Result<BTreeMap<String, ConfigValue>> {
    let mut global = BTreeMap::new();
    let mut local = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("config line {}: expected key = value", i + 1)));
        };
        let key = k.trim().replace('_', "-");
        let val = v.trim().trim_matches('"').to_string();
        match section.as_deref() {
            None => {
                global.insert(key, ConfigValue { value: val, sectioned: false });
            }
            Some(s) if s == subcommand => {
                local.insert(key, ConfigValue { value: val, sectioned: true });
            }
            Some(_) => {}
        }
    }
    global.extend(local);
    Ok(global)
}

fn flag_given(argv: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let with_eq = format!("--{long}=");
    argv.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&with_eq)
    })
}

/// Appends config-file values as flags unless the flag is already present.
/// Unknown keys are rejected inside the subcommand's section and skipped
/// at the top level.
fn inject_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(sub) = argv
        .iter()
        .map(|a| a.to_string_lossy().to_string())
        .find(|a| SUBCOMMANDS.contains(&a.as_str()))
    else {
        return Ok(argv);
    };
    must_exist(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let values = parse_config(&text, &sub)?;
    let cmd = Cli::command();
    let sc = cmd.find_subcommand(&sub).expect("known subcommand");
    let mut out = argv;
    for (key, cv) in values {
        if key == "config" || flag_given(&out, &key) {
            continue;
        }
        let Some(arg) = sc
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
        else {
            if cv.sectioned {
                return Err(Error::Config(format!("{}: unknown key {key:?} for {sub}", path.display())));
            }
            continue;
        };
        if arg.get_action().takes_values() {
            out.push(format!("--{key}").into());
            out.push(cv.value.into());
        } else if cv.value == "true" {
            out.push(format!("--{key}").into());
        }
    }
    Ok(out)
}

fn must_exist(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("no such file or directory: {}", p.display())))
    }
}

fn exist_all<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    paths.into_iter().try_for_each(|p| must_exist(p))
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on invalid input or configuration, 2 on failures while running.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match inject_config(argv) {
        Ok(a) => a,
        Err(e) => return report_error(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => return report_error(&Error::Config(e.to_string())),
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error[{}]: {e}", e.name());
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::BuildIndex(a) => build_index(a),
        Command::TrainRetriever(a) => train_retriever(a),
        Command::TrainReader(a) => train_reader(a),
        Command::Disambiguate(a) => run_disambiguate(a),
        Command::Link(a) => run_link(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn ingest(a: IngestArgs) -> Result<i32> {
    exist_all([&a.entities].into_iter().chain(&a.candidates).chain(&a.corpus))?;
    let store = load_entities(&a.entities)?;
    let corpus = a.corpus.as_deref().map(load_corpus).transpose()?.unwrap_or_default();
    for d in &corpus {
        if let Some(x) = d.annotations.iter().find(|x| !store.contains(&x.entity_id)) {
            log::warn!("{}: {} is not in the knowledge base", d.doc_id, x.entity_id);
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_entities(&a.out.join("entities.jsonl"), &store)?;
    println!("entities   {}", store.len());
    if let Some(c) = &a.candidates {
        let map = CandidateMap::load(c, &store)?;
        map.write(&a.out.join("candidates.jsonl"))?;
        println!("surfaces   {}", map.len());
        if !corpus.is_empty() {
            println!("cl_recall@{} {:.4}", a.k, cl_recall(&corpus, &map, a.k)?);
        }
    }
    if a.corpus.is_some() {
        write_corpus(&a.out.join("corpus.jsonl"), &corpus)?;
        println!("documents  {}", corpus.len());
    }
    let tok = Tokenizer::build(vocabulary_corpus(&store, &corpus), a.min_count)?;
    tok.write_vocab(&a.out.join("vocab.txt"))?;
    println!("vocabulary {}", tok.len());
    Ok(0)
}

fn tokenizer_for(vocab: Option<&Path>, store: &EntityStore, corpus: &[crate::kb::AnnotatedDocument]) -> Result<Tokenizer> {
    match vocab {
        Some(p) => {
            must_exist(p)?;
            Tokenizer::read_vocab(p)
        }
        None => Tokenizer::build(vocabulary_corpus(store, corpus), 1),
    }
}

fn train_config(t: &TrainArgs, eval_every: usize) -> TrainConfig {
    TrainConfig {
        steps: t.steps,
        batch: t.batch,
        peak_lr: t.lr,
        warmup: t.warmup,
        seed: t.seed,
        eval_every,
    }
}

fn train_retriever(a: TrainRetrieverArgs) -> Result<i32> {
    exist_all([&a.entities, &a.corpus])?;
    let store = load_entities(&a.entities)?;
    let corpus = load_corpus(&a.corpus)?;
    let tok = tokenizer_for(a.vocab.as_deref(), &store, &corpus)?;
    let cfg = RetrieverConfig {
        d_model: a.d_model,
        layers: a.layers,
        heads: a.heads,
        ff_width: a.ff_width,
        ..RetrieverConfig::default()
    };
    let mut model = RetrieverModel::new(cfg, tok, a.train.seed)?;
    let data = passage_examples(&corpus, a.window, a.stride)?;
    let tcfg = RetrieverTrainConfig {
        steps: a.train.steps,
        batch: a.train.batch,
        peak_lr: a.train.lr,
        warmup: a.train.warmup,
        negatives: a.negatives,
        hard_fraction: a.hard_fraction,
        refresh_every: a.refresh_every,
        seed: a.train.seed,
    };
    let curve = model.train(&store, &data, &tcfg)?;
    model.save(&a.out)?;
    write_curve(&a.out.join("loss.csv"), &curve)?;
    let index = VectorIndex::build(&model, &store);
    for k in [1, 10, 100] {
        println!("recall@{k:<4} {:.4}", recall_at_k(&model, &index, &data, k)?);
    }
    Ok(0)
}

fn build_index(a: BuildIndexArgs) -> Result<i32> {
    exist_all([&a.retriever, &a.entities])?;
    let model = RetrieverModel::load(&a.retriever)?;
    let store = load_entities(&a.entities)?;
    let index = VectorIndex::build(&model, &store);
    index.save(&a.out)?;
    println!("indexed {} entities, dim {}", index.len(), index.dim());
    Ok(0)
}

fn load_index(path: Option<&Path>, model: &RetrieverModel, store: &EntityStore) -> Result<VectorIndex> {
    match path {
        Some(p) => {
            must_exist(p)?;
            let ix = VectorIndex::load(p)?;
            if ix.ids() != store.iter().map(|e| e.id.clone()).collect::<Vec<_>>() {
                return Err(Error::Config(format!("{} does not match the entity file", p.display())));
            }
            Ok(ix)
        }
        None => Ok(VectorIndex::build(model, store)),
    }
}

fn train_reader(a: TrainReaderArgs) -> Result<i32> {
    exist_all([&a.entities, &a.corpus])?;
    let store = load_entities(&a.entities)?;
    let corpus = load_corpus(&a.corpus)?;
    let mode: TargetMode = a.target_mode.into();
    // decimal positions are needed by index-mode targets
    let tok = tokenizer_for(a.vocab.as_deref(), &store, &corpus)?
        .with_extra_tokens((0..a.n_cand).map(|i| i.to_string()));
    let mut cfg = ModelConfig::new(tok.len());
    cfg.d_model = a.d_model;
    cfg.encoder_layers = a.encoder_layers;
    cfg.decoder_layers = a.decoder_layers;
    cfg.heads = a.heads;
    cfg.ff_width = a.ff_width;
    cfg.max_candidates = a.n_cand;
    cfg.max_target_len = a.max_target_len;
    let mut model = FusionModel::new(cfg.clone(), a.train.seed)?;
    let data = match a.task {
        Task::Ed => {
            let c = a
                .candidates
                .as_ref()
                .ok_or_else(|| Error::Config("--candidates is required for --task ed".into()))?;
            must_exist(c)?;
            let map = CandidateMap::load(c, &store)?;
            ed_examples(&corpus, &store, &map, &tok, mode, a.n_cand, cfg.max_segment_len)?
        }
        Task::El => {
            let r = a
                .retriever
                .as_ref()
                .ok_or_else(|| Error::Config("--retriever is required for --task el".into()))?;
            must_exist(r)?;
            let retriever = RetrieverModel::load(r)?;
            let index = load_index(a.index.as_deref(), &retriever, &store)?;
            let lc = LinkConfig {
                window: a.window,
                stride: a.stride,
                k: a.k,
            };
            el_examples(&corpus, &store, &retriever, &index, &tok, &lc, a.n_cand, cfg.max_segment_len)?
        }
    };
    if let Some(ex) = data.iter().find(|ex| ex.target.len() > cfg.max_target_len) {
        return Err(Error::TargetTooLong {
            len: ex.target.len(),
            max: cfg.max_target_len,
        });
    }
    info!("{} training examples", data.len());
    let tcfg = train_config(&a.train, a.eval_every);
    let probe: Vec<_> = data.iter().take(64).cloned().collect();
    let curve = model.train(&data, &tcfg, |step, m| match m.exact_match(&probe) {
        Ok(em) => info!("step {step}: exact match {em:.3} on {} training examples", probe.len()),
        Err(e) => log::warn!("step {step}: {e}"),
    })?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_curve(&a.out.join("loss.csv"), &curve)?;
    let reader = Reader::new(model, tok, mode);
    reader.save(&a.out)?;
    println!("examples    {}", data.len());
    if let Some(last) = curve.last() {
        println!("final loss  {:.6}", last.loss);
    }
    println!("exact match {:.4}", reader.model.exact_match(&data)?);
    Ok(0)
}

fn run_disambiguate(a: DisambiguateArgs) -> Result<i32> {
    exist_all([&a.reader, &a.entities, &a.candidates, &a.input])?;
    let reader = Reader::load(&a.reader)?;
    let store = load_entities(&a.entities)?;
    let map = CandidateMap::load(&a.candidates, &store)?;
    let docs = load_corpus(&a.input)?;
    let mut results = Vec::with_capacity(docs.len());
    let (mut linked, mut total) = (0, 0);
    for d in &docs {
        let mut anns = Vec::new();
        for x in &d.annotations {
            total += 1;
            match disambiguate(&d.text, (x.start, x.end), &store, &map, &reader) {
                Ok(Some(id)) => {
                    linked += 1;
                    anns.push(crate::kb::Annotation {
                        start: x.start,
                        end: x.end,
                        entity_id: id,
                    });
                }
                Ok(None) => {}
                Err(Error::NoCandidates { surface }) => log::debug!("{}: no candidates for {surface:?}", d.doc_id),
                Err(e) => return Err(e),
            }
        }
        results.push(LinkResult::new(&d.doc_id, anns));
    }
    write_results(&a.out, &results)?;
    println!("linked {linked} of {total} mentions");
    Ok(0)
}

fn run_link(a: LinkArgs) -> Result<i32> {
    exist_all([&a.retriever, &a.reader, &a.entities, &a.input])?;
    let retriever = RetrieverModel::load(&a.retriever)?;
    let reader = Reader::load(&a.reader)?;
    let store = load_entities(&a.entities)?;
    let index = load_index(a.index.as_deref(), &retriever, &store)?;
    let docs = load_corpus(&a.input)?;
    let cfg = LinkConfig {
        window: a.window,
        stride: a.stride,
        k: a.k,
    };
    let mut results = Vec::with_capacity(docs.len());
    let mut n = 0;
    for d in &docs {
        let r = link_document(&d.doc_id, &d.text, &store, &retriever, &index, &reader, &cfg)?;
        for x in &r.dropped {
            log::debug!("{}@{}: dropped {:?} ({})", d.doc_id, x.window_offset, x.mention, x.reason);
        }
        n += r.annotations.len();
        results.push(r);
    }
    write_results(&a.out, &results)?;
    println!("{n} annotations in {} documents", results.len());
    Ok(0)
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    exist_all([&a.pred, &a.gold].into_iter().chain(&a.entities).chain(&a.prior_corpus))?;
    let pred = read_results(&a.pred)?;
    let gold_docs = load_corpus(&a.gold)?;
    let report = match a.task {
        Task::El => {
            let gold: Vec<LinkResult> = gold_docs.iter().map(LinkResult::from_document).collect();
            let kb = match &a.entities {
                Some(p) => load_entities(p)?,
                None => EntityStore::from_entities(
                    gold_docs
                        .iter()
                        .flat_map(|d| &d.annotations)
                        .map(|x| x.entity_id.clone())
                        .collect::<std::collections::BTreeSet<_>>()
                        .into_iter()
                        .map(|id| crate::kb::Entity {
                            title: id.clone(),
                            id,
                            description: String::new(),
                        }),
                )?,
            };
            Report::from_prf(&a.dataset, &micro_prf(&pred, &gold, &kb)?)
        }
        Task::Ed => {
            let prior_docs = match &a.prior_corpus {
                Some(p) => load_corpus(p)?,
                None => gold_docs.clone(),
            };
            let records = ed_records(&pred, &gold_docs)?;
            Report::from_ed(&a.dataset, &records, &compute_prior(&prior_docs))?
        }
    };
    print!("{}", report.table());
    println!("{}", report.to_json());
    if let Some(p) = &a.report {
        fs::write(p, report.to_json() + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(0)
}

/// Reader and retriever gradient checks on a random model. Returns the
/// reader's and the retriever's maximum relative errors.
pub fn gradcheck_errors(a: &GradcheckArgs) -> Result<(f64, f64)> {
    if a.vocab_size < 8 {
        return Err(Error::Config("--vocab-size must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let words: Vec<String> = (0..a.vocab_size - 3).map(|i| format!("w{i}")).collect();
    let tok = Tokenizer::build([words.join(" ")], 1)?;
    let v = tok.len();
    let mut cfg = ModelConfig::new(v);
    cfg.d_model = a.d_model;
    cfg.ff_width = 2 * a.d_model;
    cfg.max_candidates = a.candidates.max(1);
    let model = FusionModel::new(cfg, a.seed)?;
    let mut seq = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.gen_range(3..v)).collect() };
    let inputs: Vec<Vec<usize>> = (0..a.candidates).map(|_| seq(6)).collect();
    let mut target = seq(4);
    target.push(EOS_ID);
    let reader = model.grad_check(&inputs, &target, a.eps, a.per_param, a.seed)?;

    let rcfg = RetrieverConfig {
        d_model: a.d_model,
        ff_width: 2 * a.d_model,
        ..RetrieverConfig::default()
    };
    let retriever = RetrieverModel::new(rcfg, tok.clone(), a.seed)?;
    let ents: Vec<crate::kb::Entity> = (0..4)
        .map(|i| crate::kb::Entity {
            id: format!("e{i}"),
            title: (0..2).map(|_| words[rng.gen_range(0..words.len())].clone()).collect::<Vec<_>>().join(" "),
            description: (0..5).map(|_| words[rng.gen_range(0..words.len())].clone()).collect::<Vec<_>>().join(" "),
        })
        .collect();
    let text = (0..10).map(|_| words[rng.gen_range(0..words.len())].clone()).collect::<Vec<_>>().join(" ");
    let toks = split(&text);
    let passage = Passage {
        doc_id: "gradcheck".into(),
        token_start: 0,
        token_end: toks.len(),
        text: text.clone(),
        tokens: toks,
        char_offset: 0,
        topic: text,
    };
    let refs: Vec<&crate::kb::Entity> = ents.iter().collect();
    let nce = retriever.grad_check(&passage, &refs[..2], &refs[2..], a.eps, a.per_param, a.seed)?;
    Ok((reader.max_rel_error, nce.max_rel_error))
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let (reader, retriever) = gradcheck_errors(&a)?;
    println!("reader    max relative error {reader:.3e}");
    println!("retriever max relative error {retriever:.3e}");
    let worst = reader.max(retriever);
    if worst < a.tolerance {
        println!("ok (< {:e})", a.tolerance);
        Ok(0)
    } else {
        println!("FAILED (>= {:e})", a.tolerance);
        Ok(2)
    }
}
