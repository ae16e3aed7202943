//! The `unilm` command line.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::adapter::{init_adapter, Adapter, AdapterConfig, AdapterError, Projection, UNLA_MAGIC};
use crate::model::{
    count_parameters, extend_embeddings, Checkpoint, EmbeddingInit, GenerationParams, Model, ModelConfig, ModelError,
    Preset, UNLM_MAGIC,
};
use crate::orchestrator::{
    decide_route, now_ms, probe_server, GenerationRequest, GenerationResponse, HttpRemote, LocalEngine, Orchestrator,
    OrchestratorError, Privacy, Prompt, RemoteEngine, RemoteError, Route, RoutingPolicy, ServerHealth, TaskClass,
};
use crate::protocol::{GenerateBody, LoadAdapterBody, LoadAdapterReply};
use crate::quant::{
    load_palettized, quantize_checkpoint, QuantError, QuantizeOptions, QuantizedCheckpoint, UNLQ_MAGIC, UNQM_MAGIC,
};
use crate::server::{serve, ServerConfig, ServerState};
use crate::tokenizer::{
    merge_tokenizers, read_jsonl_corpus, train_bpe, TokenId, Tokenizer, TokenizerError, DEFAULT_SPECIALS,
};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Bad flags or unknown subcommand.
    pub const USAGE: i32 = 2;
    /// File missing or unreadable/unwritable.
    pub const IO: i32 = 3;
    /// A file was read but is not a valid container.
    pub const MALFORMED: i32 = 4;
    /// Arguments are well-formed but rejected (out-of-range ids, context overflow, ...).
    pub const INVALID: i32 = 5;
    /// No route can serve the request (privacy conflict, server down without fallback).
    pub const ROUTING: i32 = 6;
    /// The remote server answered with an error or could not be reached.
    pub const REMOTE: i32 = 7;
}

const EXIT_TABLE: &str = "Exit codes:
  0  success
  2  usage error
  3  I/O error
  4  malformed input file
  5  invalid input
  6  no viable route
  7  remote server error";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(exit::INVALID, message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(exit::IO, e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        let code = match e {
            TokenizerError::Io(_) => exit::IO,
            TokenizerError::MalformedFile { .. } => exit::MALFORMED,
            _ => exit::INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Io(_) => exit::IO,
            ModelError::MalformedContainer(_)
            | ModelError::UnsupportedVersion(_)
            | ModelError::ShapeViolation { .. } => exit::MALFORMED,
            _ => exit::INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Model(m) => m.into(),
            QuantError::Io(io) => io.into(),
            QuantError::Malformed(_) | QuantError::CorruptIndices(_) => CliError::new(exit::MALFORMED, e.to_string()),
            _ => CliError::invalid(e.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        let code = match e {
            AdapterError::Io(_) => exit::IO,
            AdapterError::MalformedFile(_) => exit::MALFORMED,
            _ => exit::INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<RemoteError> for CliError {
    fn from(e: RemoteError) -> Self {
        CliError::new(exit::REMOTE, e.to_string())
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        let code = match e {
            OrchestratorError::Route(_) => exit::ROUTING,
            OrchestratorError::RemoteProtocol(_) => exit::REMOTE,
            OrchestratorError::Config(_) => exit::MALFORMED,
            OrchestratorError::LocalEngine(_) | OrchestratorError::InvalidRequest(_) => exit::INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "unilm", version, about = "Tokenizer, inference, quantization and routing toolkit", after_help = EXIT_TABLE)]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a byte-level BPE tokenizer on a text or JSONL corpus.
    TrainTokenizer {
        /// `.jsonl` files use the `text` field of each record; other files are read as plain text.
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        /// Comma-separated special tokens.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SPECIALS.map(String::from))]
        specials: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append an extension tokenizer's new tokens to a base tokenizer.
    MergeTokenizer {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        extension: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode text to token ids.
    Tokenize {
        /// Tokenizer JSON; the plain byte alphabet when omitted.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        text: String,
    },
    /// Decode token ids to text.
    Detokenize {
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Ids separated by commas or spaces, optionally bracketed.
        #[arg(long)]
        ids: String,
    },
    /// Write a checkpoint with seeded random weights.
    InitCheckpoint {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the preset's vocabulary size.
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grow the embedding table to a larger vocabulary.
    ExtendEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// New vocabulary size; defaults to the size of `--tokenizer`.
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InitKind::Mean)]
        init: InitKind,
        #[arg(long, default_value_t = 0.02)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Palettize weight matrices with a mixed 2/4-bit plan.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 3.5)]
        target_bits: f64,
        #[arg(long, default_value_t = crate::quant::DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long)]
        include_embeddings: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a quantized checkpoint back to f32.
    Dequantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a checkpoint, quantized checkpoint, palettized tensor, adapter or tokenizer file.
    Inspect { path: PathBuf },
    /// Generate a completion locally, remotely or by routing policy.
    Generate {
        #[command(flatten)]
        req: RequestArgs,
        #[arg(long, value_enum, default_value_t = Mode::Auto)]
        mode: Mode,
        /// Read prompts from stdin, one per line.
        #[arg(long)]
        interactive: bool,
        /// Adapter file to attach on the local engine.
        #[arg(long)]
        adapter_file: Option<PathBuf>,
    },
    /// Perplexity of a text under a checkpoint.
    Ppl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Run the HTTP generation server.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// JSON file with `addr`, `workers`, `max_queue`, `max_adapter_bytes`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_queue: Option<usize>,
    },
    /// Print the routing decision for a request without running it.
    RouteExplain {
        #[command(flatten)]
        req: RequestArgs,
        /// Local model config when no checkpoint is given.
        #[arg(long, default_value = "toy")]
        preset: String,
    },
    /// Write a fresh adapter (B = 0 unless `--b-sigma` is set).
    AdapterInit {
        /// Checkpoint whose config the adapter targets.
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        /// Defaults to the rank.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, value_delimiter = ',', default_value = "wq,wk,wv,wo")]
        targets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        b_sigma: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register an adapter file with a running server.
    AdapterLoad {
        #[arg(long, env = "UNILM_SERVER")]
        server: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        file: PathBuf,
        /// Send the path for the server to read instead of uploading the bytes.
        #[arg(long)]
        by_path: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RequestArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, conflicts_with = "tokens")]
    pub prompt: Option<String>,
    /// Prompt as token ids.
    #[arg(long)]
    pub tokens: Option<String>,
    #[arg(long, default_value = "chat")]
    pub task: TaskClass,
    #[arg(long, default_value = "default")]
    pub privacy: Privacy,
    /// Routing policy JSON.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, env = "UNILM_SERVER")]
    pub server: Option<String>,
    /// Adapter name, resolved on whichever engine runs the request.
    #[arg(long)]
    pub adapter: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub stop: Vec<TokenId>,
    /// Remote request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Local,
    Remote,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    Mean,
    Gaussian,
}

/// Parse `args` (program name first) and execute. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    exit::OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    exit::USAGE
                }
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            if cli.json {
                let _ = writeln!(out, "{}", json!({"error": e.message, "exit_code": e.code}));
            }
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn emit(out: &mut dyn Write, as_json: bool, value: &impl Serialize, human: impl FnOnce() -> String) -> CliResult {
    if as_json {
        writeln!(out, "{}", serde_json::to_string(value).expect("output serializes"))?;
    } else {
        writeln!(out, "{}", human())?;
    }
    Ok(())
}

fn load_tokenizer(path: Option<&Path>) -> Result<Tokenizer, CliError> {
    Ok(match path {
        Some(p) => Tokenizer::load(p)?,
        None => Tokenizer::byte_level(&[]),
    })
}

/// Read an f32 (`UNLM`) or quantized (`UNQM`) checkpoint.
pub fn load_any_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::new(exit::IO, format!("{}: {e}", path.display())))?;
    match bytes.get(..4) {
        Some(m) if m == UNLM_MAGIC => Ok(Checkpoint::from_bytes(&bytes)?),
        Some(m) if m == UNQM_MAGIC => Ok(QuantizedCheckpoint::from_bytes(&bytes)?.dequantize()?),
        _ => Err(CliError::new(exit::MALFORMED, format!("{}: not a checkpoint", path.display()))),
    }
}

fn parse_ids(s: &str) -> Result<Vec<TokenId>, CliError> {
    s.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::invalid(format!("bad token id {t:?}"))))
        .collect()
}

fn parse_preset(s: &str) -> Result<ModelConfig, CliError> {
    let p: Preset = s.parse()?;
    Ok(ModelConfig::preset(p))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    let js = cli.json;
    match &cli.command {
        Command::TrainTokenizer { corpus, vocab_size, specials, out: dest } => {
            if corpus.is_empty() {
                return Err(CliError::new(exit::USAGE, "at least one --corpus is required"));
            }
            let mut docs = Vec::new();
            for path in corpus {
                if path.extension().is_some_and(|e| e == "jsonl") {
                    docs.extend(read_jsonl_corpus(path)?);
                } else {
                    docs.push(fs::read_to_string(path)?);
                }
            }
            let specials: Vec<&str> = specials.iter().map(String::as_str).collect();
            let started = Instant::now();
            let tok = train_bpe(&docs, *vocab_size, &specials)?;
            tok.save(dest)?;
            let v = json!({
                "vocab_size": tok.vocab_size(),
                "merges": tok.merges().len(),
                "special_tokens": tok.special_tokens(),
                "exhausted": tok.exhausted,
                "seconds": started.elapsed().as_secs_f64(),
            });
            emit(out, js, &v, || {
                let mut s = format!("vocab_size  {}\nmerges      {}", tok.vocab_size(), tok.merges().len());
                if tok.exhausted {
                    s.push_str("\n(corpus exhausted before reaching the target size)");
                }
                s
            })
        }
        Command::MergeTokenizer { base, extension, out: dest } => {
            let (merged, report) = merge_tokenizers(&Tokenizer::load(base)?, &Tokenizer::load(extension)?)?;
            merged.save(dest)?;
            let v = json!({
                "base_size": report.base_size,
                "extension_size": report.extension_size,
                "merged_size": report.merged_size,
                "duplicates_dropped": report.duplicates_dropped,
                "merges_dropped": report.merges_dropped,
            });
            emit(out, js, &v, || {
                format!(
                    "base        {}\nextension   {}\nduplicates  {}\nmerged      {}\nmerges dropped {}",
                    report.base_size,
                    report.extension_size,
                    report.duplicates_dropped,
                    report.merged_size,
                    report.merges_dropped
                )
            })
        }
        Command::Tokenize { tokenizer, text } => {
            let ids = load_tokenizer(tokenizer.as_deref())?.encode(text);
            emit(out, js, &ids, || ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "))
        }
        Command::Detokenize { tokenizer, ids } => {
            let tok = load_tokenizer(tokenizer.as_deref())?;
            let d = tok.decode_checked(&parse_ids(ids)?)?;
            emit(out, js, &json!({"text": d.text, "lossy": d.lossy}), || d.text.clone())
        }
        Command::InitCheckpoint { preset, seed, vocab_size, out: dest } => {
            let mut cfg = parse_preset(preset)?;
            if let Some(v) = vocab_size {
                cfg.vocab_size = *v;
            }
            let params = count_parameters(&cfg)?;
            let ckpt = Checkpoint::init_random(cfg, *seed)?;
            ckpt.save(dest)?;
            let v = json!({"model_id": ckpt.model_id(), "parameters": params, "fingerprint": format!("{:016x}", ckpt.fingerprint())});
            emit(out, js, &v, || format!("{}: {params} parameters -> {}", ckpt.model_id(), dest.display()))
        }
        Command::ExtendEmbeddings { checkpoint, vocab_size, tokenizer, init, sigma, seed, out: dest } => {
            let ckpt = load_any_checkpoint(checkpoint)?;
            let target = match (vocab_size, tokenizer) {
                (Some(v), _) => *v,
                (None, Some(t)) => Tokenizer::load(t)?.vocab_size(),
                (None, None) => return Err(CliError::new(exit::USAGE, "need --vocab-size or --tokenizer")),
            };
            let init = match init {
                InitKind::Mean => EmbeddingInit::Mean,
                InitKind::Gaussian => EmbeddingInit::Gaussian { sigma: *sigma, seed: *seed },
            };
            let old = ckpt.config().vocab_size;
            let ext = extend_embeddings(&ckpt, target, init)?;
            ext.save(dest)?;
            let v = json!({"old_vocab_size": old, "new_vocab_size": target});
            emit(out, js, &v, || format!("vocabulary {old} -> {target}"))
        }
        Command::Quantize { checkpoint, target_bits, group_size, include_embeddings, out: dest } => {
            let ckpt = load_any_checkpoint(checkpoint)?;
            if *group_size == 0 {
                return Err(CliError::invalid("--group-size must be positive"));
            }
            let opts = QuantizeOptions {
                target_avg_bits: *target_bits,
                group_size: *group_size,
                include_embeddings: *include_embeddings,
            };
            let q = quantize_checkpoint(&ckpt, &opts)?;
            q.save(dest)?;
            let s = q.summary();
            emit(out, js, &s, || quant_summary_text(&s))
        }
        Command::Dequantize { input, out: dest } => {
            let ckpt = QuantizedCheckpoint::load(input)?.dequantize()?;
            ckpt.save(dest)?;
            emit(out, js, &json!({"model_id": ckpt.model_id(), "tensors": ckpt.tensors().len()}), || {
                format!("{} tensors -> {}", ckpt.tensors().len(), dest.display())
            })
        }
        Command::Inspect { path } => inspect(path, js, out),
        Command::Generate { req, mode, interactive, adapter_file } => {
            generate(req, *mode, *interactive, adapter_file.as_deref(), js, out)
        }
        Command::Ppl { checkpoint, tokenizer, text, file } => {
            let text = match (text, file) {
                (Some(t), _) => t.clone(),
                (None, Some(f)) => fs::read_to_string(f)?,
                (None, None) => return Err(CliError::new(exit::USAGE, "need --text or --file")),
            };
            let tok = load_tokenizer(tokenizer.as_deref())?;
            let model = Model::new(Arc::new(load_any_checkpoint(checkpoint)?));
            let ids = tok.encode(&text);
            let ppl = model.perplexity(&ids)?;
            emit(out, js, &json!({"perplexity": ppl, "tokens": ids.len()}), || {
                format!("perplexity {ppl:.4} over {} tokens", ids.len())
            })
        }
        Command::Serve { checkpoint, tokenizer, config, addr, workers, max_queue } => {
            let mut cfg = match config {
                Some(p) => ServerConfig::load(p).map_err(|e| CliError::new(exit::MALFORMED, e))?,
                None => ServerConfig::default(),
            };
            if let Some(a) = addr {
                cfg.addr = a.clone();
            }
            if let Some(w) = workers {
                cfg.workers = *w;
            }
            if let Some(q) = max_queue {
                cfg.max_queue = *q;
            }
            let model = Model::new(Arc::new(load_any_checkpoint(checkpoint)?));
            let state = ServerState::new(model, load_tokenizer(tokenizer.as_deref())?, cfg);
            let handle = serve(state).map_err(|e| CliError::new(exit::IO, e))?;
            emit(out, js, &json!({"listening": handle.url()}), || format!("listening on {}", handle.url()))?;
            out.flush()?;
            handle.join();
            Ok(())
        }
        Command::RouteExplain { req, preset } => {
            let (config, tok) = match &req.checkpoint {
                Some(p) => (load_any_checkpoint(p)?.config().clone(), load_tokenizer(req.tokenizer.as_deref())?),
                None => (parse_preset(preset)?, load_tokenizer(req.tokenizer.as_deref())?),
            };
            let policy = load_policy(req.policy.as_deref())?;
            let request = build_request(req, prompt_of(req)?)?;
            let n = match &request.prompt {
                Prompt::Text(t) => tok.encode(t).len(),
                Prompt::Tokens(ids) => ids.len(),
            };
            let health = match &req.server {
                Some(s) => probe_server(s),
                None => ServerHealth::unreachable(now_ms()),
            };
            let limit = policy.local_limit(&config, request.params.max_new_tokens);
            let decision =
                decide_route(&request, n, &policy, &config, &health, now_ms()).map_err(OrchestratorError::from);
            let v = json!({
                "decision": decision.as_ref().ok(),
                "error": decision.as_ref().err().map(|e| e.to_string()),
                "prompt_tokens": n,
                "local_limit": limit,
                "server": health,
            });
            emit(out, js, &v, || {
                match &decision {
                Ok(d) => format!(
                    "route     {:?}\nreasons   {}\ndegraded  {}\nprompt    {n} tokens (local limit {limit})\nserver    {}",
                    d.route,
                    d.reasons.join(", "),
                    d.degraded,
                    if health.reachable { "reachable" } else { "unreachable" }
                ),
                Err(e) => format!("no route: {e}"),
            }
            })?;
            decision.map(|_| ()).map_err(CliError::from)
        }
        Command::AdapterInit { checkpoint, preset, name, rank, alpha, targets, seed, b_sigma, out: dest } => {
            let model_cfg = match (checkpoint, preset) {
                (Some(p), _) => load_any_checkpoint(p)?.config().clone(),
                (None, Some(p)) => parse_preset(p)?,
                (None, None) => return Err(CliError::new(exit::USAGE, "need --checkpoint or --preset")),
            };
            let targets = targets
                .iter()
                .map(|t| t.parse::<Projection>().map_err(|_| AdapterError::InvalidTarget(t.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = AdapterConfig { name: name.clone(), rank: *rank, alpha: alpha.unwrap_or(*rank as f32), targets };
            let mut a = init_adapter(&model_cfg, &cfg, *seed)?;
            if let Some(s) = b_sigma {
                a.randomize_b(*s, seed.wrapping_add(1));
            }
            a.save(dest)?;
            let size = fs::metadata(dest)?.len();
            emit(out, js, &json!({"name": name, "rank": rank, "size_bytes": size}), || {
                format!("{name}: rank {rank}, {size} bytes -> {}", dest.display())
            })
        }
        Command::AdapterLoad { server, name, file, by_path } => {
            let body = if *by_path {
                let abs = fs::canonicalize(file)?;
                LoadAdapterBody { name: name.clone(), payload: None, path: Some(abs.to_string_lossy().into_owned()) }
            } else {
                use base64::Engine as _;
                let raw = fs::read(file)?;
                LoadAdapterBody {
                    name: name.clone(),
                    payload: Some(base64::engine::general_purpose::STANDARD.encode(raw)),
                    path: None,
                }
            };
            let reply: LoadAdapterReply =
                HttpRemote::new(server, Duration::from_secs(120)).post_json("/v1/adapters", &body)?;
            emit(out, js, &reply, || format!("{}: {} ({} bytes)", reply.name, reply.status, reply.size_bytes))
        }
    }
}

fn quant_summary_text(s: &crate::quant::QuantizedSummary) -> String {
    format!(
        "palettized tensors  {}\nraw tensors         {}\ngroups              {} ({} x 4-bit, {} x 2-bit)\navg bits            {:.4} (+/- {:.4})\ncompression         {:.2}x",
        s.palettized_tensors,
        s.raw_tensors,
        s.groups,
        s.groups_4bit,
        s.groups_2bit,
        s.avg_bits,
        s.avg_bits_tolerance,
        s.compression_ratio
    )
}

fn inspect(path: &Path, js: bool, out: &mut dyn Write) -> CliResult {
    let bytes = fs::read(path).map_err(|e| CliError::new(exit::IO, format!("{}: {e}", path.display())))?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == UNLM_MAGIC {
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let cfg = ckpt.config();
        let params = count_parameters(cfg)?;
        let tensors: Vec<_> = ckpt.tensors().iter().map(|(n, t)| json!({"name": n, "shape": t.shape()})).collect();
        let v = json!({
            "format": "UNLM",
            "config": cfg,
            "parameters": params,
            "element_count": ckpt.element_count(),
            "fingerprint": format!("{:016x}", ckpt.fingerprint()),
            "tensors": tensors,
        });
        emit(out, js, &v, || {
            let mut s = format!(
                "UNLM checkpoint {}\nvocab {} hidden {} layers {} heads {}/{} ffn {} max_seq {}\nparameters {params}\n",
                cfg.model_id,
                cfg.vocab_size,
                cfg.hidden_size,
                cfg.n_layers,
                cfg.n_heads,
                cfg.n_kv_heads,
                cfg.intermediate_size,
                cfg.max_seq_len
            );
            for (n, t) in ckpt.tensors() {
                s.push_str(&format!("  {n:<28} {:?}\n", t.shape()));
            }
            s.trim_end().to_string()
        })
    } else if magic == UNQM_MAGIC {
        let q = QuantizedCheckpoint::from_bytes(&bytes)?;
        let s = q.summary();
        let mut v = serde_json::to_value(&s).expect("summary serializes");
        v["format"] = json!("UNQM");
        v["config"] = serde_json::to_value(&q.config).expect("config serializes");
        emit(out, js, &v, || format!("UNQM quantized checkpoint {}\n{}", s.model_id, quant_summary_text(&s)))
    } else if magic == UNLQ_MAGIC {
        let p = load_palettized(path)?;
        let v = json!({
            "format": "UNLQ",
            "shape": p.original_shape,
            "group_size": p.group_size,
            "groups": p.groups.len(),
            "avg_bits": p.avg_bits(),
        });
        emit(out, js, &v, || {
            format!(
                "UNLQ palettized tensor {:?}\ngroups {} of {}\navg bits {:.4}",
                p.original_shape,
                p.groups.len(),
                p.group_size,
                p.avg_bits()
            )
        })
    } else if magic == UNLA_MAGIC {
        let a = Adapter::from_bytes(&bytes, None)?;
        let c = a.config();
        let v = json!({
            "format": "UNLA",
            "name": c.name,
            "rank": c.rank,
            "alpha": c.alpha,
            "targets": c.targets,
            "layers": a.n_layers(),
            "size_bytes": bytes.len(),
        });
        emit(out, js, &v, || {
            let t: Vec<_> = c.targets.iter().map(|p| p.as_str()).collect();
            format!(
                "UNLA adapter {}\nrank {} alpha {} layers {}\ntargets {}\nsize {} bytes",
                c.name,
                c.rank,
                c.alpha,
                a.n_layers(),
                t.join(","),
                bytes.len()
            )
        })
    } else if bytes.first() == Some(&b'{') {
        let text = String::from_utf8(bytes).map_err(|e| CliError::new(exit::MALFORMED, e.to_string()))?;
        let tok = Tokenizer::from_json(&text)?;
        let v = json!({
            "format": "tokenizer",
            "vocab_size": tok.vocab_size(),
            "merges": tok.merges().len(),
            "special_tokens": tok.special_tokens(),
        });
        emit(out, js, &v, || {
            format!(
                "tokenizer\nvocab_size {}\nmerges {}\nspecials {:?}",
                tok.vocab_size(),
                tok.merges().len(),
                tok.special_tokens().keys().collect::<Vec<_>>()
            )
        })
    } else {
        Err(CliError::new(exit::MALFORMED, format!("{}: unrecognized file format", path.display())))
    }
}

fn load_policy(path: Option<&Path>) -> Result<RoutingPolicy, CliError> {
    Ok(match path {
        Some(p) => RoutingPolicy::load(p)?,
        None => RoutingPolicy::default(),
    })
}

fn prompt_of(req: &RequestArgs) -> Result<Prompt, CliError> {
    match (&req.prompt, &req.tokens) {
        (Some(p), _) => Ok(Prompt::Text(p.clone())),
        (None, Some(t)) => Ok(Prompt::Tokens(parse_ids(t)?)),
        (None, None) => Err(CliError::new(exit::USAGE, "need --prompt or --tokens")),
    }
}

fn build_request(req: &RequestArgs, prompt: Prompt) -> Result<GenerationRequest, CliError> {
    if !(req.temperature >= 0.0 && req.temperature.is_finite()) {
        return Err(CliError::invalid("--temperature must be finite and >= 0"));
    }
    Ok(GenerationRequest {
        prompt,
        params: GenerationParams {
            max_new_tokens: req.max_new_tokens,
            temperature: req.temperature,
            top_k: req.top_k,
            seed: req.seed,
            stop_ids: req.stop.clone(),
        },
        task_class: req.task,
        privacy: req.privacy,
        adapter_name: req.adapter.clone(),
        deadline_ms: None,
    })
}

enum Runner {
    Routed(Orchestrator),
    Remote { remote: HttpRemote, tokenizer: Option<Tokenizer> },
}

impl Runner {
    fn run(&self, req: &GenerationRequest) -> Result<GenerationResponse, CliError> {
        match self {
            Runner::Routed(o) => Ok(o.execute(req)?),
            Runner::Remote { remote, tokenizer } => {
                let started = Instant::now();
                let mut body = GenerateBody::from_tokens(Vec::new(), &req.params, req.adapter_name.clone());
                match (&req.prompt, tokenizer) {
                    (Prompt::Tokens(ids), _) => body.tokens = Some(ids.clone()),
                    (Prompt::Text(t), Some(tok)) => body.tokens = Some(tok.encode(t)),
                    (Prompt::Text(t), None) => {
                        body.tokens = None;
                        body.prompt = Some(t.clone());
                    }
                }
                let reply = remote.generate(&body)?;
                Ok(GenerationResponse {
                    tokens: reply.tokens,
                    text: reply.text,
                    model_id: reply.model_id,
                    route: Route::Remote,
                    degraded: false,
                    reasons: vec!["forced_remote".into()],
                    prompt_tokens: reply.usage.prompt_tokens,
                    timing_ms: started.elapsed().as_secs_f64() * 1000.0,
                })
            }
        }
    }
}

fn generate(
    req: &RequestArgs,
    mode: Mode,
    interactive: bool,
    adapter_file: Option<&Path>,
    js: bool,
    out: &mut dyn Write,
) -> CliResult {
    let timeout = Duration::from_secs(req.timeout.max(1));
    let runner = if mode == Mode::Remote {
        let server = req.server.as_deref().ok_or_else(|| CliError::new(exit::USAGE, "--mode remote needs --server"))?;
        let tokenizer = req.tokenizer.as_deref().map(Tokenizer::load).transpose()?;
        Runner::Remote { remote: HttpRemote::new(server, timeout), tokenizer }
    } else {
        let path = req.checkpoint.as_deref().ok_or_else(|| CliError::new(exit::USAGE, "--checkpoint is required"))?;
        let model = Model::new(Arc::new(load_any_checkpoint(path)?));
        let mut local = LocalEngine::new(model, Arc::new(load_tokenizer(req.tokenizer.as_deref())?));
        if let Some(f) = adapter_file {
            let mut a = Adapter::load(f, Some(local.model.config()))?;
            if let Some(n) = &req.adapter {
                a.rename(n.clone());
            }
            local.adapters.insert(a.name().to_string(), Arc::new(a));
        }
        let mut policy = load_policy(req.policy.as_deref())?;
        let remote: Option<Box<dyn RemoteEngine>> = match (mode, &req.server) {
            (Mode::Auto, Some(s)) => Some(Box::new(HttpRemote::new(s, timeout))),
            _ => None,
        };
        if mode == Mode::Local {
            policy.remote_task_classes.clear();
        }
        Runner::Routed(Orchestrator::new(local, remote, policy))
    };
    let adapter_name = match (&req.adapter, adapter_file, &runner) {
        (Some(n), _, _) => Some(n.clone()),
        (None, Some(_), Runner::Routed(o)) => o.local().adapters.keys().next().cloned(),
        _ => None,
    };

    let print = |resp: &GenerationResponse, out: &mut dyn Write| {
        emit(out, js, resp, || resp.text.clone())?;
        if !js {
            log::info!("route={:?} degraded={} reasons={}", resp.route, resp.degraded, resp.reasons.join(","));
        }
        Ok::<(), CliError>(())
    };

    if interactive {
        let stdin = std::io::stdin();
        for line in stdin.lock().lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut r = build_request(req, Prompt::Text(line))?;
            r.adapter_name = adapter_name.clone();
            match runner.run(&r) {
                Ok(resp) => print(&resp, out)?,
                Err(e) => writeln!(out, "error: {}", e.message)?,
            }
            out.flush()?;
        }
        return Ok(());
    }
    let mut r = build_request(req, prompt_of(req)?)?;
    r.adapter_name = adapter_name;
    let resp = runner.run(&r)?;
    print(&resp, out)
}
