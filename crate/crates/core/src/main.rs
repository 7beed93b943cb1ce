use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use toolstream::callparse::parse_first_call;
use toolstream::clmetrics::{summarize, BaselineVector, StageGrid};
use toolstream::corpus::{load_corpus, BlocksFile, CorpusFormat, StreamSpec, DEFAULT_SEED};
use toolstream::error::{exit, HarnessError};
use toolstream::genclient::{
    import_completions, write_completions_jsonl, CompletionCache, CompletionRecord, EndpointConfig,
    Generator,
};
use toolstream::report::{
    block_index, config_args, emit_heatmap_data, grids_from_scores, load_blocks, read_prompts,
    read_scores, render_blocks, run_report, score_completions, CompletionSourceSpec, RunManifest,
};
use toolstream::scorer::{aggregate_all, write_category_csv, write_scores_jsonl, CategoryCounts};
use toolstream::transform::{
    context_stats, write_prompts_jsonl, Condition, ExternalTokenizer, PromptTemplate,
    RenderedPrompt,
};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure (I/O, tokenizer)
  2  usage error
  3  missing input file
  4  schema violation (corpus, blocks, prompts, completions, stale hashes)
  5  endpoint failure
  6  metric error (bad matrix or baseline)";

/// Continual tool-use evaluation harness.
#[derive(Parser)]
#[command(name = "toolstream", version, after_help = EXIT_CODES, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a corpus into disjoint-API blocks (blocks.json).
    Split(SplitArgs),
    /// Render prompts for one condition.
    Render(RenderArgs),
    /// Obtain completions from an endpoint or import recorded ones.
    Generate(GenerateArgs),
    /// Score completions into score JSONL plus a category CSV.
    Score(ScoreArgs),
    /// Build per-metric stage x block matrices from scores.
    Matrix(MatrixArgs),
    /// Continual-learning summary of a matrix.
    Summary(SummaryArgs),
    /// Run the whole pipeline from a manifest into one directory.
    Report(ReportArgs),
    /// Parse lines from stdin and print one JSON result per line.
    Parse,
}

#[derive(Args)]
struct ConfigArg {
    /// key = value file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value = "blocks.json")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "blocks-file")]
    blocks_file: PathBuf,
    #[arg(long)]
    condition: Condition,
    /// Render only a seeded per-block sample of this size.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// JSON file overriding template prefixes.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Command that reads text on stdin and prints a token count.
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long, default_value_t = 4)]
    tokenizer_workers: usize,
    #[arg(long)]
    out: PathBuf,
    /// Where to write per-condition length totals.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct GenerateArgs {
    /// Rendered prompts JSONL (with corpus + blocks to recover lengths).
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    stage: usize,
    /// Import completions from this JSONL instead of calling an endpoint.
    #[arg(long = "import")]
    import: Option<PathBuf>,
    /// Fail on prompt-hash mismatches instead of warning.
    #[arg(long)]
    strict_hashes: bool,
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    base_url: String,
    #[arg(long, default_value = "stage-{stage}")]
    model: String,
    #[arg(long, default_value_t = 128)]
    max_new_tokens: u32,
    /// Stop sequence; repeat for several. Defaults to a newline.
    #[arg(long)]
    stop: Vec<String>,
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
    #[arg(long, default_value_t = 2)]
    retries: u32,
    #[arg(long, default_value = ".toolstream-cache")]
    cache_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long = "blocks-file")]
    blocks_file: PathBuf,
    #[arg(long)]
    completions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    categories: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    blocks: usize,
    /// Training order of block ids, comma separated; identity by default.
    #[arg(long, value_delimiter = ',')]
    order: Vec<usize>,
    #[arg(long, default_value = "A")]
    condition: Condition,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct SummaryArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Stage-0 baseline CSV (same layout as the matrix). A stage-0 row in
    /// the matrix itself is used when this is absent.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Run manifest JSON.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long = "blocks-file")]
    blocks_file: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    sample: Option<usize>,
    /// Condition=file pairs such as A=completions_A.jsonl.
    #[arg(long = "import", value_parser = parse_import)]
    imports: Vec<(Condition, PathBuf)>,
    #[arg(long)]
    strict_hashes: bool,
    #[arg(long, value_delimiter = ',')]
    stages: Vec<usize>,
    /// Overrides the manifest's output directory.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn parse_import(s: &str) -> Result<(Condition, PathBuf), String> {
    let (c, p) = s
        .split_once('=')
        .ok_or_else(|| format!("expected CONDITION=PATH, got {s:?}"))?;
    Ok((c.parse()?, PathBuf::from(p)))
}

/// Splices `--config` file contents in front of the explicit flags so the
/// command line wins.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, HarnessError> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = PathBuf::from(args.get(pos + 1).cloned().unwrap_or_default());
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let extra = config_args(&text)?;
    let mut out: Vec<String> = args[..2.min(args.len())].to_vec();
    out.extend(extra);
    out.extend(args[2.min(args.len())..pos].iter().cloned());
    out.extend(args[(pos + 2).min(args.len())..].iter().cloned());
    Ok(out)
}

fn write_out(
    path: &Path,
    f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| HarnessError::io(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| HarnessError::io(path, e))
}

fn csv_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

fn split(a: SplitArgs) -> Result<(), HarnessError> {
    let episodes = load_corpus(&a.corpus, CorpusFormat::Jsonl)?;
    let stream = StreamSpec::new(a.blocks, a.seed)?;
    let blocks = load_blocks(&episodes, None, &stream)?;
    let file = BlocksFile::from_blocks(&blocks);
    write_out(&a.out, |b| b.write_all(file.to_json().as_bytes()))?;
    for blk in &file.blocks {
        eprintln!(
            "block {}: {} APIs, {} examples",
            blk.block_id,
            blk.api_names.len(),
            blk.example_ids.len()
        );
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<(), HarnessError> {
    let episodes = load_corpus(&a.corpus, CorpusFormat::Jsonl)?;
    let blocks = BlocksFile::read(&a.blocks_file)?.resolve(&episodes)?;
    let template = match &a.template {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Schema(format!("{}: {e}", p.display())))?
        }
        None => PromptTemplate::default(),
    };
    let mut prompts = render_blocks(
        &blocks,
        a.condition,
        &template,
        a.sample.map(|n| (n, a.seed)),
    );
    if let Some(cmd) = a.tokenizer.as_deref() {
        let tok = ExternalTokenizer::new(cmd, a.tokenizer_workers)
            .ok_or_else(|| HarnessError::Schema("empty tokenizer command".into()))?;
        tok.annotate(&mut prompts)?;
    }
    write_out(&a.out, |b| write_prompts_jsonl(&prompts, b))?;
    let stats = context_stats(&prompts);
    if let Some(path) = &a.stats {
        write_out(path, |b| {
            serde_json::to_writer_pretty(&mut *b, &stats)?;
            b.write_all(b"\n")
        })?;
    }
    let totals = stats.get(a.condition);
    eprintln!(
        "{} prompts ({}): {} chars, {} whitespace tokens",
        totals.prompts, a.condition, totals.chars, totals.ws_tokens
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), HarnessError> {
    let records = read_prompts(&a.prompts)?;
    let prompts: Vec<RenderedPrompt> = records
        .iter()
        .map(|r| RenderedPrompt {
            example_id: r.example_id.clone(),
            condition: r.condition,
            char_len: r.prompt.chars().count(),
            ws_token_len: r.prompt.split_whitespace().count(),
            text: r.prompt.clone(),
            target: r.target.clone(),
            block_id: 0,
            ext_token_len: None,
        })
        .collect();
    let out: Vec<CompletionRecord> = match &a.import {
        Some(path) => {
            let index = toolstream::genclient::index_prompts(&prompts);
            let imported = import_completions(path, Some(&index), a.strict_hashes)?;
            for w in &imported.stale {
                eprintln!(
                    "warning: stale completion for {} ({}, stage {})",
                    w.example_id, w.condition, w.stage
                );
            }
            imported
                .records
                .into_iter()
                .filter(|r| r.stage == a.stage)
                .collect()
        }
        None => {
            let cfg = EndpointConfig {
                base_url: a.base_url,
                model_id: a.model,
                max_new_tokens: a.max_new_tokens,
                stop_sequences: if a.stop.is_empty() {
                    vec!["\n".into()]
                } else {
                    a.stop
                },
                timeout_secs: a.timeout,
                max_parallel: a.max_parallel,
                retries: a.retries,
                ..EndpointConfig::default()
            };
            let generator = Generator::new(cfg, Some(CompletionCache::open(&a.cache_dir)));
            let batch = generator.batch_generate(&prompts, a.stage);
            eprintln!(
                "{} completed, {} cache hits, {} requests, {} failed",
                batch.completed().count(),
                generator.cache_hits(),
                generator.requests_sent(),
                batch.failures.len()
            );
            for f in &batch.failures {
                eprintln!("failed {}: {}", f.example_id, f.error);
            }
            let done: Vec<CompletionRecord> = batch.completed().cloned().collect();
            write_out(&a.out, |b| write_completions_jsonl(&done, b))?;
            if let Some(first) = batch.failures.first() {
                return Err(HarnessError::Batch {
                    failed: batch.failures.len(),
                    total: prompts.len(),
                    first: format!("{}: {}", first.example_id, first.error),
                });
            }
            return Ok(());
        }
    };
    write_out(&a.out, |b| write_completions_jsonl(&out, b))
}

fn score(a: ScoreArgs) -> Result<(), HarnessError> {
    let prompts = read_prompts(&a.prompts)?;
    let blocks = BlocksFile::read(&a.blocks_file)?;
    let completions = import_completions(&a.completions, None, false)?.records;
    let scores = score_completions(&prompts, &block_index(&blocks), &completions)?;
    write_out(&a.out, |b| write_scores_jsonl(&scores, b))?;
    let stages: std::collections::BTreeSet<usize> = scores.iter().map(|r| r.stage).collect();
    let columns: Vec<(String, CategoryCounts)> = stages
        .iter()
        .map(|&s| {
            (
                format!("stage_{s}"),
                CategoryCounts::from_records(scores.iter().filter(|r| r.stage == s)),
            )
        })
        .collect();
    let cat_path = a
        .categories
        .unwrap_or_else(|| a.out.with_extension("categories.csv"));
    write_out(&cat_path, |b| {
        write_category_csv(&columns, b).map_err(csv_io)
    })
}

fn matrix(a: MatrixArgs) -> Result<(), HarnessError> {
    let scores = read_scores(&a.scores)?;
    let order: Vec<usize> = if a.order.is_empty() {
        (1..=a.blocks).collect()
    } else {
        a.order
    };
    StreamSpec {
        blocks: a.blocks,
        block_order: order.clone(),
        seed: 0,
        sample_size: None,
    }
    .validate()?;
    let grids = grids_from_scores(&aggregate_all(&scores), &order);
    fs::create_dir_all(&a.out_dir).map_err(|e| HarnessError::io(&a.out_dir, e))?;
    for (metric, grid) in &grids {
        let path = a.out_dir.join(format!("matrix_{}.csv", metric.tag()));
        let mut buf = Vec::new();
        grid.write_csv(&mut buf)?;
        fs::write(&path, buf).map_err(|e| HarnessError::io(&path, e))?;
    }
    let by_condition = BTreeMap::from([(a.condition, grids)]);
    emit_heatmap_data(&by_condition, &a.out_dir)?;
    Ok(())
}

fn read_grid(path: &Path) -> Result<StageGrid, HarnessError> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(StageGrid::read_csv(file)?)
}

fn summary(a: SummaryArgs) -> Result<(), HarnessError> {
    let grid = read_grid(&a.matrix)?;
    let matrix = grid.to_matrix()?;
    let baseline: Option<BaselineVector> = match &a.baseline {
        Some(path) => {
            let b = read_grid(path)?;
            let row = b
                .rows
                .get(&0)
                .or_else(|| b.rows.values().next())
                .cloned()
                .ok_or_else(|| HarnessError::Schema(format!("{} has no rows", path.display())))?;
            Some(BaselineVector::new(row)?)
        }
        None => grid.baseline().transpose()?,
    };
    let s = summarize(&matrix, baseline.as_ref())?;
    let text = serde_json::to_string_pretty(&json!({
        "final_aa": s.final_aa,
        "bwt": s.bwt,
        "fwt": s.fwt,
        "avg_forgetting": s.avg_forgetting,
        "aulc": s.aulc,
    }))
    .expect("summary serializes")
        + "\n";
    match &a.out {
        Some(path) => write_out(path, |b| b.write_all(text.as_bytes())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> Result<(), HarnessError> {
    let mut manifest = match &a.manifest {
        Some(path) => RunManifest::read(path)?,
        None => {
            let corpus = a.corpus.clone().ok_or_else(|| {
                HarnessError::Schema("report needs --manifest or --corpus".into())
            })?;
            let mut stream = StreamSpec::new(a.blocks, a.seed)?;
            stream.sample_size = a.sample;
            let files: BTreeMap<Condition, PathBuf> = a.imports.iter().cloned().collect();
            RunManifest {
                corpus,
                blocks_file: a.blocks_file.clone(),
                stream,
                conditions: files.keys().copied().collect(),
                stages: a.stages.clone(),
                source: CompletionSourceSpec::Import {
                    files,
                    strict_hashes: a.strict_hashes,
                },
                template: PromptTemplate::default(),
                output_dir: a.out_dir.clone().unwrap_or_else(|| PathBuf::from("report")),
                tool_version: toolstream::report::TOOL_VERSION.to_string(),
            }
        }
    };
    if let Some(dir) = a.out_dir {
        manifest.output_dir = dir;
    }
    let outcome = run_report(&manifest)?;
    for r in &outcome.conditions {
        if let Some(last) = r.final_stage() {
            eprintln!(
                "{} stage {}: exact {} name {} name+any {} malformed {}",
                r.condition,
                last.stage,
                toolstream::scorer::format_pct(last.macro_means.exact),
                toolstream::scorer::format_pct(last.macro_means.name),
                toolstream::scorer::format_pct(last.macro_means.name_any),
                toolstream::scorer::format_pct(last.macro_means.malformed),
            );
        }
        if r.stale_completions > 0 {
            eprintln!(
                "warning: {} stale completions for {}",
                r.stale_completions, r.condition
            );
        }
    }
    eprintln!("wrote {}", manifest.output_dir.display());
    Ok(())
}

fn parse_stdin() -> Result<(), HarnessError> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| HarnessError::io(Path::new("<stdin>"), e))?;
        let value = match parse_first_call(&line) {
            Ok(p) => json!({
                "ok": true,
                "name": p.call.name(),
                "params": p.call.params(),
                "span": [p.span.start, p.span.end],
            }),
            Err(f) => json!({"ok": false, "reason": f.reason, "offset": f.offset}),
        };
        writeln!(out, "{value}").map_err(|e| HarnessError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Split(a) => split(a),
        Command::Render(a) => render(a),
        Command::Generate(a) => generate(a),
        Command::Score(a) => score(a),
        Command::Matrix(a) => matrix(a),
        Command::Summary(a) => summary(a),
        Command::Report(a) => report(a),
        Command::Parse => parse_stdin(),
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::USAGE as u8
            } else {
                exit::OK as u8
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
