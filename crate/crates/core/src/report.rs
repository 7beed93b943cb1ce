//! Pipeline stages shared by the CLI, and the end-to-end `report` run that
//! writes every artifact into one directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::callparse::{parse_first_call, ApiCall};
use crate::clmetrics::{summarize, ClSummary, StageGrid};
use crate::corpus::{
    load_corpus, partition_blocks, sample_eval_subset, BlocksFile, CorpusFormat, DomainBlock,
    Episode, StreamSpec,
};
use crate::error::HarnessError;
use crate::genclient::{
    import_completions, index_prompts, CompletionCache, CompletionRecord, EndpointConfig, GenError,
    Generator,
};
use crate::scorer::{
    aggregate_all, aggregate_macro, aggregate_micro, format_pct, write_category_csv,
    write_scores_jsonl, BlockScore, CategoryCounts, Metric, MetricMeans, ScoreRecord,
};
use crate::transform::{
    context_stats, render_prompt, write_prompts_jsonl, Condition, ContextStats, PromptRecord,
    PromptTemplate, RenderedPrompt,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), HarnessError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), HarnessError>,
{
    let mut w = create_file(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            HarnessError::Schema(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn load_blocks(
    episodes: &[Episode],
    blocks_file: Option<&Path>,
    stream: &StreamSpec,
) -> Result<Vec<DomainBlock>, HarnessError> {
    let blocks = match blocks_file {
        Some(path) => BlocksFile::read(path)?.resolve(episodes)?,
        None => partition_blocks(episodes, stream.blocks, stream.seed)?,
    };
    if blocks.len() != stream.blocks {
        return Err(HarnessError::Schema(format!(
            "stream declares {} blocks but the assignment has {}",
            stream.blocks,
            blocks.len()
        )));
    }
    Ok(blocks)
}

/// Renders every (optionally sampled) example of every block, in block then
/// corpus order.
pub fn render_blocks(
    blocks: &[DomainBlock],
    condition: Condition,
    template: &PromptTemplate,
    sample: Option<(usize, u64)>,
) -> Vec<RenderedPrompt> {
    blocks
        .iter()
        .flat_map(|b| match sample {
            Some((n, seed)) => sample_eval_subset(b, n, seed),
            None => b.examples.clone(),
        })
        .map(|ex| render_prompt(&ex, condition, template))
        .collect()
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>, HarnessError> {
    read_jsonl(path)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, HarnessError> {
    read_jsonl(path)
}

pub fn read_completions(path: &Path) -> Result<Vec<CompletionRecord>, HarnessError> {
    Ok(import_completions(path, None, false)?.records)
}

/// Example id to block id.
pub fn block_index(blocks: &BlocksFile) -> HashMap<String, usize> {
    blocks
        .blocks
        .iter()
        .flat_map(|b| b.example_ids.iter().map(move |id| (id.clone(), b.block_id)))
        .collect()
}

/// Scores one condition's completions against the rendered prompts.
///
/// Every prompt must have exactly one completion per stage that appears in
/// `completions`; completions for unknown prompts are rejected.
pub fn score_completions(
    prompts: &[PromptRecord],
    blocks: &HashMap<String, usize>,
    completions: &[CompletionRecord],
) -> Result<Vec<ScoreRecord>, HarnessError> {
    let Some(condition) = prompts.first().map(|p| p.condition) else {
        return Ok(Vec::new());
    };
    if prompts.iter().any(|p| p.condition != condition) {
        return Err(HarnessError::Schema(
            "prompts mix conditions; score one condition at a time".into(),
        ));
    }
    let mut expected: HashMap<&str, (usize, ApiCall, usize)> = HashMap::new();
    for (order, p) in prompts.iter().enumerate() {
        let call = parse_first_call(&p.target)
            .map_err(|f| {
                HarnessError::Schema(format!("target of {} does not parse: {f}", p.example_id))
            })?
            .call;
        let block = *blocks.get(&p.example_id).ok_or_else(|| {
            HarnessError::Schema(format!("{} is not assigned to a block", p.example_id))
        })?;
        expected.insert(&p.example_id, (block, call, order));
    }

    let mut by_stage: BTreeMap<usize, BTreeMap<usize, &CompletionRecord>> = BTreeMap::new();
    for c in completions.iter().filter(|c| c.condition == condition) {
        let (_, _, order) = expected.get(c.example_id.as_str()).ok_or_else(|| {
            HarnessError::Schema(format!(
                "completion for unknown example {} ({condition})",
                c.example_id
            ))
        })?;
        if by_stage
            .entry(c.stage)
            .or_default()
            .insert(*order, c)
            .is_some()
        {
            return Err(HarnessError::Schema(format!(
                "duplicate completion for {} at stage {}",
                c.example_id, c.stage
            )));
        }
    }

    let mut records = Vec::with_capacity(prompts.len() * by_stage.len());
    for (stage, done) in &by_stage {
        if done.len() != prompts.len() {
            let missing = prompts
                .iter()
                .enumerate()
                .find(|(i, _)| !done.contains_key(i))
                .map(|(_, p)| p.example_id.as_str())
                .unwrap_or_default();
            return Err(HarnessError::Schema(format!(
                "stage {stage} ({condition}) lacks completions for {} examples, first {missing}",
                prompts.len() - done.len()
            )));
        }
        for c in done.values() {
            let (block, call, _) = &expected[c.example_id.as_str()];
            records.push(ScoreRecord::score(
                c.example_id.clone(),
                *stage,
                *block,
                &c.text,
                call,
            ));
        }
    }
    records.sort_by_key(|r| (r.stage, r.block_id));
    Ok(records)
}

/// One grid per metric with columns in stream (training) order.
pub fn grids_from_scores(
    scores: &[BlockScore],
    block_order: &[usize],
) -> BTreeMap<Metric, StageGrid> {
    let position: HashMap<usize, usize> = block_order
        .iter()
        .enumerate()
        .map(|(pos, &b)| (b, pos + 1))
        .collect();
    let reordered: Vec<BlockScore> = scores
        .iter()
        .map(|s| BlockScore {
            block_id: position.get(&s.block_id).copied().unwrap_or(0),
            ..*s
        })
        .collect();
    Metric::ALL
        .iter()
        .map(|&m| (m, StageGrid::from_scores(&reordered, m, block_order.len())))
        .collect()
}

pub fn write_heatmap_csv(
    grids: &[(Condition, &StageGrid)],
    out: impl Write,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["condition", "stage", "block", "value"])?;
    for (cond, grid) in grids {
        for (stage, row) in &grid.rows {
            for (j, v) in row.iter().enumerate() {
                if v.is_nan() {
                    continue;
                }
                w.write_record([
                    cond.tag().to_string(),
                    stage.to_string(),
                    (j + 1).to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_heatmap_csv`].
pub fn read_heatmap_csv(input: impl Read) -> Result<BTreeMap<Condition, StageGrid>, String> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut cells: BTreeMap<Condition, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let cond: Condition = field(0).parse()?;
        let stage: usize = field(1)
            .parse()
            .map_err(|_| format!("bad stage {:?}", field(1)))?;
        let block: usize = field(2)
            .parse()
            .map_err(|_| format!("bad block {:?}", field(2)))?;
        let value: f64 = field(3)
            .parse()
            .map_err(|_| format!("bad value {:?}", field(3)))?;
        if block == 0 {
            return Err("block indices are 1-based".into());
        }
        cells.entry(cond).or_default().push((stage, block, value));
    }
    Ok(cells
        .into_iter()
        .map(|(cond, cells)| {
            let blocks = cells.iter().map(|c| c.1).max().unwrap_or(0);
            let mut grid = StageGrid {
                blocks,
                rows: BTreeMap::new(),
            };
            for (stage, block, value) in cells {
                grid.rows
                    .entry(stage)
                    .or_insert_with(|| vec![f64::NAN; blocks])[block - 1] = value;
            }
            (cond, grid)
        })
        .collect())
}

/// Emits one long-format heatmap CSV per metric into `dir`.
pub fn emit_heatmap_data(
    grids: &BTreeMap<Condition, BTreeMap<Metric, StageGrid>>,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for metric in Metric::ALL {
        let path = dir.join(format!("heatmap_{}.csv", metric.tag()));
        let entries: Vec<(Condition, &StageGrid)> = grids
            .iter()
            .filter_map(|(c, by_metric)| by_metric.get(&metric).map(|g| (*c, g)))
            .collect();
        write_with(&path, |w| {
            write_heatmap_csv(&entries, w).map_err(csv_err(&path))
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionSourceSpec {
    /// Recorded completion files, one per condition tag.
    Import {
        files: BTreeMap<Condition, PathBuf>,
        #[serde(default)]
        strict_hashes: bool,
    },
    Endpoint {
        endpoint: EndpointConfig,
        cache_dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub corpus: PathBuf,
    /// Fixed block assignment; when absent blocks are partitioned from the
    /// corpus with the stream seed.
    #[serde(default)]
    pub blocks_file: Option<PathBuf>,
    pub stream: StreamSpec,
    pub conditions: Vec<Condition>,
    /// Stages to evaluate. Empty means every stage found in imported files.
    #[serde(default)]
    pub stages: Vec<usize>,
    pub source: CompletionSourceSpec,
    #[serde(default)]
    pub template: PromptTemplate,
    pub output_dir: PathBuf,
    #[serde(default = "tool_version")]
    pub tool_version: String,
}

fn tool_version() -> String {
    TOOL_VERSION.to_string()
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        serde_json::from_str(&read_file(path)?)
            .map_err(|e| HarnessError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.stream.validate()?;
        if self.conditions.is_empty() {
            return Err(HarnessError::Schema("manifest lists no conditions".into()));
        }
        if let Some(&s) = self.stages.iter().find(|&&s| s > self.stream.blocks) {
            return Err(HarnessError::Schema(format!(
                "stage {s} exceeds the {}-block stream",
                self.stream.blocks
            )));
        }
        if let CompletionSourceSpec::Import { files, .. } = &self.source {
            if let Some(c) = self.conditions.iter().find(|c| !files.contains_key(c)) {
                return Err(HarnessError::Schema(format!(
                    "no completion file for condition {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageMeans {
    pub stage: usize,
    #[serde(rename = "macro")]
    pub macro_means: MetricMeans,
    #[serde(rename = "micro")]
    pub micro_means: MetricMeans,
}

#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub condition: Condition,
    pub scores: Vec<ScoreRecord>,
    pub block_scores: Vec<BlockScore>,
    pub means: Vec<StageMeans>,
    pub grids: BTreeMap<Metric, StageGrid>,
    pub summary: Option<ClSummary>,
    pub stale_completions: usize,
}

impl ConditionReport {
    pub fn final_stage(&self) -> Option<&StageMeans> {
        self.means.last()
    }

    pub fn categories_at(&self, stage: usize) -> CategoryCounts {
        CategoryCounts::from_records(self.scores.iter().filter(|r| r.stage == stage))
    }
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub conditions: Vec<ConditionReport>,
    pub context: ContextStats,
}

impl ReportOutcome {
    pub fn condition(&self, c: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|r| r.condition == c)
    }
}

fn collect_completions(
    manifest: &RunManifest,
    condition: Condition,
    prompts: &[RenderedPrompt],
) -> Result<(Vec<CompletionRecord>, usize), HarnessError> {
    match &manifest.source {
        CompletionSourceSpec::Import {
            files,
            strict_hashes,
        } => {
            let index = index_prompts(prompts);
            let imported = import_completions(&files[&condition], None, false)?;
            // Sampled runs only score the rendered subset.
            let records: Vec<CompletionRecord> = imported
                .records
                .into_iter()
                .filter(|r| r.condition == condition)
                .filter(|r| index.contains_key(&(r.example_id.clone(), condition)))
                .filter(|r| manifest.stages.is_empty() || manifest.stages.contains(&r.stage))
                .collect();
            let mut stale = 0;
            for r in &records {
                if index[&(r.example_id.clone(), condition)] != r.prompt_hash {
                    if *strict_hashes {
                        return Err(GenError::Stale {
                            example_id: r.example_id.clone(),
                            condition,
                        }
                        .into());
                    }
                    stale += 1;
                }
            }
            Ok((records, stale))
        }
        CompletionSourceSpec::Endpoint {
            endpoint,
            cache_dir,
        } => {
            let generator =
                Generator::new(endpoint.clone(), Some(CompletionCache::open(cache_dir)));
            let stages: Vec<usize> = if manifest.stages.is_empty() {
                (1..=manifest.stream.blocks).collect()
            } else {
                manifest.stages.clone()
            };
            let mut out = Vec::new();
            for stage in stages {
                let batch = generator.batch_generate(prompts, stage);
                if let Some(first) = batch.failures.first() {
                    return Err(HarnessError::Batch {
                        failed: batch.failures.len(),
                        total: prompts.len(),
                        first: format!("{}: {}", first.example_id, first.error),
                    });
                }
                out.extend(batch.records.into_iter().flatten());
            }
            Ok((out, 0))
        }
    }
}

fn write_final_table(
    path: &Path,
    reports: &[ConditionReport],
    blocks: usize,
) -> Result<(), HarnessError> {
    write_with(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["condition".to_string(), "stage".into(), "metric".into()];
        header.extend((1..=blocks).map(|j| format!("D{j}")));
        header.extend(["mean".to_string(), "micro".into()]);
        csv.write_record(&header).map_err(csv_err(path))?;
        for r in reports {
            let Some(last) = r.final_stage() else {
                continue;
            };
            for metric in Metric::ALL {
                let grid = &r.grids[&metric];
                let row = &grid.rows[&last.stage];
                let mut rec = vec![
                    r.condition.tag().to_string(),
                    last.stage.to_string(),
                    metric.tag().to_string(),
                ];
                rec.extend(row.iter().map(|&v| {
                    if v.is_nan() {
                        String::new()
                    } else {
                        format_pct(v)
                    }
                }));
                rec.push(format_pct(last.macro_means.get(metric)));
                rec.push(format_pct(last.micro_means.get(metric)));
                csv.write_record(&rec).map_err(csv_err(path))?;
            }
        }
        csv.flush().map_err(io_err(path))
    })
}

/// Runs the whole pipeline and writes every artifact into
/// `manifest.output_dir`. Inputs are only read.
pub fn run_report(manifest: &RunManifest) -> Result<ReportOutcome, HarnessError> {
    manifest.validate()?;
    let out = &manifest.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let episodes = load_corpus(&manifest.corpus, CorpusFormat::Jsonl)?;
    let blocks = load_blocks(&episodes, manifest.blocks_file.as_deref(), &manifest.stream)?;
    let blocks_json = BlocksFile::from_blocks(&blocks);
    let blocks_path = out.join("blocks.json");
    fs::write(&blocks_path, blocks_json.to_json()).map_err(io_err(&blocks_path))?;
    let block_of = block_index(&blocks_json);

    let sample = manifest
        .stream
        .sample_size
        .map(|n| (n, manifest.stream.seed));
    let mut all_prompts = Vec::new();
    let mut reports = Vec::new();
    for &condition in &manifest.conditions {
        let prompts = render_blocks(&blocks, condition, &manifest.template, sample);
        let prompts_path = out.join(format!("prompts_{condition}.jsonl"));
        write_with(&prompts_path, |w| {
            write_prompts_jsonl(&prompts, w).map_err(io_err(&prompts_path))
        })?;

        let (completions, stale) = collect_completions(manifest, condition, &prompts)?;
        let records: Vec<PromptRecord> = prompts.iter().map(PromptRecord::from).collect();
        let scores = score_completions(&records, &block_of, &completions)?;
        let scores_path = out.join(format!("scores_{condition}.jsonl"));
        write_with(&scores_path, |w| {
            write_scores_jsonl(&scores, w).map_err(io_err(&scores_path))
        })?;

        let block_scores = aggregate_all(&scores);
        let mut means = Vec::new();
        let stages: Vec<usize> = block_scores
            .iter()
            .map(|b| b.stage)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for &stage in &stages {
            let at: Vec<BlockScore> = block_scores
                .iter()
                .filter(|b| b.stage == stage)
                .copied()
                .collect();
            means.push(StageMeans {
                stage,
                macro_means: aggregate_macro(&at)?,
                micro_means: aggregate_micro(&at)?,
            });
        }

        let grids = grids_from_scores(&block_scores, &manifest.stream.block_order);
        for (metric, grid) in &grids {
            let path = out.join(format!("matrix_{}_{condition}.csv", metric.tag()));
            write_with(&path, |w| grid.write_csv(w).map_err(HarnessError::from))?;
        }

        let categories_path = out.join(format!("categories_{condition}.csv"));
        let columns: Vec<(String, CategoryCounts)> = stages
            .iter()
            .map(|&s| {
                (
                    format!("stage_{s}"),
                    CategoryCounts::from_records(scores.iter().filter(|r| r.stage == s)),
                )
            })
            .collect();
        write_with(&categories_path, |w| {
            write_category_csv(&columns, w).map_err(csv_err(&categories_path))
        })?;

        let exact = &grids[&Metric::Exact];
        let summary = match exact.to_matrix() {
            Ok(matrix) => {
                let baseline = exact.baseline().transpose()?;
                let s = summarize(&matrix.with_metric(Metric::Exact), baseline.as_ref())?;
                write_json(&out.join(format!("summary_{condition}.json")), &s)?;
                Some(s)
            }
            Err(_) => None,
        };
        write_json(&out.join(format!("means_{condition}.json")), &means)?;

        all_prompts.extend(prompts);
        reports.push(ConditionReport {
            condition,
            scores,
            block_scores,
            means,
            grids,
            summary,
            stale_completions: stale,
        });
    }

    let context = context_stats(&all_prompts);
    write_json(&out.join("context_stats.json"), &context)?;

    let by_condition: BTreeMap<Condition, BTreeMap<Metric, StageGrid>> = reports
        .iter()
        .map(|r| (r.condition, r.grids.clone()))
        .collect();
    emit_heatmap_data(&by_condition, out)?;
    write_final_table(
        &out.join("final_stage.csv"),
        &reports,
        manifest.stream.blocks,
    )?;

    let final_columns: Vec<(String, CategoryCounts)> = reports
        .iter()
        .filter_map(|r| {
            r.final_stage()
                .map(|m| (r.condition.tag().to_string(), r.categories_at(m.stage)))
        })
        .collect();
    let path = out.join("categories_final.csv");
    write_with(&path, |w| {
        write_category_csv(&final_columns, w).map_err(csv_err(&path))
    })?;

    write_json(&out.join("manifest.json"), manifest)?;
    Ok(ReportOutcome {
        conditions: reports,
        context,
    })
}

/// Parses a `key = value` config file into `--key value` arguments.
///
/// Blank lines and `#` comments are ignored; `true` turns into a bare flag and
/// `false` drops the key. Underscores in keys become dashes.
pub fn config_args(text: &str) -> Result<Vec<String>, HarnessError> {
    let mut args = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::Schema(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.push(v.to_string());
            }
        }
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[(usize, &[f64])]) -> StageGrid {
        StageGrid {
            blocks: rows[0].1.len(),
            rows: rows.iter().map(|(s, r)| (*s, r.to_vec())).collect(),
        }
    }

    #[test]
    fn heatmap_rows_and_read_back() {
        let a = grid(&[
            (1, &[0.9, 0.1, 0.2, 0.3]),
            (2, &[0.5, 0.8, 0.1, 0.2]),
            (3, &[0.4, 0.6, 0.7, 0.1]),
            (4, &[0.357_142_857_142_857_1, 0.4, 0.3, 0.6]),
        ]);
        let b = grid(&[
            (1, &[0.8, 0.2, 0.2, 0.3]),
            (2, &[0.6, 0.8, 0.3, 0.2]),
            (3, &[0.5, 0.7, 0.7, 0.4]),
            (4, &[0.579, 0.615, 0.447, 0.636]),
        ]);
        let mut buf = Vec::new();
        write_heatmap_csv(
            &[(Condition::Stripped, &a), (Condition::Trajectory, &b)],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 32);
        let back = read_heatmap_csv(text.as_bytes()).unwrap();
        assert_eq!(back[&Condition::Stripped], a);
        assert_eq!(back[&Condition::Trajectory], b);
    }

    #[test]
    fn empty_heatmap_is_header_only() {
        let mut buf = Vec::new();
        write_heatmap_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "condition,stage,block,value\n"
        );
    }

    #[test]
    fn config_file_to_args() {
        let args = config_args(
            "# comment\ncorpus = c.jsonl\nblocks=4\nstrict_hashes = true\nverbose = false\n",
        )
        .unwrap();
        assert_eq!(
            args,
            vec!["--corpus", "c.jsonl", "--blocks", "4", "--strict-hashes"]
        );
        assert!(config_args("nonsense").is_err());
    }

    #[test]
    fn grid_columns_follow_block_order() {
        let score = |stage, block_id, acc| BlockScore {
            stage,
            block_id,
            n: 1,
            n_exact: 0,
            n_name: 0,
            n_name_any: 0,
            n_malformed: 0,
            acc_exact: acc,
            acc_name: acc,
            acc_name_any: acc,
            rate_malformed: 0.0,
        };
        let grids = grids_from_scores(&[score(1, 2, 0.9), score(1, 1, 0.1)], &[2, 1]);
        assert_eq!(grids[&Metric::Exact].rows[&1], vec![0.9, 0.1]);
    }
}
