//! Episode ingestion, disjoint-API block partitioning and scored-example
//! extraction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callparse::{parse_first_call, render_call, ApiCall};

/// Default seed for block partitioning and sampled evaluation.
pub const DEFAULT_SEED: u64 = 42;
/// Per-block sample size of the quick evaluation pass run between stages.
pub const DEFAULT_SAMPLE_SIZE: usize = 32;

const RESPONSE_PREFIX: &str = "API-Response:";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("line {line}: duplicate episode id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("partition: {0}")]
    Partition(String),
    #[error("blocks file: {0}")]
    Blocks(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    #[serde(rename = "assistant")]
    AssistantText,
    ApiRequest,
    ApiResponse,
}

impl Role {
    pub fn is_trace(self) -> bool {
        matches!(self, Role::ApiRequest | Role::ApiResponse)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    /// Present iff `role` is `ApiRequest`; `text` is then its canonical rendering.
    pub call: Option<ApiCall>,
    /// Present iff `role` is `ApiResponse`.
    pub response_payload: Option<String>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self::plain(Role::User, text.into())
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::plain(Role::AssistantText, text.into())
    }

    pub fn request(call: ApiCall) -> Self {
        Turn {
            role: Role::ApiRequest,
            text: render_call(&call),
            call: Some(call),
            response_payload: None,
        }
    }

    pub fn response(payload: impl Into<String>) -> Self {
        let payload = payload.into();
        Turn {
            role: Role::ApiResponse,
            text: payload.clone(),
            call: None,
            response_payload: Some(payload),
        }
    }

    fn plain(role: Role, text: String) -> Self {
        Turn {
            role,
            text,
            call: None,
            response_payload: None,
        }
    }

    /// Builds a turn from a raw record, parsing request text into a call.
    pub fn from_raw(role: Role, text: &str) -> Result<Self, String> {
        match role {
            Role::User | Role::AssistantText => Ok(Self::plain(role, text.to_string())),
            Role::ApiResponse => {
                let payload = text.strip_prefix(RESPONSE_PREFIX).unwrap_or(text).trim();
                Ok(Self::response(payload))
            }
            Role::ApiRequest => {
                let parsed = parse_first_call(text)
                    .map_err(|f| format!("unparseable api_request {text:?}: {f}"))?;
                let rest = &text[parsed.span.end..];
                if parse_first_call(rest).is_ok() {
                    return Err(format!("api_request holds more than one call: {text:?}"));
                }
                Ok(Self::request(parsed.call))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub id: String,
    pub turns: Vec<Turn>,
    pub api_names: BTreeSet<String>,
}

impl Episode {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Self {
        let api_names = turns
            .iter()
            .filter_map(|t| t.call.as_ref().map(|c| c.name().to_string()))
            .collect();
        Episode {
            id: id.into(),
            turns,
            api_names,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub struct RawTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct RawEpisode {
    pub id: String,
    pub turns: Vec<RawTurn>,
}

impl From<&Episode> for RawEpisode {
    fn from(ep: &Episode) -> Self {
        RawEpisode {
            id: ep.id.clone(),
            turns: ep
                .turns
                .iter()
                .map(|t| RawTurn {
                    role: t.role,
                    text: t.text.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Episode>, CorpusError> {
    let CorpusFormat::Jsonl = format;
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Reads JSONL episodes; blank lines are skipped, line numbers are 1-based.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Episode>, CorpusError> {
    let mut seen = HashSet::new();
    let mut episodes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEpisode = serde_json::from_str(&line).map_err(|e| CorpusError::Ingest {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        let turns = raw
            .turns
            .iter()
            .map(|t| Turn::from_raw(t.role, &t.text))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|message| CorpusError::Ingest {
                line: line_no,
                message: format!("episode {:?}: {message}", raw.id),
            })?;
        episodes.push(Episode::new(raw.id, turns));
    }
    Ok(episodes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredExample {
    pub id: String,
    pub episode_id: String,
    pub cut_index: usize,
    /// Turns `[0, cut_index)` of the episode.
    pub context: Vec<Turn>,
    pub expected: ApiCall,
    /// 1-based block index; 0 until assigned.
    pub block_id: usize,
}

pub fn example_id(episode_id: &str, cut_index: usize) -> String {
    format!("{episode_id}#{cut_index}")
}

/// One example per `api_request` turn, context being every earlier turn.
pub fn extract_examples(episode: &Episode) -> Vec<ScoredExample> {
    episode
        .turns
        .iter()
        .enumerate()
        .filter_map(|(i, turn)| {
            let call = turn.call.as_ref()?;
            Some(ScoredExample {
                id: example_id(&episode.id, i),
                episode_id: episode.id.clone(),
                cut_index: i,
                context: episode.turns[..i].to_vec(),
                expected: call.clone(),
                block_id: 0,
            })
        })
        .collect()
}

pub fn extract_all(episodes: &[Episode]) -> Vec<ScoredExample> {
    episodes.iter().flat_map(extract_examples).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBlock {
    pub block_id: usize,
    pub api_names: BTreeSet<String>,
    pub examples: Vec<ScoredExample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub blocks: usize,
    /// Training order as 1-based block ids.
    pub block_order: Vec<usize>,
    pub seed: u64,
    pub sample_size: Option<usize>,
}

impl StreamSpec {
    pub fn new(blocks: usize, seed: u64) -> Result<Self, CorpusError> {
        let spec = StreamSpec {
            blocks,
            block_order: (1..=blocks).collect(),
            seed,
            sample_size: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.blocks < 2 {
            return Err(CorpusError::Partition(format!(
                "a stream needs at least 2 blocks, got {}",
                self.blocks
            )));
        }
        let mut sorted = self.block_order.clone();
        sorted.sort_unstable();
        if sorted != (1..=self.blocks).collect::<Vec<_>>() {
            return Err(CorpusError::Partition(format!(
                "block order {:?} is not a permutation of 1..={}",
                self.block_order, self.blocks
            )));
        }
        Ok(())
    }
}

/// Splits the scored examples into `t` blocks with pairwise-disjoint API names.
///
/// API-name groups are packed largest first into whichever block currently
/// holds the fewest examples (lowest block id on ties). Groups of equal size
/// are ordered by a seeded shuffle.
pub fn partition_blocks(
    episodes: &[Episode],
    t: usize,
    seed: u64,
) -> Result<Vec<DomainBlock>, CorpusError> {
    if t < 2 {
        return Err(CorpusError::Partition(format!(
            "need at least 2 blocks, got {t}"
        )));
    }
    let mut groups: BTreeMap<String, Vec<ScoredExample>> = BTreeMap::new();
    for ex in extract_all(episodes) {
        groups
            .entry(ex.expected.name().to_string())
            .or_default()
            .push(ex);
    }
    if groups.len() < t {
        return Err(CorpusError::Partition(format!(
            "{} distinct API names cannot fill {t} disjoint blocks",
            groups.len()
        )));
    }

    let mut names: Vec<String> = groups.keys().cloned().collect();
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    names.sort_by_key(|n| std::cmp::Reverse(groups[n].len()));

    let mut assigned: Vec<Vec<String>> = vec![Vec::new(); t];
    let mut sizes = vec![0usize; t];
    for name in names {
        let target = (0..t).min_by_key(|&b| (sizes[b], b)).expect("t >= 2");
        sizes[target] += groups[&name].len();
        assigned[target].push(name);
    }

    let mut blocks: Vec<DomainBlock> = assigned
        .into_iter()
        .enumerate()
        .map(|(i, names)| DomainBlock {
            block_id: i + 1,
            api_names: names.into_iter().collect(),
            examples: Vec::new(),
        })
        .collect();
    // Examples keep corpus order inside each block.
    for ex in extract_all(episodes) {
        let b = blocks
            .iter_mut()
            .find(|b| b.api_names.contains(ex.expected.name()))
            .expect("every API name was assigned");
        b.examples.push(ScoredExample {
            block_id: b.block_id,
            ..ex
        });
    }
    Ok(blocks)
}

/// Deterministic uniform sample without replacement, kept in block order.
pub fn sample_eval_subset(block: &DomainBlock, n: usize, seed: u64) -> Vec<ScoredExample> {
    let len = block.examples.len();
    if n >= len {
        return block.examples.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block.block_id as u64);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| block.examples[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub block_id: usize,
    pub api_names: Vec<String>,
    pub example_ids: Vec<String>,
}

/// On-disk block assignment (`blocks.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlocksFile {
    #[serde(rename = "T")]
    pub t: usize,
    pub blocks: Vec<BlockEntry>,
}

impl BlocksFile {
    pub fn from_blocks(blocks: &[DomainBlock]) -> Self {
        BlocksFile {
            t: blocks.len(),
            blocks: blocks
                .iter()
                .map(|b| BlockEntry {
                    block_id: b.block_id,
                    api_names: b.api_names.iter().cloned().collect(),
                    example_ids: b.examples.iter().map(|e| e.id.clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: BlocksFile =
            serde_json::from_str(&text).map_err(|e| CorpusError::Blocks(e.to_string()))?;
        if file.t != file.blocks.len() {
            return Err(CorpusError::Blocks(format!(
                "T = {} but {} blocks listed",
                file.t,
                file.blocks.len()
            )));
        }
        Ok(file)
    }

    /// Rebuilds blocks from `episodes`, checking disjointness and coverage.
    pub fn resolve(&self, episodes: &[Episode]) -> Result<Vec<DomainBlock>, CorpusError> {
        let mut by_id: BTreeMap<String, ScoredExample> = extract_all(episodes)
            .into_iter()
            .map(|e| (e.id.clone(), e))
            .collect();
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.blocks.len());
        for entry in &self.blocks {
            for name in &entry.api_names {
                if let Some(prev) = owner.insert(name, entry.block_id) {
                    return Err(CorpusError::Blocks(format!(
                        "API {name:?} appears in blocks {prev} and {}",
                        entry.block_id
                    )));
                }
            }
            let mut examples = Vec::with_capacity(entry.example_ids.len());
            for id in &entry.example_ids {
                let ex = by_id.remove(id).ok_or_else(|| {
                    CorpusError::Blocks(format!("unknown or repeated example id {id:?}"))
                })?;
                if !entry.api_names.iter().any(|n| n == ex.expected.name()) {
                    return Err(CorpusError::Blocks(format!(
                        "example {id:?} calls {} outside block {}",
                        ex.expected.name(),
                        entry.block_id
                    )));
                }
                examples.push(ScoredExample {
                    block_id: entry.block_id,
                    ..ex
                });
            }
            out.push(DomainBlock {
                block_id: entry.block_id,
                api_names: entry.api_names.iter().cloned().collect(),
                examples,
            });
        }
        if let Some(id) = by_id.keys().next() {
            return Err(CorpusError::Blocks(format!(
                "{} scored examples are unassigned, first {id:?}",
                by_id.len()
            )));
        }
        Ok(out)
    }
}
